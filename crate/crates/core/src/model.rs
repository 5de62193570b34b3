//! The full multiscale model: one conditional model per scale plus its mask.

use crate::error::{Error, Result};
use crate::mcgsm::McgsmParams;
use crate::neighborhoods::{MaskSpec, NeighborhoodMask};

/// A conditional model bound to the mask it was trained under.
#[derive(Debug, Clone)]
pub struct ScaleModel {
    pub params: McgsmParams,
    pub mask_spec: MaskSpec,
}

impl ScaleModel {
    pub fn mask(&self) -> Result<NeighborhoodMask> {
        let mask = self.mask_spec.build()?;
        if mask.d_in() != self.params.d_in || mask.d_out() != self.params.d_out {
            return Err(Error::Shape(format!(
                "mask is {} -> {}, model expects {} -> {}",
                mask.d_in(),
                mask.d_out(),
                self.params.d_in,
                self.params.d_out
            )));
        }
        Ok(mask)
    }
}

/// One coarse model plus `depth()` detail models, finest first.
#[derive(Debug, Clone)]
pub struct MultiscaleModel {
    pub coarse: ScaleModel,
    /// Detail models; `details[0]` operates at the finest scale.
    pub details: Vec<ScaleModel>,
}

impl MultiscaleModel {
    /// Number of pyramid levels (0 means a single-scale model).
    pub fn depth(&self) -> usize {
        self.details.len()
    }
}
