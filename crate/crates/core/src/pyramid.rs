//! Orthonormal 2x2 Haar superpixel transform and the recursive multiscale
//! decomposition built on it.
//!
//! The transform maps each 2x2 block (a, b; c, d) to four coefficients
//!
//! ```text
//!   ch0 = (a + b + c + d) / 2      low resolution (2x the block average)
//!   ch1 = (a - b + c - d) / 2      horizontal detail
//!   ch2 = (a + b - c - d) / 2      vertical detail
//!   ch3 = (a - b - c + d) / 2      diagonal detail
//! ```
//!
//! The basis is orthonormal, so the transform is an isometry with unit
//! Jacobian determinant: image log-likelihoods decompose across levels with
//! no correction term.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::Image;

/// 4-channel Haar representation of an even-sized image.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelImage {
    /// Channel 0: low-resolution image (2x block average).
    pub low: Image,
    /// Channels 1-3: horizontal, vertical, diagonal detail coefficients.
    pub details: [Image; 3],
}

impl SuperpixelImage {
    pub fn dims(&self) -> (usize, usize) {
        self.low.dim()
    }

    /// Channels in mask order: low resolution first, then the three details.
    pub fn channels(&self) -> Vec<Image> {
        vec![
            self.low.clone(),
            self.details[0].clone(),
            self.details[1].clone(),
            self.details[2].clone(),
        ]
    }
}

/// Forward Haar superpixel transform of an even-dimensioned image.
pub fn haar_forward(image: &Image) -> Result<SuperpixelImage> {
    let (h, w) = image.dim();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Geometry(format!(
            "haar transform needs even nonzero dimensions, got {h}x{w}"
        )));
    }
    let (hh, hw) = (h / 2, w / 2);
    let mut low = Array2::zeros((hh, hw));
    let mut d1 = Array2::zeros((hh, hw));
    let mut d2 = Array2::zeros((hh, hw));
    let mut d3 = Array2::zeros((hh, hw));
    for r in 0..hh {
        for c in 0..hw {
            let a = image[[2 * r, 2 * c]];
            let b = image[[2 * r, 2 * c + 1]];
            let cc = image[[2 * r + 1, 2 * c]];
            let d = image[[2 * r + 1, 2 * c + 1]];
            low[[r, c]] = (a + b + cc + d) / 2.0;
            d1[[r, c]] = (a - b + cc - d) / 2.0;
            d2[[r, c]] = (a + b - cc - d) / 2.0;
            d3[[r, c]] = (a - b - cc + d) / 2.0;
        }
    }
    Ok(SuperpixelImage { low, details: [d1, d2, d3] })
}

/// Exact inverse of [`haar_forward`].
pub fn haar_inverse(sp: &SuperpixelImage) -> Image {
    let (hh, hw) = sp.dims();
    let mut out = Array2::zeros((2 * hh, 2 * hw));
    for r in 0..hh {
        for c in 0..hw {
            let s = sp.low[[r, c]];
            let d1 = sp.details[0][[r, c]];
            let d2 = sp.details[1][[r, c]];
            let d3 = sp.details[2][[r, c]];
            out[[2 * r, 2 * c]] = (s + d1 + d2 + d3) / 2.0;
            out[[2 * r, 2 * c + 1]] = (s - d1 + d2 - d3) / 2.0;
            out[[2 * r + 1, 2 * c]] = (s + d1 - d2 - d3) / 2.0;
            out[[2 * r + 1, 2 * c + 1]] = (s - d1 - d2 + d3) / 2.0;
        }
    }
    out
}

/// One pyramid level: the detail channels of a scale together with the
/// low-resolution image that conditions them.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    /// Three detail channel images (same grid as `low`).
    pub details: [Image; 3],
    /// The low-resolution image produced alongside these details.
    pub low: Image,
}

impl PyramidLevel {
    /// Channels in mask order (low resolution first).
    pub fn channels(&self) -> Vec<Image> {
        vec![
            self.low.clone(),
            self.details[0].clone(),
            self.details[1].clone(),
            self.details[2].clone(),
        ]
    }
}

/// Recursive superpixel decomposition: detail levels ordered fine to coarse
/// plus the coarsest image.
#[derive(Debug, Clone)]
pub struct Pyramid {
    /// Detail levels; `levels[0]` is the finest.
    pub levels: Vec<PyramidLevel>,
    /// Coarsest low-resolution image.
    pub coarse: Image,
}

impl Pyramid {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

/// Apply the superpixel transform `depth` times to successive low-resolution
/// images. Dimensions must be divisible by 2^depth.
pub fn build_pyramid(image: &Image, depth: usize) -> Result<Pyramid> {
    let (h, w) = image.dim();
    let step = 1usize << depth;
    if h % step != 0 || w % step != 0 || h == 0 || w == 0 {
        return Err(Error::Geometry(format!(
            "dimensions {h}x{w} not divisible by 2^{depth}"
        )));
    }
    let mut levels = Vec::with_capacity(depth);
    let mut current = image.clone();
    for _ in 0..depth {
        let sp = haar_forward(&current)?;
        current = sp.low.clone();
        levels.push(PyramidLevel { details: sp.details, low: sp.low });
    }
    Ok(Pyramid { levels, coarse: current })
}

/// Exact inverse of [`build_pyramid`].
pub fn collapse_pyramid(p: &Pyramid) -> Image {
    let mut current = p.coarse.clone();
    for level in p.levels.iter().rev() {
        let sp = SuperpixelImage { low: current, details: level.details.clone() };
        current = haar_inverse(&sp);
    }
    current
}
