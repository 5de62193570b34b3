//! Versioned model persistence: human-readable JSON with explicit array
//! shapes and base-16-encoded float payloads, so a round trip reproduces
//! every parameter bit-exactly while staying diffable.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mcgsm::mcgsm::McgsmParams;
use mcgsm::neighborhoods::MaskSpec;
use mcgsm::{MultiscaleModel, ScaleModel};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

/// A numeric array with its shape spelled out and data hex-encoded
/// (little-endian f64).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HexArray {
    pub shape: Vec<usize>,
    pub data: String,
}

impl HexArray {
    fn from_slice(shape: Vec<usize>, values: &[f64]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        HexArray { shape, data: hex::encode(bytes) }
    }

    fn values(&self) -> Result<Vec<f64>> {
        let bytes = hex::decode(&self.data).context("decoding hex float array")?;
        if bytes.len() % 8 != 0 {
            bail!("hex payload length {} is not a multiple of 8", bytes.len());
        }
        let n: usize = self.shape.iter().product();
        if bytes.len() / 8 != n {
            bail!("array declares shape {:?} but holds {} values", self.shape, bytes.len() / 8);
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn from_matrix(m: &Array2<f64>) -> Self {
        // Iterate in logical order; the matrix may be stored transposed.
        let values: Vec<f64> = m.iter().cloned().collect();
        Self::from_slice(vec![m.nrows(), m.ncols()], &values)
    }

    fn to_matrix(&self) -> Result<Array2<f64>> {
        if self.shape.len() != 2 {
            bail!("expected a rank-2 array, got shape {:?}", self.shape);
        }
        Ok(Array2::from_shape_vec((self.shape[0], self.shape[1]), self.values()?)?)
    }

    fn from_vector(v: &Array1<f64>) -> Self {
        let values: Vec<f64> = v.iter().cloned().collect();
        Self::from_slice(vec![v.len()], &values)
    }

    fn to_vector(&self) -> Result<Array1<f64>> {
        if self.shape.len() != 1 {
            bail!("expected a rank-1 array, got shape {:?}", self.shape);
        }
        Ok(Array1::from_vec(self.values()?))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsRecord {
    pub n_components: usize,
    pub n_scales: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub chol_k: Vec<HexArray>,
    pub chol_m: Vec<HexArray>,
    pub predictors: Vec<HexArray>,
    pub log_lambda: HexArray,
    pub input_mean: HexArray,
    pub output_mean: HexArray,
}

impl ParamsRecord {
    pub fn from_params(p: &McgsmParams) -> Self {
        ParamsRecord {
            n_components: p.n_components,
            n_scales: p.n_scales,
            d_in: p.d_in,
            d_out: p.d_out,
            chol_k: p.chol_k.iter().map(HexArray::from_matrix).collect(),
            chol_m: p.chol_m.iter().map(HexArray::from_matrix).collect(),
            predictors: p.predictors.iter().map(HexArray::from_matrix).collect(),
            log_lambda: HexArray::from_matrix(&p.log_lambda),
            input_mean: HexArray::from_vector(&p.input_mean),
            output_mean: HexArray::from_vector(&p.output_mean),
        }
    }

    pub fn to_params(&self) -> Result<McgsmParams> {
        let to_mats = |v: &[HexArray]| -> Result<Vec<Array2<f64>>> {
            v.iter().map(|h| h.to_matrix()).collect()
        };
        let p = McgsmParams {
            n_components: self.n_components,
            n_scales: self.n_scales,
            d_in: self.d_in,
            d_out: self.d_out,
            chol_k: to_mats(&self.chol_k)?,
            chol_m: to_mats(&self.chol_m)?,
            predictors: to_mats(&self.predictors)?,
            log_lambda: self.log_lambda.to_matrix()?,
            input_mean: self.input_mean.to_vector()?,
            output_mean: self.output_mean.to_vector()?,
        };
        if p.chol_k.len() != p.n_components
            || p.chol_m.len() != p.n_components
            || p.predictors.len() != p.n_components
            || p.log_lambda.dim() != (p.n_components, p.n_scales)
            || p.input_mean.len() != p.d_in
            || p.output_mean.len() != p.d_out
        {
            bail!("parameter record shapes are inconsistent with declared dimensions");
        }
        for m in p.chol_k.iter().chain(&p.chol_m) {
            if m.nrows() != m.ncols() {
                bail!("precision factors must be square");
            }
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub mask: MaskSpec,
    pub params: ParamsRecord,
}

impl ScaleRecord {
    pub fn from_model(m: &ScaleModel) -> Self {
        ScaleRecord {
            mask: m.mask_spec,
            params: ParamsRecord::from_params(&m.params),
        }
    }

    pub fn to_model(&self) -> Result<ScaleModel> {
        Ok(ScaleModel { params: self.params.to_params()?, mask_spec: self.mask })
    }
}

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub corpus: String,
    pub n_images: usize,
    pub seed: u64,
    pub samples_per_scale: usize,
    pub n_components: usize,
    pub n_scales: usize,
    pub max_iters: usize,
    pub validation_fraction: f64,
    /// Final training log-likelihood per scale (nats), coarse last.
    pub final_train_ll: Vec<f64>,
    /// Best validation log-likelihood per scale, when validation was on.
    pub validation_ll: Vec<Option<f64>>,
    /// Standard deviation of coarse-scale pixels; drives sampler defaults.
    pub coarse_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub depth: usize,
    /// Detail scale records, finest first.
    pub details: Vec<ScaleRecord>,
    pub coarse: ScaleRecord,
    pub metadata: TrainMeta,
}

impl ModelFile {
    pub fn from_model(model: &MultiscaleModel, metadata: TrainMeta) -> Self {
        ModelFile {
            format_version: FORMAT_VERSION,
            depth: model.depth(),
            details: model.details.iter().map(ScaleRecord::from_model).collect(),
            coarse: ScaleRecord::from_model(&model.coarse),
            metadata,
        }
    }

    pub fn to_model(&self) -> Result<MultiscaleModel> {
        if self.format_version != FORMAT_VERSION {
            bail!("unsupported model format version {}", self.format_version);
        }
        if self.details.len() != self.depth {
            bail!(
                "model declares depth {} but carries {} detail scales",
                self.depth,
                self.details.len()
            );
        }
        let details: Result<Vec<ScaleModel>> =
            self.details.iter().map(|r| r.to_model()).collect();
        let model = MultiscaleModel { coarse: self.coarse.to_model()?, details: details? };
        // Mask/parameter dimension agreement.
        model.coarse.mask().map_err(anyhow::Error::from)?;
        for d in &model.details {
            d.mask().map_err(anyhow::Error::from)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn model_file_roundtrip_is_bit_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let model = MultiscaleModel {
            coarse: ScaleModel {
                params: McgsmParams::random(2, 3, 24, 1, 0.4, &mut rng),
                mask_spec: MaskSpec::Causal { rows_above: 3, row_width: 7 },
            },
            details: vec![ScaleModel {
                params: McgsmParams::random(2, 3, 21, 3, 0.4, &mut rng),
                mask_spec: MaskSpec::Superpixel { window: 3 },
            }],
        };
        let file = ModelFile::from_model(&model, TrainMeta::default());
        let dir = std::env::temp_dir().join("mcgsm_modelfile_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        file.save(&path).unwrap();
        let loaded = ModelFile::load(&path).unwrap().to_model().unwrap();

        let bits = |p: &McgsmParams| -> Vec<u64> {
            p.pack().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&model.coarse.params), bits(&loaded.coarse.params));
        assert_eq!(bits(&model.details[0].params), bits(&loaded.details[0].params));
        assert_eq!(
            model.coarse.params.input_mean.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            loaded.coarse.params.input_mean.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(model.details[0].mask_spec, loaded.details[0].mask_spec);
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let mut rng = ChaCha12Rng::seed_from_u64(34);
        let model = MultiscaleModel {
            coarse: ScaleModel {
                params: McgsmParams::random(1, 1, 4, 1, 0.3, &mut rng),
                mask_spec: MaskSpec::Causal { rows_above: 1, row_width: 3 },
            },
            details: vec![],
        };
        let mut file = ModelFile::from_model(&model, TrainMeta::default());
        file.coarse.params.d_in = 5;
        assert!(file.to_model().is_err());
    }
}
