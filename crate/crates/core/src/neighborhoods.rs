//! Conditioning masks and training-pair extraction.
//!
//! A mask lists the (row, column, channel) offsets a prediction may condition
//! on. Channels marked strictly causal only admit offsets that precede the
//! predicted position in raster order; the low-resolution channel of the
//! superpixel representation is exempt because it is fully known before any
//! detail is predicted.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{check_same_dims, Image};

/// One conditioning offset: (row delta, column delta, channel index).
pub type Offset = (i64, i64, usize);

/// Which positions condition a prediction, and which channels are predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodMask {
    /// Input offsets, sorted by (channel, row, column).
    pub offsets: Vec<Offset>,
    /// Channels predicted at offset (0, 0).
    pub output_channels: Vec<usize>,
    /// Channels whose offsets must precede (0, 0) in raster order.
    pub strictly_causal_channels: BTreeSet<usize>,
    /// Total number of channels the mask addresses.
    pub n_channels: usize,
}

/// Constructor arguments for the two supported masks; serializable descriptor
/// used by model files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    /// Upper rows plus the left part of the center row of a single-channel image.
    Causal { rows_above: usize, row_width: usize },
    /// Full low-resolution window plus causal detail positions of a superpixel image.
    Superpixel { window: usize },
}

impl MaskSpec {
    pub fn build(&self) -> Result<NeighborhoodMask> {
        match *self {
            MaskSpec::Causal { rows_above, row_width } => causal_mask(rows_above, row_width),
            MaskSpec::Superpixel { window } => superpixel_mask(window),
        }
    }
}

impl NeighborhoodMask {
    /// Number of input dimensions (offset count).
    pub fn d_in(&self) -> usize {
        self.offsets.len()
    }

    /// Number of output dimensions (predicted channels).
    pub fn d_out(&self) -> usize {
        self.output_channels.len()
    }

    /// Row/column reach of the offsets: (min_drow, max_drow, min_dcol, max_dcol).
    /// All zero for an empty mask.
    pub fn bounding_box(&self) -> (i64, i64, i64, i64) {
        let mut bb = (0i64, 0i64, 0i64, 0i64);
        for &(dr, dc, _) in &self.offsets {
            bb.0 = bb.0.min(dr);
            bb.1 = bb.1.max(dr);
            bb.2 = bb.2.min(dc);
            bb.3 = bb.3.max(dc);
        }
        bb
    }

    /// Check the causality and uniqueness invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &(dr, dc, ch) in &self.offsets {
            if ch >= self.n_channels {
                return Err(Error::InvalidParameter(format!(
                    "offset channel {ch} out of range (n_channels = {})",
                    self.n_channels
                )));
            }
            if !seen.insert((dr, dc, ch)) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate offset ({dr}, {dc}, {ch})"
                )));
            }
            if self.strictly_causal_channels.contains(&ch) {
                let causal = dr < 0 || (dr == 0 && dc < 0);
                if !causal {
                    return Err(Error::InvalidParameter(format!(
                        "offset ({dr}, {dc}) on strictly causal channel {ch} is not causal"
                    )));
                }
            }
        }
        for &ch in &self.output_channels {
            if ch >= self.n_channels {
                return Err(Error::InvalidParameter(format!(
                    "output channel {ch} out of range"
                )));
            }
        }
        Ok(())
    }
}

fn sort_offsets(offsets: &mut [Offset]) {
    offsets.sort_by_key(|&(dr, dc, ch)| (ch, dr, dc));
}

/// Causal neighborhood over a single-channel image: `rows_above` full rows of
/// width `row_width` above the predicted pixel, plus the pixels left of it in
/// the same row.
pub fn causal_mask(rows_above: usize, row_width: usize) -> Result<NeighborhoodMask> {
    if row_width.is_multiple_of(2) || row_width == 0 {
        return Err(Error::InvalidParameter(format!(
            "row_width must be odd and >= 1, got {row_width}"
        )));
    }
    let half = (row_width as i64 - 1) / 2;
    let mut offsets = Vec::new();
    for dr in -(rows_above as i64)..0 {
        for dc in -half..=half {
            offsets.push((dr, dc, 0));
        }
    }
    for dc in -half..0 {
        offsets.push((0, dc, 0));
    }
    sort_offsets(&mut offsets);
    let mask = NeighborhoodMask {
        offsets,
        output_channels: vec![0],
        strictly_causal_channels: BTreeSet::from([0]),
        n_channels: 1,
    };
    mask.validate()?;
    Ok(mask)
}

/// Mixed superpixel neighborhood over a 4-channel image: the full
/// `window` x `window` grid of the low-resolution channel 0 (the
/// low-resolution image is given in its entirety before details are
/// predicted, so non-causal positions are admissible there), plus the
/// strictly causal window positions of the three detail channels.
pub fn superpixel_mask(window: usize) -> Result<NeighborhoodMask> {
    if window.is_multiple_of(2) || window == 0 {
        return Err(Error::InvalidParameter(format!(
            "window must be odd and >= 1, got {window}"
        )));
    }
    let half = (window as i64 - 1) / 2;
    let mut offsets = Vec::new();
    for dr in -half..=half {
        for dc in -half..=half {
            offsets.push((dr, dc, 0));
            if dr < 0 || (dr == 0 && dc < 0) {
                for ch in 1..4 {
                    offsets.push((dr, dc, ch));
                }
            }
        }
    }
    sort_offsets(&mut offsets);
    let mask = NeighborhoodMask {
        offsets,
        output_channels: vec![1, 2, 3],
        strictly_causal_channels: BTreeSet::from([1, 2, 3]),
        n_channels: 4,
    };
    mask.validate()?;
    Ok(mask)
}

/// Where a dataset came from; carried along for reporting.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceInfo {
    /// Pyramid scale the pairs were extracted at (0 = finest).
    pub scale: usize,
    /// Human-readable mask identity.
    pub mask: String,
}

/// Centered input/output training pairs extracted under a mask.
#[derive(Debug, Clone)]
pub struct PatchDataset {
    /// N x D_in inputs, column means subtracted.
    pub inputs: Array2<f64>,
    /// N x D_out outputs, column means subtracted.
    pub outputs: Array2<f64>,
    /// Subtracted input column means.
    pub input_mean: Array1<f64>,
    /// Subtracted output column means.
    pub output_mean: Array1<f64>,
    pub source: SourceInfo,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_in(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.outputs.ncols()
    }

    /// Rows as joint (x, y) vectors, still centered.
    pub fn joined(&self) -> Array2<f64> {
        let n = self.len();
        let d = self.d_in() + self.d_out();
        let mut out = Array2::zeros((n, d));
        out.slice_mut(ndarray::s![.., ..self.d_in()]).assign(&self.inputs);
        out.slice_mut(ndarray::s![.., self.d_in()..]).assign(&self.outputs);
        out
    }

    /// Deterministic split into (kept, held_out) with `held_out` receiving
    /// `frac` of the rows, selected by a seeded shuffle.
    pub fn split(&self, frac: f64, rng: &mut impl Rng) -> (PatchDataset, PatchDataset) {
        let n = self.len();
        let n_held = ((n as f64) * frac).floor() as usize;
        let picks = rand::seq::index::sample(rng, n, n_held);
        let mut held = vec![false; n];
        for i in picks {
            held[i] = true;
        }
        let gather = |take_held: bool| -> PatchDataset {
            let rows: Vec<usize> = (0..n).filter(|&i| held[i] == take_held).collect();
            let mut inputs = Array2::zeros((rows.len(), self.d_in()));
            let mut outputs = Array2::zeros((rows.len(), self.d_out()));
            for (k, &i) in rows.iter().enumerate() {
                inputs.row_mut(k).assign(&self.inputs.row(i));
                outputs.row_mut(k).assign(&self.outputs.row(i));
            }
            PatchDataset {
                inputs,
                outputs,
                input_mean: self.input_mean.clone(),
                output_mean: self.output_mean.clone(),
                source: self.source.clone(),
            }
        };
        (gather(false), gather(true))
    }
}

/// Extract up to `max_samples` (input, output) pairs from a multi-channel
/// image under `mask`. Centers whose offsets would leave the image are
/// skipped; if more centers remain than requested, a uniform subsample
/// without replacement is drawn. Column means are subtracted and recorded.
pub fn extract_pairs(
    channels: &[Image],
    mask: &NeighborhoodMask,
    max_samples: usize,
    rng: &mut impl Rng,
) -> Result<PatchDataset> {
    if channels.len() != mask.n_channels {
        return Err(Error::Shape(format!(
            "mask addresses {} channels but image has {}",
            mask.n_channels,
            channels.len()
        )));
    }
    check_same_dims(channels)?;
    if max_samples == 0 {
        return Err(Error::InvalidParameter("max_samples must be >= 1".into()));
    }
    let (h, w) = (channels[0].nrows() as i64, channels[0].ncols() as i64);
    let (r_lo_off, r_hi_off, c_lo_off, c_hi_off) = mask.bounding_box();
    let r_lo = (-r_lo_off).max(0);
    let r_hi = h - 1 - r_hi_off.max(0);
    let c_lo = (-c_lo_off).max(0);
    let c_hi = w - 1 - c_hi_off.max(0);
    if r_hi < r_lo || c_hi < c_lo {
        return Err(Error::Geometry(format!(
            "image {h}x{w} smaller than mask bounding box"
        )));
    }
    let rows = (r_hi - r_lo + 1) as usize;
    let cols = (c_hi - c_lo + 1) as usize;
    let valid = rows * cols;

    let centers: Vec<(i64, i64)> = if valid > max_samples {
        let mut picks: Vec<usize> = rand::seq::index::sample(rng, valid, max_samples).into_vec();
        picks.sort_unstable();
        picks
            .into_iter()
            .map(|k| (r_lo + (k / cols) as i64, c_lo + (k % cols) as i64))
            .collect()
    } else {
        (0..valid)
            .map(|k| (r_lo + (k / cols) as i64, c_lo + (k % cols) as i64))
            .collect()
    };

    let n = centers.len();
    let (d_in, d_out) = (mask.d_in(), mask.d_out());
    let mut inputs = Array2::<f64>::zeros((n, d_in));
    let mut outputs = Array2::<f64>::zeros((n, d_out));
    for (row, &(r, c)) in centers.iter().enumerate() {
        for (j, &(dr, dc, ch)) in mask.offsets.iter().enumerate() {
            inputs[[row, j]] = channels[ch][[(r + dr) as usize, (c + dc) as usize]];
        }
        for (j, &ch) in mask.output_channels.iter().enumerate() {
            outputs[[row, j]] = channels[ch][[r as usize, c as usize]];
        }
    }

    let input_mean = column_means(&inputs);
    let output_mean = column_means(&outputs);
    subtract_columns(&mut inputs, &input_mean);
    subtract_columns(&mut outputs, &output_mean);

    Ok(PatchDataset {
        inputs,
        outputs,
        input_mean,
        output_mean,
        source: SourceInfo::default(),
    })
}

fn column_means(m: &Array2<f64>) -> Array1<f64> {
    if m.nrows() == 0 {
        return Array1::zeros(m.ncols());
    }
    m.sum_axis(ndarray::Axis(0)) / m.nrows() as f64
}

fn subtract_columns(m: &mut Array2<f64>, means: &Array1<f64>) {
    for mut row in m.rows_mut() {
        row -= means;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn causal_mask_sizes() {
        // Fig.-1-style upper half of a 7x7 neighborhood: 24 pixels.
        assert_eq!(causal_mask(3, 7).unwrap().d_in(), 24);
        // Empty neighborhood: pixels modeled independently.
        assert_eq!(causal_mask(0, 1).unwrap().d_in(), 0);
        let m = causal_mask(1, 3).unwrap();
        assert_eq!(m.offsets, vec![(-1, -1, 0), (-1, 0, 0), (-1, 1, 0), (0, -1, 0)]);
    }

    #[test]
    fn causal_mask_rejects_even_width() {
        assert!(causal_mask(3, 6).is_err());
        assert!(causal_mask(3, 0).is_err());
    }

    #[test]
    fn superpixel_mask_sizes() {
        // 9 low-res positions + 4 causal positions x 3 detail channels.
        let m = superpixel_mask(3).unwrap();
        assert_eq!(m.d_in(), 21);
        assert_eq!(m.d_out(), 3);
        let m1 = superpixel_mask(1).unwrap();
        assert_eq!(m1.d_in(), 1);
        assert_eq!(m1.d_out(), 3);
        assert!(superpixel_mask(2).is_err());
    }

    #[test]
    fn superpixel_detail_channels_are_causal() {
        let m = superpixel_mask(3).unwrap();
        m.validate().unwrap();
        for &(dr, dc, ch) in &m.offsets {
            if ch > 0 {
                assert!(dr < 0 || (dr == 0 && dc < 0));
            }
        }
    }

    #[test]
    fn extract_counts_and_columns() {
        // 10x10 image, causal_mask(3,7): valid centers form a 7x4 grid
        // (rows 3..=9, cols 3..=6).
        let img = Array2::from_shape_fn((10, 10), |(r, c)| (r * 10 + c) as f64);
        let mask = causal_mask(3, 7).unwrap();
        let ds = extract_pairs(std::slice::from_ref(&img), &mask, 4, &mut rng(7)).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.d_in(), 24);
        assert_eq!(ds.d_out(), 1);
        // Exhaustion: more requested than valid positions.
        let ds_all = extract_pairs(&[img], &mask, 10_000, &mut rng(7)).unwrap();
        assert_eq!(ds_all.len(), 7 * 4);
    }

    #[test]
    fn extract_constant_image_centers_to_zero() {
        let img = Array2::from_elem((12, 12), 3.25);
        let mask = causal_mask(2, 5).unwrap();
        let ds = extract_pairs(&[img], &mask, 50, &mut rng(1)).unwrap();
        assert!(ds.inputs.iter().all(|&v| v == 0.0));
        assert!(ds.outputs.iter().all(|&v| v == 0.0));
        assert!(ds.input_mean.iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn extract_is_deterministic() {
        let img = Array2::from_shape_fn((16, 16), |(r, c)| ((r * 31 + c * 17) % 13) as f64);
        let mask = causal_mask(1, 3).unwrap();
        let a = extract_pairs(std::slice::from_ref(&img), &mask, 20, &mut rng(42)).unwrap();
        let b = extract_pairs(&[img], &mask, 20, &mut rng(42)).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.outputs, b.outputs);
    }

    #[test]
    fn extract_rejects_small_images() {
        let img = Array2::zeros((3, 3));
        let mask = causal_mask(3, 7).unwrap();
        assert!(extract_pairs(&[img], &mask, 10, &mut rng(0)).is_err());
    }

    #[test]
    fn stored_means_match_presubtraction_columns() {
        let img = Array2::from_shape_fn((20, 20), |(r, c)| ((r * 7 + c * 3) % 11) as f64 - 5.0);
        let mask = causal_mask(2, 3).unwrap();
        let ds = extract_pairs(&[img], &mask, 200, &mut rng(3)).unwrap();
        // Re-add the means; every column must then average to the stored mean.
        for j in 0..ds.d_in() {
            let col = ds.inputs.column(j);
            let mean_centered: f64 = col.sum() / col.len() as f64;
            assert!(mean_centered.abs() < 1e-12);
        }
    }

    #[test]
    fn causality_by_position_arithmetic() {
        // Raster order: every strictly causal input coordinate precedes the center.
        for mask in [causal_mask(3, 7).unwrap(), superpixel_mask(3).unwrap()] {
            for &(dr, dc, ch) in &mask.offsets {
                if mask.strictly_causal_channels.contains(&ch) {
                    assert!((dr, dc) < (0i64, 0i64) || (dr == 0 && dc < 0));
                }
            }
        }
    }

    #[test]
    fn split_partitions_rows() {
        let img = Array2::from_shape_fn((20, 20), |(r, c)| (r as f64).sin() + (c as f64).cos());
        let mask = causal_mask(1, 3).unwrap();
        let ds = extract_pairs(&[img], &mask, 300, &mut rng(5)).unwrap();
        let (tr, va) = ds.split(0.25, &mut rng(9));
        assert_eq!(tr.len() + va.len(), ds.len());
        assert_eq!(va.len(), (ds.len() as f64 * 0.25).floor() as usize);
    }
}
