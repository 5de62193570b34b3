//! Causal raster-scan sampling.
//!
//! The coarsest scale is filled pixel by pixel in raster order; finer scales
//! sample the three detail channels of each superpixel conditioned on the
//! full low-resolution image and the causal detail neighbors. Unseen
//! conditioning positions carry small white noise.
//!
//! Every position draws from its own counter-derived random stream, so a
//! sample is reproducible per position: growing the target height extends a
//! sample instead of reshuffling it, which also makes causality directly
//! testable.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mcgsm::McgsmParams;
use crate::model::MultiscaleModel;
use crate::neighborhoods::NeighborhoodMask;
use crate::pyramid::{haar_inverse, SuperpixelImage};

/// Sampling configuration for one scale.
#[derive(Debug, Clone, Copy)]
pub struct SampleConfig {
    /// Target height of the returned image.
    pub height: usize,
    /// Target width of the returned image.
    pub width: usize,
    /// Burn-in margin in rows/columns, discarded by the final crop. The
    /// effective margin is at least the mask reach.
    pub burn_in: usize,
    /// Standard deviation of the boundary white noise.
    pub boundary_sigma: f64,
    pub seed: u64,
}

/// Default burn-in for a mask: eight times its vertical reach.
pub fn default_burn_in(mask: &NeighborhoodMask) -> usize {
    let (r_lo, _, _, _) = mask.bounding_box();
    (8 * (-r_lo).max(1)) as usize
}

fn position_rng(seed: u64, row: usize, col: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(((row as u64) << 32) | col as u64);
    rng
}

/// Raster-scan sample at the coarsest scale; returns the bottom-right crop of
/// the burn-in canvas.
pub fn sample_coarse(
    params: &McgsmParams,
    mask: &NeighborhoodMask,
    cfg: &SampleConfig,
) -> Result<Image> {
    let canvas = sample_coarse_canvas(params, mask, cfg)?;
    Ok(crop_canvas(&canvas, mask, cfg))
}

/// The full pre-crop canvas; exposed so causality can be tested directly.
pub fn sample_coarse_canvas(
    params: &McgsmParams,
    mask: &NeighborhoodMask,
    cfg: &SampleConfig,
) -> Result<Image> {
    scan_canvas(params, mask, cfg, None)
}

/// Like [`sample_coarse_canvas`] but with the random stream at one position
/// replaced, for counterfactual-replay tests.
pub fn sample_coarse_canvas_with_flip(
    params: &McgsmParams,
    mask: &NeighborhoodMask,
    cfg: &SampleConfig,
    flip: (usize, usize),
) -> Result<Image> {
    scan_canvas(params, mask, cfg, Some(flip))
}

fn effective_margin(mask: &NeighborhoodMask, burn_in: usize) -> (usize, usize) {
    let (r_lo, _, c_lo, c_hi) = mask.bounding_box();
    let reach = (-r_lo).max(-c_lo).max(c_hi).max(0) as usize;
    let right = c_hi.max(0) as usize;
    (burn_in.max(reach), right)
}

fn crop_canvas(canvas: &Image, mask: &NeighborhoodMask, cfg: &SampleConfig) -> Image {
    let (margin, right) = effective_margin(mask, cfg.burn_in);
    let (hh, ww) = canvas.dim();
    let r0 = hh - cfg.height;
    let c0 = ww - right - cfg.width;
    // margin >= right reach, so the crop stays inside the scanned region.
    debug_assert!(c0 >= margin - right || margin == 0);
    canvas
        .slice(ndarray::s![r0..r0 + cfg.height, c0..c0 + cfg.width])
        .to_owned()
}

fn scan_canvas(
    params: &McgsmParams,
    mask: &NeighborhoodMask,
    cfg: &SampleConfig,
    flip: Option<(usize, usize)>,
) -> Result<Image> {
    if mask.n_channels != 1 {
        return Err(Error::Shape("coarse sampling expects a single-channel mask".into()));
    }
    if mask.d_in() != params.d_in || params.d_out != 1 {
        return Err(Error::Shape(format!(
            "mask {} -> 1 vs model {} -> {}",
            mask.d_in(),
            params.d_in,
            params.d_out
        )));
    }
    if cfg.height == 0 || cfg.width == 0 {
        return Err(Error::Geometry("empty sample size".into()));
    }
    let (margin, right) = effective_margin(mask, cfg.burn_in);
    let hh = cfg.height + margin;
    let ww = cfg.width + margin + right;
    let mut canvas = Array2::zeros((hh, ww));

    let mut x = Array1::zeros(params.d_in);
    for r in 0..hh {
        for c in 0..ww {
            let mut rng = position_rng(cfg.seed, r, c);
            if let Some((fr, fc)) = flip {
                if (fr, fc) == (r, c) {
                    rng = position_rng(cfg.seed ^ 0x5eed_f11b, r, c);
                }
            }
            let scanned = r >= margin && c >= margin && c < ww - right;
            if !scanned {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                canvas[[r, c]] = cfg.boundary_sigma * z;
                continue;
            }
            for (j, &(dr, dc, _)) in mask.offsets.iter().enumerate() {
                let rr = (r as i64 + dr) as usize;
                let cc = (c as i64 + dc) as usize;
                x[j] = canvas[[rr, cc]] - params.input_mean[j];
            }
            let y = params.conditional_sample(&x.view(), &mut rng)?;
            canvas[[r, c]] = y[0] + params.output_mean[0];
        }
    }
    Ok(canvas)
}

/// Sample the three detail channels of a scale conditioned on a given
/// low-resolution image. Out-of-image detail neighbors take boundary noise;
/// out-of-image low-resolution positions read the mirrored image.
pub fn sample_details(
    params: &McgsmParams,
    mask: &NeighborhoodMask,
    lowres: &Image,
    cfg: &SampleConfig,
) -> Result<SuperpixelImage> {
    if mask.n_channels != 4 || mask.d_out() != 3 {
        return Err(Error::Shape("detail sampling expects a superpixel mask".into()));
    }
    if mask.d_in() != params.d_in || params.d_out != 3 {
        return Err(Error::Shape(format!(
            "mask {} -> 3 vs model {} -> {}",
            mask.d_in(),
            params.d_in,
            params.d_out
        )));
    }
    let (h, w) = lowres.dim();
    let (r_lo, _, c_lo, c_hi) = mask.bounding_box();
    let top = (-r_lo).max(0) as usize;
    let left = (-c_lo).max(0) as usize;
    let right = c_hi.max(0) as usize;

    // Detail canvases carry a noise margin so causal reads never leave them.
    let (ch, cw) = (h + top, w + left + right);
    let mut details = [
        Array2::zeros((ch, cw)),
        Array2::zeros((ch, cw)),
        Array2::zeros((ch, cw)),
    ];
    for r in 0..ch {
        for c in 0..cw {
            let mut rng = position_rng(cfg.seed, r, c);
            let inside = r >= top && c >= left && c < left + w;
            if !inside {
                for d in details.iter_mut() {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    d[[r, c]] = cfg.boundary_sigma * z;
                }
            }
        }
    }

    let reflect = |i: i64, n: usize| -> usize {
        if i < 0 {
            (-i - 1) as usize % n
        } else if i as usize >= n {
            n - 1 - ((i as usize - n) % n)
        } else {
            i as usize
        }
    };

    let mut x = Array1::zeros(params.d_in);
    for r in 0..h {
        for c in 0..w {
            let mut rng = position_rng(cfg.seed, r + top, c + left);
            for (j, &(dr, dc, chan)) in mask.offsets.iter().enumerate() {
                let raw = if chan == 0 {
                    let rr = reflect(r as i64 + dr, h);
                    let cc = reflect(c as i64 + dc, w);
                    lowres[[rr, cc]]
                } else {
                    let rr = (r + top) as i64 + dr;
                    let cc = (c + left) as i64 + dc;
                    details[chan - 1][[rr as usize, cc as usize]]
                };
                x[j] = raw - params.input_mean[j];
            }
            let y = params.conditional_sample(&x.view(), &mut rng)?;
            for (k, &chan) in mask.output_channels.iter().enumerate() {
                details[chan - 1][[r + top, c + left]] = y[k] + params.output_mean[k];
            }
        }
    }

    let crop = |d: &Array2<f64>| d.slice(ndarray::s![top.., left..left + w]).to_owned();
    Ok(SuperpixelImage {
        low: lowres.clone(),
        details: [crop(&details[0]), crop(&details[1]), crop(&details[2])],
    })
}

/// Sample a full image: coarse raster scan at the top of the pyramid, then
/// conditional detail sampling and inverse transforms down to the target size.
pub fn synthesize(model: &MultiscaleModel, cfg: &SampleConfig) -> Result<Image> {
    let depth = model.depth();
    let step = 1usize << depth;
    if !cfg.height.is_multiple_of(step) || !cfg.width.is_multiple_of(step) {
        return Err(Error::Geometry(format!(
            "target {}x{} not divisible by 2^{depth}",
            cfg.height, cfg.width
        )));
    }
    let mut seed_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let coarse_cfg = SampleConfig {
        height: cfg.height / step,
        width: cfg.width / step,
        seed: seed_rng.random(),
        ..*cfg
    };
    let coarse_mask = model.coarse.mask()?;
    let mut image = sample_coarse(&model.coarse.params, &coarse_mask, &coarse_cfg)?;

    for level in model.details.iter().rev() {
        let mask = level.mask()?;
        let level_cfg = SampleConfig { seed: seed_rng.random(), ..*cfg };
        let sp = sample_details(&level.params, &mask, &image, &level_cfg)?;
        image = haar_inverse(&sp);
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScaleModel;
    use crate::neighborhoods::{causal_mask, superpixel_mask, MaskSpec};
    
    use ndarray::arr2;

    fn empty_mask_model(mean: f64) -> (McgsmParams, NeighborhoodMask) {
        let mut p = McgsmParams::identity(1, 1, 0, 1);
        p.output_mean[0] = mean;
        (p, causal_mask(0, 1).unwrap())
    }

    #[test]
    fn iid_model_statistics() {
        let (p, mask) = empty_mask_model(0.7);
        let cfg = SampleConfig { height: 256, width: 256, burn_in: 0, boundary_sigma: 0.1, seed: 5 };
        let img = sample_coarse(&p, &mask, &cfg).unwrap();
        assert_eq!(img.dim(), (256, 256));
        let n = 256.0 * 256.0;
        let mean = img.sum() / n;
        let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let se = (1.0 / n).sqrt();
        assert!((mean - 0.7).abs() < 4.0 * se, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn ar1_autocorrelation() {
        // Single-component model y = 0.9 left + e reproduces the AR(1)
        // lag-1 autocorrelation.
        let mut p = McgsmParams::identity(1, 1, 1, 1);
        p.predictors[0] = arr2(&[[0.9]]);
        let mask = causal_mask(0, 3).unwrap();
        assert_eq!(mask.offsets, vec![(0, -1, 0)]);
        let sigma_x = (1.0f64 / (1.0 - 0.81)).sqrt();
        let cfg = SampleConfig {
            height: 1000,
            width: 1000,
            burn_in: 32,
            boundary_sigma: sigma_x,
            seed: 2,
        };
        let img = sample_coarse(&p, &mask, &cfg).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for r in 0..1000 {
            for c in 0..999 {
                num += img[[r, c]] * img[[r, c + 1]];
            }
            for c in 0..1000 {
                den += img[[r, c]] * img[[r, c]];
            }
        }
        let rho = (num / 999000.0) / (den / 1000000.0);
        assert!((rho - 0.9).abs() < 0.02, "lag-1 autocorrelation {rho}");
    }

    #[test]
    fn prefix_property_across_heights() {
        let mut p = McgsmParams::identity(1, 1, 4, 1);
        p.predictors[0] = arr2(&[[0.2, 0.3, 0.1, 0.25]]);
        let mask = causal_mask(1, 3).unwrap();
        let mk = |h: usize| SampleConfig {
            height: h,
            width: 40,
            burn_in: 8,
            boundary_sigma: 0.1,
            seed: 33,
        };
        let small = sample_coarse_canvas(&p, &mask, &mk(24)).unwrap();
        let large = sample_coarse_canvas(&p, &mask, &mk(48)).unwrap();
        let (hs, ws) = small.dim();
        assert_eq!(large.dim().1, ws);
        for r in 0..hs {
            for c in 0..ws {
                assert_eq!(small[[r, c]], large[[r, c]], "mismatch at ({r}, {c})");
            }
        }
    }

    #[test]
    fn counterfactual_replay_respects_causality() {
        let mut p = McgsmParams::identity(1, 1, 4, 1);
        p.predictors[0] = arr2(&[[0.3, 0.2, 0.2, 0.2]]);
        let mask = causal_mask(1, 3).unwrap();
        let cfg = SampleConfig { height: 30, width: 30, burn_in: 4, boundary_sigma: 0.1, seed: 9 };
        let base = sample_coarse_canvas(&p, &mask, &cfg).unwrap();
        let (hh, ww) = base.dim();
        let flip = (hh / 2, ww / 2);
        let flipped = sample_coarse_canvas_with_flip(&p, &mask, &cfg, flip).unwrap();
        assert_eq!(flipped.dim(), base.dim());
        let mut changed_at_flip = false;
        for r in 0..hh {
            for c in 0..ww {
                let before_flip = (r, c) < flip;
                if before_flip {
                    assert_eq!(base[[r, c]], flipped[[r, c]], "earlier pixel ({r},{c}) changed");
                }
                if (r, c) == flip && base[[r, c]] != flipped[[r, c]] {
                    changed_at_flip = true;
                }
            }
        }
        assert!(changed_at_flip, "flip had no effect at the flipped position");
    }

    #[test]
    fn degenerate_detail_model_upsamples_lowres() {
        // Near-deterministic experts with zero predictor: details vanish and
        // the collapse equals the Haar upsampling of the given low-res image.
        let mut p = McgsmParams::identity(1, 1, 21, 3);
        p.chol_m = vec![Array2::eye(3) * 1e4];
        let mask = superpixel_mask(3).unwrap();
        let lowres = Array2::from_shape_fn((8, 8), |(r, c)| (r as f64 * 0.3) - (c as f64 * 0.1));
        let cfg = SampleConfig { height: 0, width: 0, burn_in: 0, boundary_sigma: 0.01, seed: 4 };
        let sp = sample_details(&p, &mask, &lowres, &cfg).unwrap();
        for d in &sp.details {
            assert!(d.iter().all(|v| v.abs() < 1e-2));
        }
        let img = haar_inverse(&sp);
        for r in 0..16 {
            for c in 0..16 {
                assert!((img[[r, c]] - lowres[[r / 2, c / 2]] / 2.0).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn detail_statistics_are_stationary() {
        let p = McgsmParams::identity(1, 1, 21, 3);
        let mask = superpixel_mask(3).unwrap();
        let lowres = Array2::from_elem((128, 128), 1.0);
        let cfg = SampleConfig { height: 0, width: 0, burn_in: 0, boundary_sigma: 0.1, seed: 11 };
        let sp = sample_details(&p, &mask, &lowres, &cfg).unwrap();
        // Per-quadrant variances of the first detail channel agree within 10%.
        let d = &sp.details[0];
        let quad_var = |r0: usize, c0: usize| {
            let v = d.slice(ndarray::s![r0..r0 + 64, c0..c0 + 64]);
            let m = v.sum() / 4096.0;
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4096.0
        };
        let vars = [quad_var(0, 0), quad_var(0, 64), quad_var(64, 0), quad_var(64, 64)];
        let mean_var = vars.iter().sum::<f64>() / 4.0;
        for v in vars {
            assert!((v - mean_var).abs() / mean_var < 0.10, "quadrant variances {vars:?}");
        }
    }

    #[test]
    fn detail_sampling_is_deterministic() {
        let p = McgsmParams::identity(1, 1, 21, 3);
        let mask = superpixel_mask(3).unwrap();
        let lowres = Array2::from_elem((16, 16), 0.5);
        let cfg = SampleConfig { height: 0, width: 0, burn_in: 0, boundary_sigma: 0.1, seed: 21 };
        let a = sample_details(&p, &mask, &lowres, &cfg).unwrap();
        let b = sample_details(&p, &mask, &lowres, &cfg).unwrap();
        assert_eq!(a.details[0], b.details[0]);
        assert_eq!(a.details[2], b.details[2]);
    }

    #[test]
    fn synthesize_dimensions_and_zero_depth() {
        let (p, _) = empty_mask_model(0.0);
        let coarse = ScaleModel { params: p.clone(), mask_spec: MaskSpec::Causal { rows_above: 0, row_width: 1 } };
        let model = MultiscaleModel { coarse: coarse.clone(), details: vec![] };
        let cfg = SampleConfig { height: 32, width: 48, burn_in: 4, boundary_sigma: 0.1, seed: 3 };
        let img = synthesize(&model, &cfg).unwrap();
        assert_eq!(img.dim(), (32, 48));

        let detail = ScaleModel {
            params: McgsmParams::identity(1, 1, 21, 3),
            mask_spec: MaskSpec::Superpixel { window: 3 },
        };
        let model2 = MultiscaleModel { coarse, details: vec![detail.clone(), detail] };
        let img2 = synthesize(&model2, &cfg).unwrap();
        assert_eq!(img2.dim(), (32, 48));
        assert!(synthesize(&model2, &SampleConfig { height: 30, ..cfg }).is_err());
    }

    #[test]
    fn crop_statistics_insensitive_to_burn_in() {
        let mut p = McgsmParams::identity(1, 1, 1, 1);
        p.predictors[0] = arr2(&[[0.5]]);
        let mask = causal_mask(0, 3).unwrap();
        let stats = |burn_in: usize| {
            let cfg = SampleConfig {
                height: 400,
                width: 400,
                burn_in,
                boundary_sigma: 1.15,
                seed: 17,
            };
            let img = sample_coarse(&p, &mask, &cfg).unwrap();
            let n = 160000.0;
            let mean = img.sum() / n;
            let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var)
        };
        let (m1, v1) = stats(8);
        let (m2, v2) = stats(40);
        assert!((m1 - m2).abs() < 0.02, "means {m1} vs {m2}");
        assert!((v1 - v2).abs() / v1 < 0.05, "variances {v1} vs {v2}");
    }
}
