//! Cross-entropy-rate, marginal-entropy, and cross-multi-information-rate
//! estimation.
//!
//! For a stationary causal model the entropy rate reduces to a single
//! conditional (cross-)entropy, and the multi-information rate to one
//! marginal entropy minus that conditional entropy. With the superpixel
//! transform, rates at successive scales combine with weights 4^-m because
//! the representation has four channels per superpixel. Everything in this
//! module reports bits; the underlying likelihoods are nats.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{crop_to_multiple, Image};
use crate::mcgsm::McgsmParams;
use crate::model::MultiscaleModel;
use crate::neighborhoods::{extract_pairs, NeighborhoodMask, PatchDataset};
use crate::pyramid::build_pyramid;

const LN_2: f64 = std::f64::consts::LN_2;

/// Conditional cross-entropy of held-out pairs under a model, in bits per
/// output vector, with the pixelwise standard error.
pub fn conditional_cross_entropy(
    params: &McgsmParams,
    test: &PatchDataset,
) -> Result<(f64, f64)> {
    let adjusted = recenter_for(params, test);
    let lls = params.row_log_likelihoods(&adjusted)?;
    let n = lls.len() as f64;
    let mean = lls.iter().sum::<f64>() / n;
    let var = lls.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((-mean / LN_2, (var / n).sqrt() / LN_2))
}

/// Shift a dataset centered on its own means so that it is centered on the
/// model's means instead.
pub fn recenter_for(params: &McgsmParams, data: &PatchDataset) -> PatchDataset {
    let din = &data.input_mean - &params.input_mean;
    let dout = &data.output_mean - &params.output_mean;
    if din.iter().all(|v| *v == 0.0) && dout.iter().all(|v| *v == 0.0) {
        return data.clone();
    }
    let mut out = data.clone();
    for mut row in out.inputs.rows_mut() {
        row += &din;
    }
    for mut row in out.outputs.rows_mut() {
        row += &dout;
    }
    out.input_mean = params.input_mean.clone();
    out.output_mean = params.output_mean.clone();
    out
}

/// Combine per-scale rates into bits per finest pixel:
/// sum_m 4^-m detail_m + 4^-M coarse. Detail rates are bits per superpixel,
/// ordered fine to coarse.
pub fn combine_rates(coarse_rate: f64, detail_rates: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut weight = 1.0;
    for rate in detail_rates {
        weight *= 0.25;
        total += weight * rate;
    }
    total + weight * coarse_rate
}

/// Gaussian-kernel density estimate on a binned grid, evaluated by FFT
/// convolution. Bandwidth is selected by maximizing held-out log-likelihood
/// over a logarithmic grid, 2-fold cross-fitted.
struct KdeGrid {
    lo: f64,
    step: f64,
    density: Vec<f64>,
}

impl KdeGrid {
    const BINS: usize = 16_384;

    fn log_density(&self, x: f64) -> f64 {
        let pos = (x - self.lo) / self.step;
        let idx = pos.floor();
        let frac = pos - idx;
        let i = (idx.max(0.0) as usize).min(Self::BINS - 2);
        let f = self.density[i] * (1.0 - frac) + self.density[i + 1] * frac;
        f.max(1e-300).ln()
    }
}

fn histogram(samples: &[f64], lo: f64, step: f64) -> Vec<f64> {
    let mut counts = vec![0.0; KdeGrid::BINS];
    for &x in samples {
        let idx = ((x - lo) / step).round() as isize;
        let idx = idx.clamp(0, KdeGrid::BINS as isize - 1) as usize;
        counts[idx] += 1.0;
    }
    counts
}

/// Build the density grid for one bandwidth from bin counts.
fn kde_from_counts(counts: &[f64], n_ref: usize, lo: f64, step: f64, h: f64) -> KdeGrid {
    let len = 2 * KdeGrid::BINS;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(len);
    let ifft = planner.plan_fft_inverse(len);

    let mut a: Vec<Complex<f64>> = counts
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat_n(Complex::new(0.0, 0.0), len - KdeGrid::BINS))
        .collect();
    let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
    let mut k: Vec<Complex<f64>> = (0..len)
        .map(|j| {
            let d = j.min(len - j) as f64 * step;
            Complex::new(norm * (-0.5 * (d / h) * (d / h)).exp(), 0.0)
        })
        .collect();
    fft.process(&mut a);
    fft.process(&mut k);
    for (x, y) in a.iter_mut().zip(k.iter()) {
        *x *= *y;
    }
    ifft.process(&mut a);
    let scale = 1.0 / (len as f64 * n_ref as f64);
    let density = a[..KdeGrid::BINS].iter().map(|c| (c.re * scale).max(0.0)).collect();
    KdeGrid { lo, step, density }
}

fn grid_bounds(samples: &[f64]) -> Result<(f64, f64, f64)> {
    let mut min = f64::MAX;
    let mut max = f64::MIN;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for &x in samples {
        min = min.min(x);
        max = max.max(x);
        sum += x;
        sumsq += x * x;
    }
    let n = samples.len() as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    let std = var.sqrt();
    if std <= 0.0 {
        return Err(Error::Degenerate("constant sample has no differential entropy".into()));
    }
    let pad = 6.5 * std;
    let lo = min - pad;
    let step = (max - min + 2.0 * pad) / (KdeGrid::BINS - 1) as f64;
    Ok((lo, step, std))
}

fn bandwidth_grid(std: f64) -> Vec<f64> {
    let (lo, hi) = (0.01 * std, 1.0 * std);
    (0..20)
        .map(|i| lo * (hi / lo).powf(i as f64 / 19.0))
        .collect()
}

/// Differential entropy of a scalar sample in bits, via Gaussian-kernel
/// density estimation with held-out bandwidth selection (2-fold). The
/// estimate is a cross-entropy, so its bias is upward.
pub fn marginal_entropy(samples: &[f64]) -> Result<f64> {
    let (h_star, lo, step, folds) = select_bandwidth(samples)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (train, eval) in [(&folds.0, &folds.1), (&folds.1, &folds.0)] {
        let counts = histogram(train, lo, step);
        let grid = kde_from_counts(&counts, train.len(), lo, step, h_star);
        for &x in eval.iter() {
            total += grid.log_density(x);
            count += 1;
        }
    }
    Ok(-(total / count as f64) / LN_2)
}

type FoldPair = (Vec<f64>, Vec<f64>);

fn select_bandwidth(samples: &[f64]) -> Result<(f64, f64, f64, FoldPair)> {
    if samples.len() < 10_000 {
        return Err(Error::InvalidParameter(format!(
            "marginal entropy needs at least 10000 samples, got {}",
            samples.len()
        )));
    }
    let (lo, step, std) = grid_bounds(samples)?;
    let half = samples.len() / 2;
    let folds = (samples[..half].to_vec(), samples[half..].to_vec());

    let mut best = (f64::NEG_INFINITY, 0.0);
    for h in bandwidth_grid(std) {
        let mut ll = 0.0;
        for (train, eval) in [(&folds.0, &folds.1), (&folds.1, &folds.0)] {
            let counts = histogram(train, lo, step);
            let grid = kde_from_counts(&counts, train.len(), lo, step, h);
            for &x in eval.iter() {
                ll += grid.log_density(x);
            }
        }
        if ll > best.0 {
            best = (ll, h);
        }
    }
    Ok((best.1, lo, step, folds))
}

/// Direct raster-walk evaluation of the full multiscale likelihood of one
/// image: the coarse model over the top image plus each level's conditional
/// likelihood of its detail channels, every in-bounds position included.
#[derive(Debug, Clone)]
pub struct ImageLogLikelihood {
    /// Per detail level (nats, positions evaluated), fine to coarse.
    pub level_sums: Vec<(f64, usize)>,
    /// Coarse model (nats, positions).
    pub coarse_sum: (f64, usize),
    /// Sum of everything, nats.
    pub total_nats: f64,
    /// Pixel count of the finest image.
    pub n_pixels: usize,
}

pub fn multiscale_log_likelihood(
    model: &MultiscaleModel,
    image: &Image,
) -> Result<ImageLogLikelihood> {
    let depth = model.depth();
    let pyr = build_pyramid(image, depth)?;
    let mut level_sums = Vec::with_capacity(depth);
    for (level, scale_model) in pyr.levels.iter().zip(&model.details) {
        let mask = scale_model.mask()?;
        let channels = level.channels();
        level_sums.push(walk_positions(&scale_model.params, &mask, &channels)?);
    }
    let coarse_mask = model.coarse.mask()?;
    let coarse_sum = walk_positions(&model.coarse.params, &coarse_mask, std::slice::from_ref(&pyr.coarse))?;
    let total_nats =
        level_sums.iter().map(|(s, _)| s).sum::<f64>() + coarse_sum.0;
    Ok(ImageLogLikelihood {
        level_sums,
        coarse_sum,
        total_nats,
        n_pixels: image.len(),
    })
}

fn walk_positions(
    params: &McgsmParams,
    mask: &NeighborhoodMask,
    channels: &[Image],
) -> Result<(f64, usize)> {
    let (h, w) = (channels[0].nrows() as i64, channels[0].ncols() as i64);
    let (r_lo_off, r_hi_off, c_lo_off, c_hi_off) = mask.bounding_box();
    let r_lo = (-r_lo_off).max(0);
    let r_hi = h - 1 - r_hi_off.max(0);
    let c_lo = (-c_lo_off).max(0);
    let c_hi = w - 1 - c_hi_off.max(0);
    if r_hi < r_lo || c_hi < c_lo {
        return Err(Error::Geometry("image smaller than mask bounding box".into()));
    }
    let mut x = Array1::zeros(params.d_in);
    let mut y = Array1::zeros(params.d_out);
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in r_lo..=r_hi {
        for c in c_lo..=c_hi {
            for (j, &(dr, dc, ch)) in mask.offsets.iter().enumerate() {
                x[j] = channels[ch][[(r + dr) as usize, (c + dc) as usize]]
                    - params.input_mean[j];
            }
            for (k, &ch) in mask.output_channels.iter().enumerate() {
                y[k] = channels[ch][[r as usize, c as usize]] - params.output_mean[k];
            }
            sum += params.conditional_log_density(&x.view(), &y.view())?;
            count += 1;
        }
    }
    Ok((sum, count))
}

/// Evaluation settings for [`cross_mir`].
#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    /// Pair budget per image and scale.
    pub max_pairs_per_image: usize,
    /// Total pixel budget per scale for the marginal-entropy estimate.
    pub max_marginal_samples: usize,
    /// Bootstrap replicates for the standard errors (resampling test images).
    pub bootstrap_reps: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_pairs_per_image: 2_000,
            max_marginal_samples: 200_000,
            bootstrap_reps: 100,
            seed: 0,
        }
    }
}

/// Cross-entropy rates, marginal entropies, and the cross-MIR of a model on
/// a held-out corpus. All values in bits; MIR = marginal - combined rate.
#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    /// Pyramid depth of the evaluated model.
    pub depth: usize,
    /// Conditional cross-entropy per superpixel at each level, fine to coarse.
    pub detail_rates: Vec<f64>,
    /// The same divided by three (bits per detail channel).
    pub detail_rates_per_channel: Vec<f64>,
    pub detail_rate_ses: Vec<f64>,
    /// Coarse-scale cross-entropy, bits per coarse pixel.
    pub coarse_rate: f64,
    pub coarse_rate_se: f64,
    /// Combined entropy rate, bits per finest pixel.
    pub combined_rate: f64,
    pub combined_rate_se: f64,
    /// Marginal entropy of finest-scale pixels, bits.
    pub marginal_entropy: f64,
    pub marginal_entropy_se: f64,
    /// Cross-MIR = marginal entropy - combined rate, bits per pixel.
    pub cross_mir: f64,
    pub cross_mir_se: f64,
    /// MIR of each scale 0..=depth (scale 0 is the full model).
    pub per_scale_mir: Vec<f64>,
    pub per_scale_mir_se: Vec<f64>,
    /// Pairs evaluated per level (fine to coarse), then at the coarse scale.
    pub n_pairs: Vec<usize>,
    pub n_marginal_samples: usize,
    pub n_images: usize,
}

/// Per-image accumulators gathered in the evaluation pass.
struct ImageStats {
    /// (sum nats, count) per detail level, fine to coarse.
    levels: Vec<(f64, usize)>,
    coarse: (f64, usize),
    /// (sum -log2 fhat, count) per scale under the fixed marginal densities.
    marginal: Vec<(f64, usize)>,
}

/// Estimate the cross-MIR of `model` on held-out images.
pub fn cross_mir(
    model: &MultiscaleModel,
    images: &[Image],
    cfg: &EvalConfig,
) -> Result<RateReport> {
    if images.is_empty() {
        return Err(Error::InvalidParameter("no test images".into()));
    }
    let depth = model.depth();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    // Pass 1: per-image pair likelihood sums and pixel pools per scale.
    let mut pixel_pools: Vec<Vec<Vec<f64>>> = vec![Vec::new(); depth + 1];
    let mut stats: Vec<ImageStats> = Vec::with_capacity(images.len());
    let per_image_pixels =
        (cfg.max_marginal_samples / images.len()).max(1);

    let masks: Result<Vec<NeighborhoodMask>> =
        model.details.iter().map(|d| d.mask()).collect();
    let masks = masks?;
    let coarse_mask = model.coarse.mask()?;

    for img in images {
        let img = crop_to_multiple(img, depth)?;
        let pyr = build_pyramid(&img, depth)?;
        let mut levels = Vec::with_capacity(depth);
        for (i, level) in pyr.levels.iter().enumerate() {
            let ds = extract_pairs(
                &level.channels(),
                &masks[i],
                cfg.max_pairs_per_image,
                &mut rng,
            )?;
            let lls = model.details[i]
                .params
                .row_log_likelihoods(&recenter_for(&model.details[i].params, &ds))?;
            levels.push((lls.iter().sum::<f64>(), lls.len()));
        }
        let coarse_ds = extract_pairs(
            std::slice::from_ref(&pyr.coarse),
            &coarse_mask,
            cfg.max_pairs_per_image,
            &mut rng,
        )?;
        let coarse_lls = model
            .coarse
            .params
            .row_log_likelihoods(&recenter_for(&model.coarse.params, &coarse_ds))?;
        let coarse = (coarse_lls.iter().sum::<f64>(), coarse_lls.len());

        for (scale, pool) in pixel_pools.iter_mut().enumerate() {
            let plane: &Image = if scale == 0 { &img } else { &pyr.levels[scale - 1].low };
            pool.push(subsample_pixels(plane, per_image_pixels, &mut rng));
        }
        stats.push(ImageStats { levels, coarse, marginal: Vec::new() });
    }

    // Pass 2: one marginal density per scale, then per-image marginal stats.
    // Scale 0 must have enough pixels; coarser scales fall back to NaN when
    // the corpus is too small for a defensible estimate.
    let mut marginals = Vec::with_capacity(depth + 1);
    for (scale, pool) in pixel_pools.iter().enumerate() {
        let pooled: Vec<f64> = pool.concat();
        if scale > 0 && pooled.len() < 10_000 {
            for (img_idx, pixels) in pool.iter().enumerate() {
                stats[img_idx].marginal.push((f64::NAN, pixels.len()));
            }
            marginals.push(f64::NAN);
            continue;
        }
        let entropy = marginal_entropy(&pooled)?;
        // Fixed full-sample density for the image-block bootstrap.
        let (lo, step, _) = grid_bounds(&pooled)?;
        let (h_star, _, _, _) = select_bandwidth(&pooled)?;
        let counts = histogram(&pooled, lo, step);
        let grid = kde_from_counts(&counts, pooled.len(), lo, step, h_star);
        for (img_idx, pixels) in pool.iter().enumerate() {
            let s: f64 = pixels.iter().map(|&x| -grid.log_density(x) / LN_2).sum();
            stats[img_idx].marginal.push((s, pixels.len()));
        }
        marginals.push(entropy);
    }

    // Point estimates from pooled sums.
    let all: Vec<usize> = (0..images.len()).collect();
    let point = pooled_rates(&stats, &all, depth);
    let detail_rates = point.0.clone();
    let coarse_rate = point.1;
    let combined_rate = combine_rates(coarse_rate, &detail_rates);
    let marginal = marginals[0];
    let mir = marginal - combined_rate;
    let per_scale_mir: Vec<f64> = (0..=depth)
        .map(|k| marginals[k] - combine_rates(coarse_rate, &detail_rates[k..]))
        .collect();

    // Image-block bootstrap.
    let reps = cfg.bootstrap_reps;
    let mut rep_detail: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); depth];
    let mut rep_coarse = Vec::with_capacity(reps);
    let mut rep_combined = Vec::with_capacity(reps);
    let mut rep_marginal = Vec::with_capacity(reps);
    let mut rep_mir = Vec::with_capacity(reps);
    let mut rep_scale_mir: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); depth + 1];
    for _ in 0..reps {
        let picks: Vec<usize> =
            (0..images.len()).map(|_| rng.random_range(0..images.len())).collect();
        let (dr, cr) = pooled_rates(&stats, &picks, depth);
        let comb = combine_rates(cr, &dr);
        let marg: Vec<f64> = (0..=depth)
            .map(|k| {
                let (s, n) = picks
                    .iter()
                    .map(|&i| stats[i].marginal[k])
                    .fold((0.0, 0usize), |(a, b), (s, n)| (a + s, b + n));
                s / n as f64
            })
            .collect();
        for (k, v) in dr.iter().enumerate() {
            rep_detail[k].push(*v);
        }
        rep_coarse.push(cr);
        rep_combined.push(comb);
        rep_marginal.push(marg[0]);
        rep_mir.push(marg[0] - comb);
        for k in 0..=depth {
            rep_scale_mir[k].push(marg[k] - combine_rates(cr, &dr[k..]));
        }
    }

    let mut n_pairs: Vec<usize> = (0..depth)
        .map(|k| stats.iter().map(|s| s.levels[k].1).sum())
        .collect();
    n_pairs.push(stats.iter().map(|s| s.coarse.1).sum());

    Ok(RateReport {
        depth,
        detail_rates_per_channel: detail_rates.iter().map(|r| r / 3.0).collect(),
        detail_rate_ses: rep_detail.iter().map(|v| std_dev(v)).collect(),
        detail_rates,
        coarse_rate,
        coarse_rate_se: std_dev(&rep_coarse),
        combined_rate,
        combined_rate_se: std_dev(&rep_combined),
        marginal_entropy: marginal,
        marginal_entropy_se: std_dev(&rep_marginal),
        cross_mir: mir,
        cross_mir_se: std_dev(&rep_mir),
        per_scale_mir,
        per_scale_mir_se: rep_scale_mir.iter().map(|v| std_dev(v)).collect(),
        n_pairs,
        n_marginal_samples: pixel_pools[0].iter().map(|v| v.len()).sum(),
        n_images: images.len(),
    })
}

/// Pooled per-level rates in bits over a subset of images.
fn pooled_rates(stats: &[ImageStats], picks: &[usize], depth: usize) -> (Vec<f64>, f64) {
    let mut detail = Vec::with_capacity(depth);
    for k in 0..depth {
        let (s, n) = picks
            .iter()
            .map(|&i| stats[i].levels[k])
            .fold((0.0, 0usize), |(a, b), (s, n)| (a + s, b + n));
        detail.push(-(s / n as f64) / LN_2);
    }
    let (s, n) = picks
        .iter()
        .map(|&i| stats[i].coarse)
        .fold((0.0, 0usize), |(a, b), (s, n)| (a + s, b + n));
    (detail, -(s / n as f64) / LN_2)
}

fn subsample_pixels(img: &Image, max: usize, rng: &mut impl Rng) -> Vec<f64> {
    let flat: Vec<f64> = img.iter().cloned().collect();
    if flat.len() <= max {
        return flat;
    }
    let mut picks: Vec<usize> = rand::seq::index::sample(rng, flat.len(), max).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| flat[i]).collect()
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}
