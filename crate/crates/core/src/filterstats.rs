//! Pairwise Gaussian-derivative filter statistics and L_p-spherically
//! symmetric radial-Gamma fits.
//!
//! A vertically oriented derivative-of-Gaussian filter is applied at two
//! locations separated vertically by `d` pixels. After whitening, the joint
//! response distribution is approximately L_p-spherically symmetric; the
//! maximum-likelihood `p` summarizes how star-shaped the joint histogram is
//! and falls as the responses decorrelate with distance.

use ndarray::{Array1, Array2};
use serde::Serialize;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::linalg::sym_eig_2x2;

/// Result of one radial-Gamma fit.
#[derive(Debug, Clone, Serialize)]
pub struct LpFitResult {
    /// Norm exponent of the fitted L_p-spherical model.
    pub p: f64,
    /// Profile-likelihood standard error of `p`.
    pub p_se: f64,
    /// Gamma shape of the radial distribution.
    pub shape: f64,
    /// Gamma scale of the radial distribution.
    pub scale: f64,
    /// Average log-likelihood in nats per pair.
    pub avg_log_likelihood: f64,
    pub n_samples: usize,
    /// Vertical offset between the filter locations, in pixels.
    pub offset: usize,
    /// Set when the optimizer stopped at the edge of the p search interval.
    pub hit_boundary: bool,
}

/// Filter-response pairs at vertical offset `d`, collected on a stride-4 grid.
pub fn derivative_pair_responses(
    images: &[Image],
    d: usize,
    sigma_f: f64,
) -> Result<Array2<f64>> {
    if d == 0 {
        return Err(Error::InvalidParameter("offset d must be >= 1".into()));
    }
    if sigma_f <= 0.0 {
        return Err(Error::InvalidParameter("sigma_f must be positive".into()));
    }
    let radius = (4.0 * sigma_f).ceil() as usize;
    let kernel = derivative_kernel(sigma_f, radius);
    const STRIDE: usize = 4;

    let mut pairs = Vec::new();
    for img in images {
        let (h, w) = img.dim();
        if h < 2 * radius + 1 + d || w < 2 * radius + 1 {
            return Err(Error::Geometry(format!(
                "image {h}x{w} too small for filter radius {radius} and offset {d}"
            )));
        }
        let resp = correlate(img, &kernel, radius);
        let (rh, rw) = resp.dim();
        let mut r = 0;
        while r + d < rh {
            let mut c = 0;
            while c < rw {
                pairs.push((resp[[r, c]], resp[[r + d, c]]));
                c += STRIDE;
            }
            r += STRIDE;
        }
    }
    let mut out = Array2::zeros((pairs.len(), 2));
    for (i, (a, b)) in pairs.into_iter().enumerate() {
        out[[i, 0]] = a;
        out[[i, 1]] = b;
    }
    Ok(out)
}

/// Vertical first-derivative-of-Gaussian kernel, truncated at 4 sigma.
fn derivative_kernel(sigma: f64, radius: usize) -> Array2<f64> {
    let size = 2 * radius + 1;
    Array2::from_shape_fn((size, size), |(i, j)| {
        let r = i as f64 - radius as f64;
        let c = j as f64 - radius as f64;
        let g = (-0.5 * (r * r + c * c) / (sigma * sigma)).exp();
        -(r / (sigma * sigma)) * g
    })
}

/// Valid-region cross-correlation.
fn correlate(img: &Image, kernel: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let size = 2 * radius + 1;
    let (oh, ow) = (h - size + 1, w - size + 1);
    let mut out = Array2::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            let mut s = 0.0;
            for i in 0..size {
                for j in 0..size {
                    s += kernel[[i, j]] * img[[r + i, c + j]];
                }
            }
            out[[r, c]] = s;
        }
    }
    out
}

/// Center and symmetrically whiten a two-column sample: the output sample
/// covariance is the identity.
pub fn whiten_pairs(pairs: &Array2<f64>) -> Result<Array2<f64>> {
    if pairs.ncols() != 2 {
        return Err(Error::Shape("expected an N x 2 matrix".into()));
    }
    let n = pairs.nrows() as f64;
    let mean = pairs.sum_axis(ndarray::Axis(0)) / n;
    let centered = pairs - &mean.view().insert_axis(ndarray::Axis(0));
    let cov = centered.t().dot(&centered) / n;
    let (vals, vecs) = sym_eig_2x2(&cov.view());
    if vals[1] <= 1e-12 * vals[0].max(1e-300) {
        return Err(Error::Degenerate(format!(
            "singular pair covariance (eigenvalues {} and {})",
            vals[0], vals[1]
        )));
    }
    let d_inv = Array2::from_diag(&Array1::from_vec(vec![
        1.0 / vals[0].sqrt(),
        1.0 / vals[1].sqrt(),
    ]));
    let w = vecs.dot(&d_inv).dot(&vecs.t());
    Ok(centered.dot(&w))
}

/// Trigamma via the recurrence into the asymptotic region.
fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 6.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv * (1.0 + 0.5 * inv + inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 / 42.0)))
}

/// Gamma maximum likelihood: Newton on the shape equation
/// ln a - psi(a) = ln(mean) - mean(ln).
fn gamma_ml(radii: &[f64]) -> (f64, f64) {
    let n = radii.len() as f64;
    let mean = radii.iter().sum::<f64>() / n;
    let mean_log = radii.iter().map(|r| r.max(1e-300).ln()).sum::<f64>() / n;
    let s = mean.ln() - mean_log;
    let mut a = (3.0 - s + ((s - 3.0) * (s - 3.0) + 24.0 * s).sqrt()) / (12.0 * s);
    for _ in 0..50 {
        let f = a.ln() - digamma(a) - s;
        let fp = 1.0 / a - trigamma(a);
        let step = f / fp;
        a -= step;
        if a <= 1e-8 {
            a = 1e-8;
            break;
        }
        if step.abs() < 1e-12 * a {
            break;
        }
    }
    (a, mean / a)
}

/// log of the L_p unit-circle measure normalizer S_p = (2 Gamma(1/p))^2 / (p Gamma(2/p)).
fn ln_sp(p: f64) -> f64 {
    2.0 * ((2.0f64).ln() + ln_gamma(1.0 / p)) - p.ln() - ln_gamma(2.0 / p)
}

/// Average log-likelihood of the radial-Gamma L_p model at a given p,
/// together with the fitted Gamma parameters.
fn profile_ll(pairs: &Array2<f64>, p: f64) -> (f64, f64, f64) {
    let n = pairs.nrows();
    let radii: Vec<f64> = (0..n)
        .map(|i| {
            let a = pairs[[i, 0]].abs();
            let b = pairs[[i, 1]].abs();
            (a.powf(p) + b.powf(p)).powf(1.0 / p).max(1e-300)
        })
        .collect();
    let (shape, scale) = gamma_ml(&radii);
    let sum_ln: f64 = radii.iter().map(|r| r.ln()).sum();
    let sum_r: f64 = radii.iter().sum();
    let nf = n as f64;
    // Gamma log-density summed, minus log r (2-D change of measure), minus log S_p.
    let ll = (shape - 1.0) * sum_ln - sum_r / scale
        - nf * (shape * scale.ln() + ln_gamma(shape))
        - sum_ln
        - nf * ln_sp(p);
    (ll / nf, shape, scale)
}

const P_LO: f64 = 0.3;
const P_HI: f64 = 4.0;

/// Maximum-likelihood fit of the L_p-spherical model with Gamma radial
/// density: golden-section search over p with inner Gamma ML.
pub fn fit_lp_radial_gamma(pairs: &Array2<f64>) -> Result<LpFitResult> {
    if pairs.nrows() < 1_000 {
        return Err(Error::InvalidParameter(format!(
            "need at least 1000 pairs, got {}",
            pairs.nrows()
        )));
    }
    let golden: f64 = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (P_LO, P_HI);
    let mut x1 = hi - golden * (hi - lo);
    let mut x2 = lo + golden * (hi - lo);
    let mut f1 = profile_ll(pairs, x1).0;
    let mut f2 = profile_ll(pairs, x2).0;
    for _ in 0..60 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + golden * (hi - lo);
            f2 = profile_ll(pairs, x2).0;
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - golden * (hi - lo);
            f1 = profile_ll(pairs, x1).0;
        }
        if (hi - lo) < 1e-4 {
            break;
        }
    }
    let p = 0.5 * (lo + hi);
    let (avg_ll, shape, scale) = profile_ll(pairs, p);

    // Curvature of the profile log-likelihood for a standard error.
    let h = 0.02;
    let (f_plus, _, _) = profile_ll(pairs, (p + h).min(P_HI));
    let (f_minus, _, _) = profile_ll(pairs, (p - h).max(P_LO));
    let curv = (f_plus - 2.0 * avg_ll + f_minus) / (h * h) * pairs.nrows() as f64;
    let p_se = if curv < 0.0 { (-1.0 / curv).sqrt() } else { f64::INFINITY };

    Ok(LpFitResult {
        p,
        p_se,
        shape,
        scale,
        avg_log_likelihood: avg_ll,
        n_samples: pairs.nrows(),
        offset: 0,
        hit_boundary: p - P_LO < 0.01 || P_HI - p < 0.01,
    })
}

/// Full diagnostic: for each offset, extract responses, whiten, and fit.
pub fn lp_profile(images: &[Image], offsets: &[usize], sigma_f: f64) -> Result<Vec<LpFitResult>> {
    offsets
        .iter()
        .map(|&d| {
            let pairs = derivative_pair_responses(images, d, sigma_f)?;
            let white = whiten_pairs(&pairs)?;
            let mut fit = fit_lp_radial_gamma(&white)?;
            fit.offset = d;
            Ok(fit)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Gamma as GammaDist, StandardNormal};

    #[test]
    fn constant_image_has_zero_response() {
        let img = Array2::from_elem((64, 64), 3.0);
        let pairs = derivative_pair_responses(&[img], 2, 1.5).unwrap();
        assert!(pairs.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn ramp_gives_constant_diagonal_response() {
        // value = row index: response is the (constant) inner product of the
        // kernel with a linear ramp, computable directly from the kernel.
        let sigma = 1.5f64;
        let radius = (4.0 * sigma).ceil() as usize;
        let img = Array2::from_shape_fn((64, 64), |(r, _)| r as f64);
        let pairs = derivative_pair_responses(&[img], 3, sigma).unwrap();
        let kernel = derivative_kernel(sigma, radius);
        let mut expected = 0.0;
        for i in 0..2 * radius + 1 {
            for j in 0..2 * radius + 1 {
                expected += kernel[[i, j]] * i as f64;
            }
        }
        assert!(expected.abs() > 1e-6);
        for i in 0..pairs.nrows() {
            assert_relative_eq!(pairs[[i, 0]], expected, max_relative = 1e-10);
            assert_relative_eq!(pairs[[i, 1]], expected, max_relative = 1e-10);
        }
    }

    #[test]
    fn white_noise_decorrelates_at_large_offsets() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let images: Vec<_> = (0..4)
            .map(|_| Array2::from_shape_fn((200, 200), |_| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let pairs = derivative_pair_responses(&images, 40, 1.5).unwrap();
        let white = whiten_pairs(&pairs).unwrap();
        let n = white.nrows() as f64;
        let corr = white.column(0).dot(&white.column(1)) / n;
        let se = 1.0 / n.sqrt();
        assert!(corr.abs() < 4.0 * se, "correlation {corr} (se {se})");
    }

    #[test]
    fn whitening_yields_identity_covariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        // Correlated Gaussian pairs, rho = 0.9.
        let mut pairs = Array2::zeros((100_000, 2));
        for i in 0..pairs.nrows() {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            pairs[[i, 0]] = a;
            pairs[[i, 1]] = 0.9 * a + (1.0f64 - 0.81).sqrt() * b;
        }
        let white = whiten_pairs(&pairs).unwrap();
        let n = white.nrows() as f64;
        let cov = white.t().dot(&white) / n;
        assert!((cov[[0, 0]] - 1.0).abs() < 0.02);
        assert!((cov[[1, 1]] - 1.0).abs() < 0.02);
        assert!(cov[[0, 1]].abs() < 0.02);

        // Scale equivariance: scaling the input leaves the output unchanged.
        let scaled = &pairs * 7.5;
        let white2 = whiten_pairs(&scaled).unwrap();
        for (a, b) in white.iter().zip(white2.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn gaussian_pairs_recover_p_two() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let pairs = Array2::from_shape_fn((100_000, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let fit = fit_lp_radial_gamma(&pairs).unwrap();
        assert!(
            (fit.p - 2.0).abs() < 0.05,
            "fitted p = {} (se {})",
            fit.p,
            fit.p_se
        );
        assert!(!fit.hit_boundary);
    }

    #[test]
    fn l1_radial_gamma_pairs_recover_p_one() {
        // r ~ Gamma, direction uniform (cone measure) on the L1 circle:
        // u = (t, 1 - t) with random signs.
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let gamma = GammaDist::new(2.0, 0.7).unwrap();
        let mut pairs = Array2::zeros((100_000, 2));
        for i in 0..pairs.nrows() {
            let r: f64 = rng.sample(gamma);
            let t: f64 = rng.random();
            let s1 = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let s2 = if rng.random::<bool>() { 1.0 } else { -1.0 };
            pairs[[i, 0]] = s1 * r * t;
            pairs[[i, 1]] = s2 * r * (1.0 - t);
        }
        let fit = fit_lp_radial_gamma(&pairs).unwrap();
        assert!((fit.p - 1.0).abs() < 0.05, "fitted p = {}", fit.p);
        // Shape and scale should track the generator.
        assert!((fit.shape - 2.0).abs() < 0.05, "shape {}", fit.shape);
        assert!((fit.scale - 0.7).abs() < 0.05, "scale {}", fit.scale);
    }

    #[test]
    fn fit_is_scale_invariant_in_p() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let pairs = Array2::from_shape_fn((20_000, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let f1 = fit_lp_radial_gamma(&pairs).unwrap();
        let f2 = fit_lp_radial_gamma(&(&pairs * 3.0)).unwrap();
        assert!((f1.p - f2.p).abs() < 1e-3, "p {} vs {}", f1.p, f2.p);
        assert_relative_eq!(f2.scale, 3.0 * f1.scale, max_relative = 1e-2);
    }

    #[test]
    fn free_p_dominates_p_two_restriction() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        // Laplacian-like data where the optimum is far from 2.
        let mut pairs = Array2::zeros((20_000, 2));
        for i in 0..pairs.nrows() {
            let e1: f64 = -rng.random::<f64>().max(1e-12).ln();
            let e2: f64 = -rng.random::<f64>().max(1e-12).ln();
            let s1 = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let s2 = if rng.random::<bool>() { 1.0 } else { -1.0 };
            pairs[[i, 0]] = s1 * e1;
            pairs[[i, 1]] = s2 * e2;
        }
        let fit = fit_lp_radial_gamma(&pairs).unwrap();
        let (ll_p2, _, _) = profile_ll(&pairs, 2.0);
        assert!(fit.avg_log_likelihood >= ll_p2 - 1e-9);
    }

    #[test]
    fn requires_enough_pairs() {
        let pairs = Array2::zeros((100, 2));
        assert!(fit_lp_radial_gamma(&pairs).is_err());
    }
}
