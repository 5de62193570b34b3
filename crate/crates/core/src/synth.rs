//! Synthetic data: dead-leaves occlusion images and phase-scrambled
//! (second-order-only) controls.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::image::Image;

/// Configuration of the dead-leaves generator. Disks with radius density
/// proportional to r^-exponent are drawn until the frame is covered.
#[derive(Debug, Clone, Copy)]
pub struct DeadLeavesConfig {
    pub height: usize,
    pub width: usize,
    /// Smallest disk radius in pixels.
    pub r_min: f64,
    /// Largest disk radius in pixels.
    pub r_max: f64,
    /// Radius density exponent; 3 gives the scale-invariant law.
    pub exponent: f64,
    /// Standard deviation of the additive Gaussian noise. Without noise the
    /// multi-information rate of the ensemble would be infinite.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DeadLeavesConfig {
    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        DeadLeavesConfig {
            height,
            width,
            r_min: 2.0,
            r_max: 64.0,
            exponent: 3.0,
            noise_sigma: 0.01,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let min_dim = self.height.min(self.width) as f64;
        if !(self.r_min > 0.0 && self.r_min < self.r_max && self.r_max <= min_dim) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < r_min < r_max <= min(H, W), got {} .. {} for {}x{}",
                self.r_min, self.r_max, self.height, self.width
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidParameter("noise_sigma must be >= 0".into()));
        }
        if self.exponent <= 1.0 {
            return Err(Error::InvalidParameter("exponent must exceed 1".into()));
        }
        Ok(())
    }
}

/// Inverse-CDF draw from the truncated power-law radius density r^-exponent
/// on [r_min, r_max].
pub fn sample_radius(cfg: &DeadLeavesConfig, rng: &mut impl Rng) -> f64 {
    let a = cfg.exponent - 1.0;
    let lo = cfg.r_min.powf(-a);
    let hi = cfg.r_max.powf(-a);
    let u: f64 = rng.random();
    (lo - u * (lo - hi)).powf(-1.0 / a)
}

/// Generate one dead-leaves image: disks with uniform intensity painted
/// front to back onto still-uncovered pixels until the frame is covered,
/// plus white noise. Front-to-back filling draws the same distribution as
/// back-to-front painting but terminates exactly at full coverage.
pub fn generate_dead_leaves(cfg: &DeadLeavesConfig) -> Result<Image> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let mut img = Array2::zeros((h, w));
    let mut covered = vec![false; h * w];
    let mut remaining = h * w;

    let mut disks = 0u64;
    while remaining > 0 {
        disks += 1;
        if disks > 10_000_000 {
            return Err(Error::Numerical {
                block: "dead_leaves".into(),
                detail: format!("frame not covered after {disks} disks"),
            });
        }
        // Center uniform over the frame extended by r_max on all sides.
        let cy = rng.random_range(-cfg.r_max..h as f64 + cfg.r_max);
        let cx = rng.random_range(-cfg.r_max..w as f64 + cfg.r_max);
        let r = sample_radius(cfg, &mut rng);
        let intensity: f64 = rng.random();

        let r2 = r * r;
        let y0 = ((cy - r).floor().max(0.0)) as usize;
        let y1 = ((cy + r).ceil().min(h as f64 - 1.0)) as usize;
        let x0 = ((cx - r).floor().max(0.0)) as usize;
        let x1 = ((cx + r).ceil().min(w as f64 - 1.0)) as usize;
        if (cy + r) < 0.0 || (cx + r) < 0.0 || (cy - r) > h as f64 || (cx - r) > w as f64 {
            continue;
        }
        for y in y0..=y1 {
            let dy = y as f64 + 0.5 - cy;
            for x in x0..=x1 {
                let dx = x as f64 + 0.5 - cx;
                if dy * dy + dx * dx <= r2 && !covered[y * w + x] {
                    covered[y * w + x] = true;
                    remaining -= 1;
                    img[[y, x]] = intensity;
                }
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        for v in img.iter_mut() {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            *v += cfg.noise_sigma * z;
        }
    }
    Ok(img)
}

/// Replace the phase spectrum of an image with that of a white-noise image,
/// keeping the amplitude spectrum (and hence the autocorrelation) intact.
/// The DC component is left untouched.
pub fn phase_scramble(image: &Image, rng: &mut impl Rng) -> Image {
    let (h, w) = image.dim();
    let noise = Array2::from_shape_fn((h, w), |_| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let spec_img = fft2(image);
    let spec_noise = fft2(&noise);

    let mut out_spec = Array2::from_elem((h, w), Complex::new(0.0, 0.0));
    for r in 0..h {
        for c in 0..w {
            let amp = spec_img[[r, c]].norm();
            let ph = spec_noise[[r, c]];
            let unit = if ph.norm() > 1e-300 { ph / ph.norm() } else { Complex::new(1.0, 0.0) };
            out_spec[[r, c]] = unit * amp;
        }
    }
    out_spec[[0, 0]] = spec_img[[0, 0]];
    // Enforce exact Hermitian symmetry so the inverse transform is real.
    for r in 0..h {
        for c in 0..w {
            let (mr, mc) = ((h - r) % h, (w - c) % w);
            if (r, c) < (mr, mc) {
                let avg = 0.5 * (out_spec[[r, c]] + out_spec[[mr, mc]].conj());
                out_spec[[r, c]] = avg;
                out_spec[[mr, mc]] = avg.conj();
            } else if (r, c) == (mr, mc) {
                out_spec[[r, c]] = Complex::new(out_spec[[r, c]].re, 0.0);
            }
        }
    }
    ifft2_real(&out_spec)
}

/// Amplitude spectrum |F(image)|.
pub fn amplitude_spectrum(image: &Image) -> Array2<f64> {
    fft2(image).mapv(|c| c.norm())
}

/// Circular autocorrelation via the Wiener-Khinchin relation (inverse
/// transform of the power spectrum), normalized by pixel count.
pub fn autocorrelation(image: &Image) -> Array2<f64> {
    let spec = fft2(image);
    let power = spec.mapv(|c| Complex::new(c.norm_sqr(), 0.0));
    let ac = ifft2_real(&power);
    let n = image.len() as f64;
    ac / n
}

fn fft2(image: &Image) -> Array2<Complex<f64>> {
    let (h, w) = image.dim();
    let mut data = image.mapv(|v| Complex::new(v, 0.0));
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    for mut row in data.rows_mut() {
        let mut buf: Vec<Complex<f64>> = row.to_vec();
        row_fft.process(&mut buf);
        for (dst, src) in row.iter_mut().zip(buf) {
            *dst = src;
        }
    }
    let col_fft = planner.plan_fft_forward(h);
    for c in 0..w {
        let mut buf: Vec<Complex<f64>> = data.column(c).to_vec();
        col_fft.process(&mut buf);
        for (r, v) in buf.into_iter().enumerate() {
            data[[r, c]] = v;
        }
    }
    data
}

fn ifft2_real(spec: &Array2<Complex<f64>>) -> Image {
    let (h, w) = spec.dim();
    let mut data = spec.clone();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_inverse(w);
    for mut row in data.rows_mut() {
        let mut buf: Vec<Complex<f64>> = row.to_vec();
        row_fft.process(&mut buf);
        for (dst, src) in row.iter_mut().zip(buf) {
            *dst = src;
        }
    }
    let col_fft = planner.plan_fft_inverse(h);
    for c in 0..w {
        let mut buf: Vec<Complex<f64>> = data.column(c).to_vec();
        col_fft.process(&mut buf);
        for (r, v) in buf.into_iter().enumerate() {
            data[[r, c]] = v;
        }
    }
    let n = (h * w) as f64;
    data.mapv(|c| c.re / n)
}
