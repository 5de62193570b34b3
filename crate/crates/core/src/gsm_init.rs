//! EM fitting of a joint finite Gaussian-scale-mixture model on concatenated
//! (input, output) vectors, and conversion of the joint fit into conditional
//! model parameters for initialization.
//!
//! The joint model is a mixture over (component, scale) cells with equal
//! prior weight; cell (c, s) is the zero-mean Gaussian N(v; 0, Sigma_c / lambda_cs).

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, log_det_from_cholesky, log_sum_exp, spd_inverse};
use crate::mcgsm::McgsmParams;
use crate::neighborhoods::PatchDataset;

const LN_2PI: f64 = 1.8378770664093453;

/// Zero-mean joint GSM mixture with equal cell weights.
#[derive(Debug, Clone)]
pub struct JointGsmMixture {
    pub n_components: usize,
    pub n_scales: usize,
    /// Base covariances Sigma_c; cell (c, s) has covariance Sigma_c / lambda_cs.
    pub sigma: Vec<Array2<f64>>,
    /// C x S log scale multipliers, zero mean over scales per component.
    pub log_lambda: Array2<f64>,
}

impl JointGsmMixture {
    pub fn dim(&self) -> usize {
        self.sigma[0].nrows()
    }

    /// log p(v) under the mixture.
    pub fn log_density(&self, v: &Array1<f64>) -> Result<f64> {
        let d = self.dim() as f64;
        let mut terms = Vec::with_capacity(self.n_components * self.n_scales);
        for c in 0..self.n_components {
            let l = cholesky(&self.sigma[c].view())?;
            let z = cholesky_solve(&l.view(), &v.view());
            let m = v.dot(&z);
            let logdet = log_det_from_cholesky(&l.view());
            for sc in 0..self.n_scales {
                let t = self.log_lambda[[c, sc]];
                terms.push(0.5 * d * t - 0.5 * logdet - 0.5 * t.exp() * m);
            }
        }
        let prior = -((self.n_components * self.n_scales) as f64).ln();
        Ok(log_sum_exp(&terms) + prior - 0.5 * d * LN_2PI)
    }

    /// Draw one vector from the mixture.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Array1<f64>> {
        let cells = self.n_components * self.n_scales;
        let pick = rng.random_range(0..cells);
        let (c, sc) = (pick / self.n_scales, pick % self.n_scales);
        let l = cholesky(&self.sigma[c].view())?;
        let z = Array1::from_shape_fn(self.dim(), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let scale = (-0.5 * self.log_lambda[[c, sc]]).exp();
        Ok(l.dot(&z) * scale)
    }
}

/// Result of [`em_fit`]: the mixture, the per-iteration average
/// log-likelihood trace, and whether a component kept collapsing.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub mixture: JointGsmMixture,
    pub loglik_trace: Vec<f64>,
    pub collapse_warning: bool,
}

/// Fit a joint GSM mixture to the concatenated (x, y) rows of a dataset by
/// expectation maximization.
///
/// Components are seeded from the global second moment perturbed by random
/// log-normal factors; scale multipliers start log-uniform in [-1, 1] and are
/// gauge-projected. A component whose total responsibility falls below
/// 1e-8 N is reseeded from a random data point (three attempts, then a
/// warning is set).
pub fn em_fit(
    data: &PatchDataset,
    n_components: usize,
    n_scales: usize,
    max_iters: usize,
    tol: f64,
    rng: &mut impl Rng,
) -> Result<EmFit> {
    if n_components == 0 || n_scales == 0 {
        return Err(Error::InvalidParameter("C and S must be >= 1".into()));
    }
    let v = data.joined();
    let (n, d) = v.dim();
    if n < 10 * d {
        return Err(Error::InvalidParameter(format!(
            "need at least {} samples for dimension {d}, got {n}",
            10 * d
        )));
    }

    // Global second moment (the model is zero-mean).
    let s0 = v.t().dot(&v) / n as f64;
    let ridge = 1e-10 * s0.diag().sum().max(1e-300) / d as f64;

    let mut sigma: Vec<Array2<f64>> = (0..n_components)
        .map(|_| {
            let f: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
            &s0 * (0.3 * f).exp() + Array2::<f64>::eye(d) * ridge
        })
        .collect();
    let mut log_lambda = Array2::from_shape_fn((n_components, n_scales), |_| {
        rng.random_range(-1.0..1.0)
    });
    project_gauge(&mut log_lambda, &mut sigma);

    let mut trace = Vec::with_capacity(max_iters);
    let mut collapse_warning = false;
    let mut reseeds = vec![0usize; n_components];

    // Responsibilities, N x (C*S).
    let cells = n_components * n_scales;
    let mut resp = Array2::<f64>::zeros((n, cells));

    for _iter in 0..max_iters {
        // E-step.
        let avg_ll;
        {
            let mut chols = Vec::with_capacity(n_components);
            for sig in &sigma {
                chols.push(cholesky(&sig.view())?);
            }
            let maha = mahalanobis_all(&v, &chols);
            let logdets: Vec<f64> =
                chols.iter().map(|l| log_det_from_cholesky(&l.view())).collect();
            let lp_rows: Vec<f64> = resp
                .axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .map(|(i, mut row)| {
                    for c in 0..n_components {
                        let m = maha[[i, c]];
                        for sc in 0..n_scales {
                            let t = log_lambda[[c, sc]];
                            row[c * n_scales + sc] =
                                0.5 * d as f64 * t - 0.5 * logdets[c] - 0.5 * t.exp() * m;
                        }
                    }
                    let z = log_sum_exp(row.as_slice().unwrap());
                    row.mapv_inplace(|lr| (lr - z).exp());
                    z
                })
                .collect();
            let prior = -(cells as f64).ln();
            avg_ll = lp_rows.iter().sum::<f64>() / n as f64 + prior - 0.5 * d as f64 * LN_2PI;

            // M-step part 1: Sigma_c from lambda-scaled weighted second moments.
            for c in 0..n_components {
                let mut cell_weight = 0.0;
                let mut lam_weights = Array1::<f64>::zeros(n);
                for sc in 0..n_scales {
                    let lam = log_lambda[[c, sc]].exp();
                    let col = resp.column(c * n_scales + sc);
                    cell_weight += col.sum();
                    lam_weights += &(&col * lam);
                }
                if cell_weight < 1e-8 * n as f64 {
                    // Collapsed component: reseed from a random data point.
                    reseeds[c] += 1;
                    if reseeds[c] > 3 {
                        collapse_warning = true;
                        continue;
                    }
                    let pick = rng.random_range(0..n);
                    let row = v.row(pick).to_owned();
                    let outer = outer_product(&row);
                    sigma[c] = outer + Array2::<f64>::eye(d) * (s0.diag().sum() / d as f64 * 1e-2);
                    for sc in 0..n_scales {
                        log_lambda[[c, sc]] = 0.0;
                    }
                    continue;
                }
                let weighted = &v * &lam_weights.view().insert_axis(Axis(1));
                sigma[c] = v.t().dot(&weighted) / cell_weight + Array2::<f64>::eye(d) * ridge;
            }

            // M-step part 2: lambda from Mahalanobis distances under the new Sigma.
            let mut chols_new = Vec::with_capacity(n_components);
            for sig in &sigma {
                chols_new.push(cholesky(&sig.view())?);
            }
            let maha_new = mahalanobis_all(&v, &chols_new);
            for c in 0..n_components {
                for sc in 0..n_scales {
                    let col = resp.column(c * n_scales + sc);
                    let w: f64 = col.sum();
                    if w <= 0.0 {
                        continue;
                    }
                    let wm: f64 = col.dot(&maha_new.column(c));
                    if wm > 0.0 {
                        log_lambda[[c, sc]] = (d as f64 * w / wm).ln();
                    }
                }
            }
            project_gauge(&mut log_lambda, &mut sigma);
        }

        let done = trace
            .last()
            .map(|&prev: &f64| (avg_ll - prev).abs() < tol)
            .unwrap_or(false);
        trace.push(avg_ll);
        if done {
            break;
        }
    }

    Ok(EmFit {
        mixture: JointGsmMixture {
            n_components,
            n_scales,
            sigma,
            log_lambda,
        },
        loglik_trace: trace,
        collapse_warning,
    })
}

/// Squared Mahalanobis distances v' Sigma_c^-1 v for all rows and components.
fn mahalanobis_all(v: &Array2<f64>, chols: &[Array2<f64>]) -> Array2<f64> {
    let n = v.nrows();
    let mut out = Array2::zeros((n, chols.len()));
    for (c, l) in chols.iter().enumerate() {
        // v' Sigma^-1 v = |L^-1 v|^2; batch as V L^-T.
        let linv_t = lower_inverse(l).t().to_owned();
        let w = v.dot(&linv_t);
        let col = w.map_axis(Axis(1), |row| row.dot(&row));
        out.column_mut(c).assign(&col);
    }
    out
}

/// Inverse of a lower-triangular matrix by forward substitution.
fn lower_inverse(l: &Array2<f64>) -> Array2<f64> {
    let d = l.nrows();
    let mut inv = Array2::zeros((d, d));
    for j in 0..d {
        inv[[j, j]] = 1.0 / l[[j, j]];
        for i in j + 1..d {
            let mut s = 0.0;
            for k in j..i {
                s += l[[i, k]] * inv[[k, j]];
            }
            inv[[i, j]] = -s / l[[i, i]];
        }
    }
    inv
}

fn outer_product(v: &Array1<f64>) -> Array2<f64> {
    let d = v.len();
    Array2::from_shape_fn((d, d), |(i, j)| v[i] * v[j])
}

/// Zero the per-component mean of log lambda, rescaling Sigma so the model is
/// unchanged.
fn project_gauge(log_lambda: &mut Array2<f64>, sigma: &mut [Array2<f64>]) {
    for (mut row, sig) in log_lambda.rows_mut().into_iter().zip(sigma.iter_mut()) {
        let mean = row.mean().unwrap_or(0.0);
        row.mapv_inplace(|t| t - mean);
        // lambda -> lambda e^-mean pairs with Sigma -> Sigma e^-mean.
        sig.mapv_inplace(|x| x * (-mean).exp());
    }
}

/// Conversion output: the conditional model plus a flag recording whether any
/// input block needed diagonal regularization.
#[derive(Debug, Clone)]
pub struct ConvertedMcgsm {
    pub params: McgsmParams,
    pub regularized: bool,
}

/// Convert a joint mixture over (x, y) into conditional-model parameters via
/// exact per-component block conditionals: A = Syx Sxx^-1,
/// M = (Syy - Syx Sxx^-1 Sxy)^-1, gate K = Sxx^-1, lambda copied.
pub fn to_mcgsm(joint: &JointGsmMixture, d_in: usize, d_out: usize) -> Result<ConvertedMcgsm> {
    if d_in + d_out != joint.dim() {
        return Err(Error::Shape(format!(
            "d_in + d_out = {} does not match joint dimension {}",
            d_in + d_out,
            joint.dim()
        )));
    }
    let mut params = McgsmParams::identity(joint.n_components, joint.n_scales, d_in, d_out);
    params.log_lambda = joint.log_lambda.clone();
    let mut regularized = false;

    for c in 0..joint.n_components {
        let sig = &joint.sigma[c];
        let mut sxx = sig.slice(s![..d_in, ..d_in]).to_owned();
        let sxy = sig.slice(s![..d_in, d_in..]).to_owned();
        let syy = sig.slice(s![d_in.., d_in..]).to_owned();

        if d_in > 0 {
            if needs_regularization(&sxx) {
                let bump = 1e-8 * sxx.diag().sum() / d_in as f64;
                sxx += &(Array2::<f64>::eye(d_in) * bump);
                regularized = true;
            }
            let lxx = cholesky(&sxx.view())?;
            // B = Sxx^-1 Sxy, column by column.
            let mut b = Array2::<f64>::zeros((d_in, d_out));
            for j in 0..d_out {
                let col = sxy.column(j).to_owned();
                b.column_mut(j).assign(&cholesky_solve(&lxx.view(), &col.view()));
            }
            let schur = &syy - &sxy.t().dot(&b);
            params.predictors[c] = b.t().to_owned();
            params.chol_m[c] = cholesky(&spd_inverse(&schur.view())?.view())?;
            params.chol_k[c] = cholesky(&spd_inverse(&sxx.view())?.view())?;
        } else {
            params.chol_m[c] = cholesky(&spd_inverse(&syy.view())?.view())?;
        }
    }
    Ok(ConvertedMcgsm { params, regularized })
}

/// Cheap condition estimate from the Cholesky diagonal; falls back to
/// "regularize" when the factorization fails outright.
fn needs_regularization(sxx: &Array2<f64>) -> bool {
    match cholesky(&sxx.view()) {
        Ok(l) => {
            let diag: Vec<f64> = (0..l.nrows()).map(|i| l[[i, i]]).collect();
            let max = diag.iter().cloned().fold(f64::MIN, f64::max);
            let min = diag.iter().cloned().fold(f64::MAX, f64::min);
            (max / min).powi(2) > 1e12
        }
        Err(_) => true,
    }
}
