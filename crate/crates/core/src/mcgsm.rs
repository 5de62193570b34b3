//! Mixture of conditional Gaussian scale mixtures.
//!
//! The conditional density of an output vector y given an input vector x is
//!
//! ```text
//!   p(y | x) = sum_{c,s} p(c, s | x) N(y; A_c x, (lambda_cs M_c)^-1)
//!   p(c, s | x) proportional to |lambda_cs K_c|^(1/2) exp(-lambda_cs/2 x' K_c x)
//! ```
//!
//! with positive definite gate precisions K_c, expert precisions M_c, linear
//! predictors A_c and positive scale multipliers lambda_cs shared between gate
//! and expert. Components and scales carry equal prior weight. Precisions are
//! stored as lower-triangular Cholesky factors; the unconstrained coordinate
//! vector keeps factor diagonals in log space, which makes quasi-Newton
//! training projection-free.
//!
//! All densities are in nats. Inputs and outputs are centered; callers
//! subtract `input_mean` / `output_mean` before evaluation.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{log_det_from_cholesky, log_sum_exp, solve_lower_transpose};
use crate::neighborhoods::PatchDataset;

const LN_2PI: f64 = 1.8378770664093453;
/// Floor on Cholesky factor diagonals during optimization.
const DIAG_FLOOR: f64 = 1e-8;
/// Fixed reduction width; keeps parallel sums independent of thread count.
const CHUNK: usize = 2048;

/// Full parameter set of a mixture of conditional Gaussian scale mixtures.
#[derive(Debug, Clone, PartialEq)]
pub struct McgsmParams {
    /// Mixture component count C.
    pub n_components: usize,
    /// Scale count S per component.
    pub n_scales: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Lower-triangular factors of the gate precisions, K_c = L_c L_c'.
    pub chol_k: Vec<Array2<f64>>,
    /// Lower-triangular factors of the expert precisions, M_c = R_c R_c'.
    pub chol_m: Vec<Array2<f64>>,
    /// Linear predictors A_c, each D_out x D_in.
    pub predictors: Vec<Array2<f64>>,
    /// C x S log scale multipliers; zero mean over scales per component.
    pub log_lambda: Array2<f64>,
    /// Centering offset subtracted from raw inputs.
    pub input_mean: Array1<f64>,
    /// Centering offset subtracted from raw outputs.
    pub output_mean: Array1<f64>,
}

impl McgsmParams {
    /// Identity-precision, zero-predictor model.
    pub fn identity(n_components: usize, n_scales: usize, d_in: usize, d_out: usize) -> Self {
        McgsmParams {
            n_components,
            n_scales,
            d_in,
            d_out,
            chol_k: vec![Array2::eye(d_in); n_components],
            chol_m: vec![Array2::eye(d_out); n_components],
            predictors: vec![Array2::zeros((d_out, d_in)); n_components],
            log_lambda: Array2::zeros((n_components, n_scales)),
            input_mean: Array1::zeros(d_in),
            output_mean: Array1::zeros(d_out),
        }
    }

    /// Random well-conditioned parameters; used by synthetic-data generators
    /// and tests.
    pub fn random(
        n_components: usize,
        n_scales: usize,
        d_in: usize,
        d_out: usize,
        spread: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut p = McgsmParams::identity(n_components, n_scales, d_in, d_out);
        let tri = |n: usize, rng: &mut dyn rand::RngCore| -> Array2<f64> {
            let mut l = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..=i {
                    let v: f64 = rng.sample(rand_distr::StandardNormal);
                    l[[i, j]] = if i == j { (spread * v).exp() } else { spread * v };
                }
            }
            l
        };
        for c in 0..n_components {
            p.chol_k[c] = tri(d_in, rng);
            p.chol_m[c] = tri(d_out, rng);
            p.predictors[c].mapv_inplace(|_| {
                let v: f64 = rng.sample(rand_distr::StandardNormal);
                spread * v
            });
        }
        p.log_lambda.mapv_inplace(|_| {
            let v: f64 = rng.sample(rand_distr::StandardNormal);
            spread * v
        });
        p.project_lambda_gauge();
        p
    }

    /// Remove the per-component mean of `log_lambda` over scales, rescaling
    /// the factors so the model is unchanged.
    pub fn project_lambda_gauge(&mut self) {
        for c in 0..self.n_components {
            let mean = self.log_lambda.row(c).mean().unwrap_or(0.0);
            self.log_lambda.row_mut(c).mapv_inplace(|v| v - mean);
            // lambda -> lambda / g requires K, M -> K * g to stay invariant,
            // i.e. factors scale by sqrt(g).
            let half = (0.5 * mean).exp();
            self.chol_k[c].mapv_inplace(|v| v * half);
            self.chol_m[c].mapv_inplace(|v| v * half);
        }
    }

    /// Number of unconstrained coordinates.
    pub fn n_unconstrained(&self) -> usize {
        let tri_in = self.d_in * (self.d_in + 1) / 2;
        let tri_out = self.d_out * (self.d_out + 1) / 2;
        self.n_components * (tri_in + tri_out + self.d_out * self.d_in)
            + self.n_components * self.n_scales
    }

    /// Flatten into the unconstrained coordinate vector (factor diagonals as
    /// logs, `log_lambda` as-is).
    pub fn pack(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_unconstrained());
        for c in 0..self.n_components {
            pack_tri(&self.chol_k[c], &mut v);
        }
        for c in 0..self.n_components {
            pack_tri(&self.chol_m[c], &mut v);
        }
        for c in 0..self.n_components {
            v.extend(self.predictors[c].iter());
        }
        v.extend(self.log_lambda.iter());
        v
    }

    /// Rebuild parameters from unconstrained coordinates, applying the
    /// diagonal floor and the lambda gauge projection. Dimensions and means
    /// are taken from `self`.
    pub fn unpack_like(&self, v: &[f64]) -> Result<McgsmParams> {
        if v.len() != self.n_unconstrained() {
            return Err(Error::Shape(format!(
                "expected {} unconstrained coordinates, got {}",
                self.n_unconstrained(),
                v.len()
            )));
        }
        let mut out = self.clone();
        let mut pos = 0usize;
        for c in 0..self.n_components {
            pos = unpack_tri(&mut out.chol_k[c], v, pos);
        }
        for c in 0..self.n_components {
            pos = unpack_tri(&mut out.chol_m[c], v, pos);
        }
        for c in 0..self.n_components {
            for a in out.predictors[c].iter_mut() {
                *a = v[pos];
                pos += 1;
            }
        }
        for t in out.log_lambda.iter_mut() {
            *t = v[pos];
            pos += 1;
        }
        for c in 0..out.n_components {
            let mean = out.log_lambda.row(c).mean().unwrap_or(0.0);
            out.log_lambda.row_mut(c).mapv_inplace(|t| t - mean);
        }
        Ok(out)
    }

    /// Locate non-finite values; returns the offending block name.
    pub fn validate_finite(&self) -> Result<()> {
        let all_finite = |ms: &[Array2<f64>]| ms.iter().all(|m| m.iter().all(|v| v.is_finite()));
        let bad = if !all_finite(&self.chol_k) {
            Some("chol_K")
        } else if !all_finite(&self.chol_m) {
            Some("chol_M")
        } else if !all_finite(&self.predictors) {
            Some("A")
        } else if !self.log_lambda.iter().all(|v| v.is_finite()) {
            Some("log_lambda")
        } else {
            None
        };
        match bad {
            Some(name) => Err(Error::Numerical {
                block: name.into(),
                detail: "non-finite parameter value".into(),
            }),
            None => Ok(()),
        }
    }

    fn check_x(&self, x: &ArrayView1<f64>) -> Result<()> {
        if x.len() != self.d_in {
            return Err(Error::Shape(format!(
                "input has length {}, model expects {}",
                x.len(),
                self.d_in
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite input vector".into()));
        }
        Ok(())
    }

    /// Unnormalized log gate weights, one per (component, scale).
    fn gate_energies(&self, x: &ArrayView1<f64>) -> Array2<f64> {
        let mut a = Array2::zeros((self.n_components, self.n_scales));
        for c in 0..self.n_components {
            let u = self.chol_k[c].t().dot(x);
            let q = u.dot(&u);
            let half_logdet = 0.5 * log_det_from_cholesky(&self.chol_k[c].view());
            for s in 0..self.n_scales {
                let t = self.log_lambda[[c, s]];
                a[[c, s]] = 0.5 * self.d_in as f64 * t + half_logdet - 0.5 * t.exp() * q;
            }
        }
        a
    }

    /// Log posterior over (component, scale) given a centered input, plus the
    /// log normalizer of the unnormalized weights.
    pub fn gate_log_posterior(&self, x: &ArrayView1<f64>) -> Result<(Array2<f64>, f64)> {
        self.check_x(x)?;
        let mut a = self.gate_energies(x);
        let z = log_sum_exp(a.as_slice().unwrap());
        a.mapv_inplace(|v| v - z);
        Ok((a, z))
    }

    /// Log expert densities log N(y; A_c x, (lambda_cs M_c)^-1), one per (c, s).
    fn expert_log_densities(&self, x: &ArrayView1<f64>, y: &ArrayView1<f64>) -> Array2<f64> {
        let mut e = Array2::zeros((self.n_components, self.n_scales));
        for c in 0..self.n_components {
            let rho = y.to_owned() - self.predictors[c].dot(x);
            let v = self.chol_m[c].t().dot(&rho);
            let q = v.dot(&v);
            let half_logdet = 0.5 * log_det_from_cholesky(&self.chol_m[c].view());
            for s in 0..self.n_scales {
                let t = self.log_lambda[[c, s]];
                e[[c, s]] = 0.5 * self.d_out as f64 * (t - LN_2PI) + half_logdet
                    - 0.5 * t.exp() * q;
            }
        }
        e
    }

    /// log p(y | x) in nats for centered x, y.
    pub fn conditional_log_density(&self, x: &ArrayView1<f64>, y: &ArrayView1<f64>) -> Result<f64> {
        self.check_x(x)?;
        if y.len() != self.d_out {
            return Err(Error::Shape(format!(
                "output has length {}, model expects {}",
                y.len(),
                self.d_out
            )));
        }
        let a = self.gate_energies(x);
        let e = self.expert_log_densities(x, y);
        let joint = &a + &e;
        Ok(log_sum_exp(joint.as_slice().unwrap()) - log_sum_exp(a.as_slice().unwrap()))
    }

    /// Draw a (component, scale) pair from the gate posterior.
    pub fn sample_gate(&self, x: &ArrayView1<f64>, rng: &mut impl Rng) -> Result<(usize, usize)> {
        let (log_post, _) = self.gate_log_posterior(x)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for c in 0..self.n_components {
            for s in 0..self.n_scales {
                acc += log_post[[c, s]].exp();
                if u < acc {
                    return Ok((c, s));
                }
            }
        }
        Ok((self.n_components - 1, self.n_scales - 1))
    }

    /// Draw y ~ p(y | x) for a centered input; the result is centered too.
    pub fn conditional_sample(&self, x: &ArrayView1<f64>, rng: &mut impl Rng) -> Result<Array1<f64>> {
        let (c, s) = self.sample_gate(x, rng)?;
        let sqrt_lambda = (0.5 * self.log_lambda[[c, s]]).exp();
        let mut w = Array1::zeros(self.d_out);
        for v in w.iter_mut() {
            *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        // cov = (lambda M)^-1 = R^-T R^-1 / lambda, so y = A x + R^-T w / sqrt(lambda).
        let noise = solve_lower_transpose(&self.chol_m[c].view(), &w.view());
        Ok(self.predictors[c].dot(x) + noise / sqrt_lambda)
    }

    /// Average conditional log-likelihood over a dataset, nats per output vector.
    pub fn average_log_likelihood(&self, data: &PatchDataset) -> Result<f64> {
        self.check_data(data)?;
        let n = data.len();
        let ranges = chunk_ranges(n);
        let total: f64 = ranges
            .into_par_iter()
            .map(|r| {
                let x = data.inputs.slice(s![r.clone(), ..]);
                let y = data.outputs.slice(s![r, ..]);
                self.chunk_log_likelihood(&x.to_owned(), &y.to_owned())
            })
            .collect::<Vec<_>>()
            .into_iter()
            .sum();
        Ok(total / n as f64)
    }

    /// Per-row conditional log-likelihoods in nats.
    pub fn row_log_likelihoods(&self, data: &PatchDataset) -> Result<Vec<f64>> {
        self.check_data(data)?;
        let ranges = chunk_ranges(data.len());
        let chunks: Vec<Vec<f64>> = ranges
            .into_par_iter()
            .map(|r| {
                let x = data.inputs.slice(s![r.clone(), ..]).to_owned();
                let y = data.outputs.slice(s![r, ..]).to_owned();
                let (a, q, _) = self.chunk_energies(&x, &y);
                (0..x.nrows())
                    .map(|i| {
                        log_sum_exp(q.row(i).as_slice().unwrap())
                            - log_sum_exp(a.row(i).as_slice().unwrap())
                    })
                    .collect()
            })
            .collect();
        Ok(chunks.concat())
    }

    /// Average conditional log-likelihood and its gradient with respect to the
    /// unconstrained coordinates (same layout as [`McgsmParams::pack`]).
    ///
    /// The reduction is chunked at a fixed width and folded in chunk order, so
    /// the result does not depend on the rayon thread count.
    pub fn log_likelihood_and_gradient(&self, data: &PatchDataset) -> Result<(f64, Vec<f64>)> {
        self.check_data(data)?;
        let n = data.len();
        let ranges = chunk_ranges(n);
        let partials: Vec<ChunkGrad> = ranges
            .into_par_iter()
            .map(|r| {
                let x = data.inputs.slice(s![r.clone(), ..]);
                let y = data.outputs.slice(s![r, ..]);
                self.chunk_gradient(&x.to_owned(), &y.to_owned())
            })
            .collect();
        let mut acc = ChunkGrad::zeros(self);
        for p in partials {
            acc.add(&p);
        }
        Ok(self.finish_gradient(acc, n))
    }

    fn check_data(&self, data: &PatchDataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidParameter("empty dataset".into()));
        }
        if data.d_in() != self.d_in || data.d_out() != self.d_out {
            return Err(Error::Shape(format!(
                "dataset is {}x{} -> {}, model expects {} -> {}",
                data.len(),
                data.d_in(),
                data.d_out(),
                self.d_in,
                self.d_out
            )));
        }
        Ok(())
    }

    /// Per-chunk joint energies. Returns (a, q) where `a[n][cs]` are gate
    /// energies and `q[n][cs] = a + e` are joint energies.
    fn chunk_energies(
        &self,
        x: &Array2<f64>,
        y: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, ChunkCache) {
        let n = x.nrows();
        let cs = self.n_components * self.n_scales;
        let mut a = Array2::zeros((n, cs));
        let mut q = Array2::zeros((n, cs));
        let mut cache = ChunkCache {
            u: Vec::new(),
            rho: Vec::new(),
            v: Vec::new(),
            qk: Vec::new(),
            qm: Vec::new(),
        };
        for c in 0..self.n_components {
            let u = x.dot(&self.chol_k[c]);
            let qk: Array1<f64> = u.map_axis(Axis(1), |row| row.dot(&row));
            let rho = y - &x.dot(&self.predictors[c].t());
            let v = rho.dot(&self.chol_m[c]);
            let qm: Array1<f64> = v.map_axis(Axis(1), |row| row.dot(&row));
            let half_logdet_k = 0.5 * log_det_from_cholesky(&self.chol_k[c].view());
            let half_logdet_m = 0.5 * log_det_from_cholesky(&self.chol_m[c].view());
            for s in 0..self.n_scales {
                let t = self.log_lambda[[c, s]];
                let lam = t.exp();
                let ga = 0.5 * self.d_in as f64 * t + half_logdet_k;
                let ge = 0.5 * self.d_out as f64 * (t - LN_2PI) + half_logdet_m;
                let col = c * self.n_scales + s;
                for i in 0..n {
                    let an = ga - 0.5 * lam * qk[i];
                    a[[i, col]] = an;
                    q[[i, col]] = an + ge - 0.5 * lam * qm[i];
                }
            }
            cache.u.push(u);
            cache.rho.push(rho);
            cache.v.push(v);
            cache.qk.push(qk);
            cache.qm.push(qm);
        }
        (a, q, cache)
    }

    fn chunk_log_likelihood(&self, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        let (a, q, _) = self.chunk_energies(x, y);
        let mut sum = 0.0;
        for i in 0..x.nrows() {
            sum += log_sum_exp(q.row(i).as_slice().unwrap())
                - log_sum_exp(a.row(i).as_slice().unwrap());
        }
        sum
    }

    fn chunk_gradient(&self, x: &Array2<f64>, y: &Array2<f64>) -> ChunkGrad {
        let n = x.nrows();
        let (c_cnt, s_cnt) = (self.n_components, self.n_scales);
        let (a, q, cache) = self.chunk_energies(x, y);
        let mut out = ChunkGrad::zeros(self);

        // Posterior weights: beta over the joint energies, pi over the gates.
        let mut wk = Array2::<f64>::zeros((n, c_cnt)); // sum_s (beta - pi) lambda
        let mut bm = Array2::<f64>::zeros((n, c_cnt)); // sum_s beta lambda
        let mut za = vec![0.0; n];
        let mut zq = vec![0.0; n];
        for i in 0..n {
            za[i] = log_sum_exp(a.row(i).as_slice().unwrap());
            zq[i] = log_sum_exp(q.row(i).as_slice().unwrap());
            out.ll += zq[i] - za[i];
        }
        for c in 0..c_cnt {
            let qk = &cache.qk[c];
            let qm = &cache.qm[c];
            for s in 0..s_cnt {
                let col = c * s_cnt + s;
                let lam = self.log_lambda[[c, s]].exp();
                for i in 0..n {
                    let beta = (q[[i, col]] - zq[i]).exp();
                    let pi = (a[[i, col]] - za[i]).exp();
                    let w = beta - pi;
                    out.gt[[c, s]] += w * 0.5 * (self.d_in as f64 - lam * qk[i])
                        + beta * 0.5 * (self.d_out as f64 - lam * qm[i]);
                    out.wsum[c] += w;
                    out.bsum[c] += beta;
                    wk[[i, c]] += w * lam;
                    bm[[i, c]] += beta * lam;
                }
            }
        }

        for c in 0..c_cnt {
            // d a / d L_c accumulates -sum_n wk_nc x_n u_nc'.
            let u_scaled = &cache.u[c] * &wk.column(c).insert_axis(Axis(1));
            out.gk[c] -= &x.t().dot(&u_scaled);
            // d e / d R_c accumulates -sum_n bm_nc rho_n v_nc'.
            let v_scaled = &cache.v[c] * &bm.column(c).insert_axis(Axis(1));
            out.gr[c] -= &cache.rho[c].t().dot(&v_scaled);
            // d e / d A_c accumulates sum_n bm_nc (M rho)_n x_n'.
            let mrho = cache.v[c].dot(&self.chol_m[c].t());
            let mrho_scaled = &mrho * &bm.column(c).insert_axis(Axis(1));
            out.ga[c] += &mrho_scaled.t().dot(x);
        }
        out
    }

    /// Scale by 1/N, add the log-det terms, chain through the log-diagonal
    /// storage, project the lambda gauge, and pack.
    fn finish_gradient(&self, mut acc: ChunkGrad, n: usize) -> (f64, Vec<f64>) {
        let inv_n = 1.0 / n as f64;
        for c in 0..self.n_components {
            for i in 0..self.d_in {
                acc.gk[c][[i, i]] += acc.wsum[c] / self.chol_k[c][[i, i]];
            }
            for i in 0..self.d_out {
                acc.gr[c][[i, i]] += acc.bsum[c] / self.chol_m[c][[i, i]];
            }
            acc.gk[c].mapv_inplace(|v| v * inv_n);
            acc.gr[c].mapv_inplace(|v| v * inv_n);
            acc.ga[c].mapv_inplace(|v| v * inv_n);
            // Diagonals are stored as logs: d/d t = l * d/d l, frozen at the floor.
            for i in 0..self.d_in {
                let l = self.chol_k[c][[i, i]];
                acc.gk[c][[i, i]] *= if l > DIAG_FLOOR { l } else { 0.0 };
            }
            for i in 0..self.d_out {
                let l = self.chol_m[c][[i, i]];
                acc.gr[c][[i, i]] *= if l > DIAG_FLOOR { l } else { 0.0 };
            }
        }
        acc.gt.mapv_inplace(|v| v * inv_n);
        for c in 0..self.n_components {
            let mean = acc.gt.row(c).mean().unwrap_or(0.0);
            acc.gt.row_mut(c).mapv_inplace(|v| v - mean);
        }

        let mut grad = Vec::with_capacity(self.n_unconstrained());
        for c in 0..self.n_components {
            pack_tri_grad(&acc.gk[c], &mut grad);
        }
        for c in 0..self.n_components {
            pack_tri_grad(&acc.gr[c], &mut grad);
        }
        for c in 0..self.n_components {
            grad.extend(acc.ga[c].iter());
        }
        grad.extend(acc.gt.iter());
        (acc.ll * inv_n, grad)
    }
}

struct ChunkCache {
    u: Vec<Array2<f64>>,
    rho: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    qk: Vec<Array1<f64>>,
    qm: Vec<Array1<f64>>,
}

struct ChunkGrad {
    ll: f64,
    gk: Vec<Array2<f64>>,
    gr: Vec<Array2<f64>>,
    ga: Vec<Array2<f64>>,
    gt: Array2<f64>,
    wsum: Vec<f64>,
    bsum: Vec<f64>,
}

impl ChunkGrad {
    fn zeros(p: &McgsmParams) -> Self {
        ChunkGrad {
            ll: 0.0,
            gk: vec![Array2::zeros((p.d_in, p.d_in)); p.n_components],
            gr: vec![Array2::zeros((p.d_out, p.d_out)); p.n_components],
            ga: vec![Array2::zeros((p.d_out, p.d_in)); p.n_components],
            gt: Array2::zeros((p.n_components, p.n_scales)),
            wsum: vec![0.0; p.n_components],
            bsum: vec![0.0; p.n_components],
        }
    }

    fn add(&mut self, other: &ChunkGrad) {
        self.ll += other.ll;
        for (a, b) in self.gk.iter_mut().zip(&other.gk) {
            *a += b;
        }
        for (a, b) in self.gr.iter_mut().zip(&other.gr) {
            *a += b;
        }
        for (a, b) in self.ga.iter_mut().zip(&other.ga) {
            *a += b;
        }
        self.gt += &other.gt;
        for (a, b) in self.wsum.iter_mut().zip(&other.wsum) {
            *a += b;
        }
        for (a, b) in self.bsum.iter_mut().zip(&other.bsum) {
            *a += b;
        }
    }
}

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(CHUNK))
        .map(|k| k * CHUNK..((k + 1) * CHUNK).min(n))
        .collect()
}

fn pack_tri(l: &Array2<f64>, out: &mut Vec<f64>) {
    for i in 0..l.nrows() {
        for j in 0..=i {
            out.push(if i == j { l[[i, i]].ln() } else { l[[i, j]] });
        }
    }
}

fn pack_tri_grad(g: &Array2<f64>, out: &mut Vec<f64>) {
    for i in 0..g.nrows() {
        for j in 0..=i {
            out.push(g[[i, j]]);
        }
    }
}

fn unpack_tri(l: &mut Array2<f64>, v: &[f64], mut pos: usize) -> usize {
    for i in 0..l.nrows() {
        for j in 0..=i {
            l[[i, j]] = if i == j { v[pos].exp().max(DIAG_FLOOR) } else { v[pos] };
            pos += 1;
        }
    }
    pos
}
