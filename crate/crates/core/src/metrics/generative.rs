//! Reconstruction error, variational log-likelihood bound, Fréchet distance
//! between Gaussian summaries and a plain PCA projection.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, DiffusionSchedule, NoisePredictor};
use crate::error::{Error, Result};
use crate::htc::CodePath;
use crate::linalg::{symmetric_eigen, Matrix};
use crate::rng::{self, Domain};

/// Mean squared error over all entries.
pub fn recon_loss(x: &Matrix, x_hat: &Matrix) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(format!(
            "reconstruction {}x{} for data {}x{}",
            x_hat.rows(),
            x_hat.cols(),
            x.rows(),
            x.cols()
        )));
    }
    let n = x.as_slice().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sq: f64 = x.as_slice().iter().zip(x_hat.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / n as f64)
}

/// How many timesteps the variational bound visits per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElboSteps {
    /// Uniform draws with replacement, rescaled by `T / m`.
    Sampled(usize),
    /// Every timestep once.
    Exact,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Per-sample lower bound on `log p(x)` (nats), i.e. the negated DDPM
/// variational bound: prior KL at `T`, posterior KLs for `t >= 2` and a
/// Gaussian decoder term at `t = 1` with variance `beta_1`.
pub fn ll_elbo<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x: &Matrix,
    paths: &[CodePath],
    schedule: &DiffusionSchedule,
    steps: ElboSteps,
    seed: u64,
) -> Result<Vec<f64>> {
    let (n, d) = x.shape();
    if paths.len() != n {
        return Err(Error::shape(format!("{} paths for {n} samples", paths.len())));
    }
    let big_t = schedule.steps();
    let draws = match steps {
        ElboSteps::Sampled(0) => return Err(Error::contract("bound needs at least one timestep")),
        ElboSteps::Sampled(m) => m,
        ElboSteps::Exact => big_t,
    };

    let ab_t = schedule.alpha_bar(big_t);
    let mut bound: Vec<f64> = (0..n)
        .map(|i| {
            let sq: f64 = x.row(i).iter().map(|v| v * v).sum();
            0.5 * (d as f64 * ((1.0 - ab_t) - 1.0 - libm::log(1.0 - ab_t)) + ab_t * sq)
        })
        .collect();

    let scale = big_t as f64 / draws as f64;
    let mut eps = Matrix::zeros(n, d);
    let mut x_t = Matrix::zeros(n, d);
    for k in 0..draws {
        let mut r = rng::stream(seed, Domain::Elbo, k as u64);
        let ts: Vec<usize> = match steps {
            ElboSteps::Exact => vec![k + 1; n],
            ElboSteps::Sampled(_) => (0..n).map(|_| r.random_range(1..=big_t)).collect(),
        };
        rng::fill_normal(&mut r, eps.as_mut_slice());
        for i in 0..n {
            x_t.row_mut(i).copy_from_slice(&q_sample(x.row(i), ts[i], eps.row(i), schedule));
        }
        let pred = predictor.predict_noise(&x_t, &ts, paths)?;
        for i in 0..n {
            let t = ts[i];
            let (beta, alpha, ab) = (schedule.beta(t), schedule.alpha(t), schedule.alpha_bar(t));
            // posterior mean minus model mean = coef (eps_theta - eps)
            let coef = beta / (libm::sqrt(alpha) * libm::sqrt(1.0 - ab));
            let sq: f64 = pred.row(i).iter().zip(eps.row(i)).map(|(p, e)| (p - e) * (p - e)).sum();
            let term = if t == 1 {
                0.5 * (d as f64 * (LN_2PI + libm::log(beta)) + coef * coef * sq / beta)
            } else {
                let var_post = (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - ab) * beta;
                let ratio = var_post / beta;
                0.5 * (d as f64 * (ratio - 1.0 - libm::log(ratio)) + coef * coef * sq / beta)
            };
            bound[i] += scale * term;
        }
    }
    let ll: Vec<f64> = bound.into_iter().map(|b| -b).collect();
    if ll.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("log-likelihood bound is not finite".into()));
    }
    Ok(ll)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
}

impl GaussianSummary {
    /// Sample mean and unbiased covariance of the rows of `x`.
    pub fn from_samples(x: &Matrix) -> Result<Self> {
        let (n, d) = x.shape();
        if n < 2 {
            return Err(Error::contract("a Gaussian summary needs at least two samples"));
        }
        let mean = x.col_means();
        let mut centered = x.clone();
        for i in 0..n {
            for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        let mut covariance = centered.transpose().matmul(&centered)?;
        covariance.scale(1.0 / (n - 1) as f64);
        debug_assert_eq!(covariance.shape(), (d, d));
        Ok(Self { mean, covariance })
    }
}

/// Symmetric PSD square root by eigen-decomposition; `None` if an eigenvalue is
/// clearly negative.
fn psd_sqrt(m: &Matrix) -> Result<Option<Matrix>> {
    let (vals, vecs) = symmetric_eigen(m)?;
    let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    if vals.iter().any(|&v| v < -1e-10 * scale) {
        return Ok(None);
    }
    let n = vals.len();
    let mut out = Matrix::zeros(n, n);
    for (k, &v) in vals.iter().enumerate() {
        let s = libm::sqrt(v.max(0.0));
        for i in 0..n {
            let a = vecs[(i, k)] * s;
            for j in 0..n {
                out[(i, j)] += a * vecs[(j, k)];
            }
        }
    }
    Ok(Some(out))
}

fn trace_sqrt_product(a: &Matrix, b: &Matrix) -> Result<Option<f64>> {
    // tr((A B)^{1/2}) = tr((A^{1/2} B A^{1/2})^{1/2}), the inner product being symmetric
    let Some(ra) = psd_sqrt(a)? else { return Ok(None) };
    let inner = ra.matmul(b)?.matmul(&ra)?;
    let (vals, _) = symmetric_eigen(&inner)?;
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if vals.iter().any(|&v| v < -1e-10 * scale) {
        return Ok(None);
    }
    Ok(Some(vals.iter().map(|v| libm::sqrt(v.max(0.0))).sum()))
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, retried with `1e-6 I`
/// added to both covariances if the square root is not usable.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.covariance.shape() != (d, d) || b.covariance.shape() != (d, d) {
        return Err(Error::shape("Gaussian summaries of different dimension"));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let trace = |m: &Matrix| (0..d).map(|i| m[(i, i)]).sum::<f64>();
    let mut sa = a.covariance.clone();
    let mut sb = b.covariance.clone();
    let mut cross = trace_sqrt_product(&sa, &sb)?;
    if cross.is_none_or(|c| !c.is_finite()) {
        for i in 0..d {
            sa[(i, i)] += 1e-6;
            sb[(i, i)] += 1e-6;
        }
        cross = trace_sqrt_product(&sa, &sb)?;
    }
    let cross = cross
        .filter(|c| c.is_finite())
        .ok_or_else(|| Error::Numeric("covariance square root failed after regularization".into()))?;
    Ok((mean_term + trace(&sa) + trace(&sb) - 2.0 * cross).max(0.0))
}

/// Linear projection onto the leading principal directions of a fit set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `dim x components`, columns ordered by decreasing variance.
    pub components: Matrix,
}

impl Pca {
    pub fn fit(x: &Matrix, components: usize) -> Result<Self> {
        let summary = GaussianSummary::from_samples(x)?;
        let d = x.cols();
        let k = components.min(d);
        let (_, vecs) = symmetric_eigen(&summary.covariance)?;
        let cols: Vec<usize> = (0..k).map(|c| d - 1 - c).collect();
        Ok(Self { mean: summary.mean, components: vecs.select_cols(&cols) })
    }

    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape(format!("PCA fit on {} columns, got {}", self.mean.len(), x.cols())));
        }
        let mut centered = x.clone();
        for i in 0..x.rows() {
            for (v, m) in centered.row_mut(i).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centered.matmul(&self.components)
    }
}

/// Fréchet distance between two sample sets in the principal subspace of `real`.
pub fn frechet_in_pca(real: &Matrix, generated: &Matrix, components: usize) -> Result<f64> {
    let pca = Pca::fit(real, components)?;
    let a = GaussianSummary::from_samples(&pca.project(real)?)?;
    let b = GaussianSummary::from_samples(&pca.project(generated)?)?;
    frechet_distance(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recon_examples() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(recon_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(recon_loss(&x, &x.map(|v| v + 1.0)).unwrap(), 1.0);
        assert!(recon_loss(&x, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        let id = GaussianSummary { mean: vec![0.0, 0.0], covariance: Matrix::identity(2) };
        assert!(frechet_distance(&id, &id).unwrap().abs() < 1e-12);
        let shifted = GaussianSummary { mean: vec![3.0, -1.0], covariance: Matrix::identity(2) };
        assert!((frechet_distance(&id, &shifted).unwrap() - 10.0).abs() < 1e-10);
        let a = GaussianSummary { mean: vec![1.0], covariance: Matrix::from_rows(&[[4.0]]).unwrap() };
        let b = GaussianSummary { mean: vec![-1.0], covariance: Matrix::from_rows(&[[0.25]]).unwrap() };
        assert!((frechet_distance(&a, &b).unwrap() - (4.0 + 1.5 * 1.5)).abs() < 1e-10);
    }

    #[test]
    fn pca_keeps_dominant_axis() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [10.0, 0.1], [-10.0, -0.1], [5.0, 0.0]]).unwrap();
        let p = Pca::fit(&x, 1).unwrap();
        assert!(p.components[(0, 0)].abs() > 0.99);
        assert_eq!(p.project(&x).unwrap().shape(), (4, 1));
    }
}
