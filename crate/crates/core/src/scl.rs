//! Soft contrastive loss with a Student-t kernel over Poincaré-ball distances.
//!
//! Euclidean latents are mapped into the unit ball by `u = tanh(gamma |z|) z / |z|`
//! (norm clipped below 1); pairwise hyperbolic distances `D` feed the kernel
//! `S = (1 + D^2 / nu)^(-(nu + 1) / 2)`. Quantization keeps working on the raw
//! latents; only this loss sees the ball.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    /// Degrees of freedom of the t-kernel.
    pub nu: f64,
    /// Upper bound on projected norms.
    pub max_norm: f64,
    /// Slope of the tanh projection.
    pub gamma: f64,
    /// Scaling of the positive-pair term.
    #[serde(default)]
    pub positive_weight: PositiveWeight,
}

/// How the `-log S_ii` terms are weighted against the normalizers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveWeight {
    /// Plain sum over the batch.
    #[default]
    Sum,
    /// Batch mean, on the same `1 / N` scale as the normalizer terms.
    Mean,
}

impl PositiveWeight {
    fn factor(self, n: usize) -> f64 {
        match self {
            Self::Sum => 1.0,
            Self::Mean => 1.0 / n as f64,
        }
    }
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { nu: 0.1, max_norm: 1.0 - 1e-5, gamma: 0.1, positive_weight: PositiveWeight::Sum }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) || !(self.gamma > 0.0) || !(self.max_norm > 0.0 && self.max_norm < 1.0) {
            return Err(Error::contract(format!("invalid kernel configuration {self:?}")));
        }
        Ok(())
    }
}

const ACOSH_FLOOR: f64 = 1e-15;

pub fn project_to_ball(z: &[f64], config: &KernelConfig) -> Vec<f64> {
    let n = libm::sqrt(dot(z, z));
    if n == 0.0 {
        return vec![0.0; z.len()];
    }
    let f = libm::tanh(config.gamma * n).min(config.max_norm);
    z.iter().map(|v| v * f / n).collect()
}

/// [`project_to_ball`] applied to every row.
pub fn project_rows(z: &Matrix, config: &KernelConfig) -> Matrix {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        out.row_mut(i).copy_from_slice(&project_to_ball(z.row(i), config));
    }
    out
}

/// Gradient with respect to `z` of a loss whose gradient at `project_rows(z)` is `grad_u`.
pub fn project_rows_backward(z: &Matrix, grad_u: &Matrix, config: &KernelConfig) -> Result<Matrix> {
    if z.shape() != grad_u.shape() {
        return Err(Error::shape("projection gradient does not match its input"));
    }
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        project_backward(z.row(i), grad_u.row(i), config, out.row_mut(i));
    }
    Ok(out)
}

/// Pulls `grad_u` back through [`project_to_ball`].
fn project_backward(z: &[f64], grad_u: &[f64], config: &KernelConfig, out: &mut [f64]) {
    let n = libm::sqrt(dot(z, z));
    if n < 1e-12 {
        // d u / d z = gamma I at the origin
        for (o, g) in out.iter_mut().zip(grad_u) {
            *o += config.gamma * g;
        }
        return;
    }
    let t = libm::tanh(config.gamma * n);
    let (f, df) = if t > config.max_norm { (config.max_norm, 0.0) } else { (t, config.gamma * (1.0 - t * t)) };
    let radial = (df - f / n) * dot(z, grad_u) / (n * n);
    for ((o, g), zv) in out.iter_mut().zip(grad_u).zip(z) {
        *o += f / n * g + radial * zv;
    }
}

/// `x - 1` for the arcosh argument `x = 1 + 2|u - v|^2 / ((1 - |u|^2)(1 - |v|^2))`.
#[inline]
fn acosh_excess(u: &[f64], v: &[f64], uu: f64, vv: f64) -> (f64, f64, f64, f64) {
    let delta: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    let alpha = 1.0 - uu;
    let beta = 1.0 - vv;
    (2.0 * delta / (alpha * beta), delta, alpha, beta)
}

#[inline]
fn acosh1p(y: f64) -> f64 {
    // arcosh(1 + y) = log1p(y + sqrt(y (y + 2)))
    libm::log1p(y + libm::sqrt(y * (y + 2.0)))
}

pub fn poincare_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!("points of dimension {} and {}", u.len(), v.len())));
    }
    let (uu, vv) = (dot(u, u), dot(v, v));
    if uu >= 1.0 || vv >= 1.0 {
        return Err(Error::contract("points must lie strictly inside the unit ball"));
    }
    let (y, ..) = acosh_excess(u, v, uu, vv);
    Ok(acosh1p(y.max(ACOSH_FLOOR)))
}

pub fn t_kernel(distance: f64, nu: f64) -> f64 {
    libm::pow(1.0 + distance * distance / nu, -(nu + 1.0) / 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SclOutput {
    pub value: f64,
    pub grad_z: Matrix,
    pub grad_z_plus: Matrix,
}

/// Soft contrastive loss
/// `(1 / 2N) sum_i (log sum_j S_ij + log sum_j S_ji) - sum_i log S_ii`
/// with `S_ij = t_kernel(D(z_i, z_plus_j))`; the last sum becomes a mean
/// under [`PositiveWeight::Mean`].
pub fn scl_loss(z: &Matrix, z_plus: &Matrix, config: &KernelConfig) -> Result<SclOutput> {
    config.validate()?;
    if z.shape() != z_plus.shape() {
        return Err(Error::shape(format!(
            "anchors are {}x{}, augmented views {}x{}",
            z.rows(),
            z.cols(),
            z_plus.rows(),
            z_plus.cols()
        )));
    }
    let n = z.rows();
    if n == 0 {
        return Err(Error::contract("contrastive loss needs a non-empty batch"));
    }
    let d = z.cols();
    let nu = config.nu;

    let u = project_rows(z, config);
    let v = project_rows(z_plus, config);
    let uu: Vec<f64> = u.row_iter().map(|r| dot(r, r)).collect();
    let vv: Vec<f64> = v.row_iter().map(|r| dot(r, r)).collect();

    // kernel matrix and its derivative with respect to y = x - 1
    let mut s = Matrix::zeros(n, n);
    let mut ds_dy = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (y_raw, ..) = acosh_excess(u.row(i), v.row(j), uu[i], vv[j]);
            let y = y_raw.max(ACOSH_FLOOR);
            let dist = acosh1p(y);
            let q = dist * dist;
            let base = 1.0 + q / nu;
            let sij = libm::pow(base, -(nu + 1.0) / 2.0);
            // dq/dy = 2 arcosh(1+y) / sqrt(y (y + 2)), -> 2 as y -> 0
            let ratio = if y < 1e-8 { 1.0 - y / 3.0 } else { dist / libm::sqrt(y * (y + 2.0)) };
            let dq_dy = if y_raw < ACOSH_FLOOR { 0.0 } else { 2.0 * ratio };
            let ds_dq = -(nu + 1.0) / (2.0 * nu) * sij / base;
            s[(i, j)] = sij;
            ds_dy[(i, j)] = ds_dq * dq_dy;
        }
    }

    let row_sums: Vec<f64> = s.row_iter().map(|r| r.iter().sum()).collect();
    let mut col_sums = vec![0.0; n];
    for r in s.row_iter() {
        axpy(1.0, r, &mut col_sums);
    }
    let inv_2n = 1.0 / (2.0 * n as f64);
    let pos = config.positive_weight.factor(n);
    let mut value = 0.0;
    for i in 0..n {
        value += inv_2n * (libm::log(row_sums[i]) + libm::log(col_sums[i])) - pos * libm::log(s[(i, i)]);
    }
    if !value.is_finite() {
        return Err(Error::Numeric(format!("contrastive loss is {value}")));
    }

    let mut grad_u = Matrix::zeros(n, d);
    let mut grad_v = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            let mut dl_ds = inv_2n * (1.0 / row_sums[i] + 1.0 / col_sums[j]);
            if i == j {
                dl_ds -= pos / s[(i, i)];
            }
            let g = dl_ds * ds_dy[(i, j)];
            if g == 0.0 {
                continue;
            }
            let (_, delta, alpha, beta) = acosh_excess(u.row(i), v.row(j), uu[i], vv[j]);
            // dy/du = 4 (u - v) / (alpha beta) + 4 delta u / (alpha^2 beta)
            let c_diff = 4.0 / (alpha * beta);
            let c_u = 4.0 * delta / (alpha * alpha * beta);
            let c_v = 4.0 * delta / (alpha * beta * beta);
            let (ui, vj) = (u.row(i), v.row(j));
            let gu = grad_u.row_mut(i);
            for k in 0..d {
                gu[k] += g * (c_diff * (ui[k] - vj[k]) + c_u * ui[k]);
            }
            let gv = grad_v.row_mut(j);
            for k in 0..d {
                gv[k] += g * (c_diff * (vj[k] - ui[k]) + c_v * vj[k]);
            }
        }
    }

    let grad_z = project_rows_backward(z, &grad_u, config)?;
    let grad_z_plus = project_rows_backward(z_plus, &grad_v, config)?;
    Ok(SclOutput { value, grad_z, grad_z_plus })
}
