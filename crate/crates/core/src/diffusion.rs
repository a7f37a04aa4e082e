//! Conditional DDPM decoder.
//!
//! The noise predictor sees `[x_t | sum_l (w_{s_l}^l + e_l) | time embedding]`
//! where `w` are the codes on the sample's path and `e_l` learned level
//! embeddings. Timesteps are 1-based throughout (`1..=T`).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::htc::{CodePath, TreeCodebook};
use crate::linalg::{axpy, Matrix};
use crate::nn::{Activation, Mlp, MlpGrads};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02, kind: ScheduleKind::Linear }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

pub fn make_schedule(spec: &ScheduleSpec) -> Result<DiffusionSchedule> {
    let ScheduleSpec { steps, beta_start, beta_end, kind } = *spec;
    if steps == 0 {
        return Err(Error::contract("a diffusion schedule needs T >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::contract(format!("invalid beta range {beta_start}..{beta_end}")));
    }
    let betas = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|k| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    DiffusionSchedule::from_betas(betas)
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::contract("a diffusion schedule needs T >= 1"));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) || betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::contract("betas must be non-decreasing within (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let sigmas = betas.iter().enumerate().map(|(k, b)| if k == 0 { 0.0 } else { libm::sqrt(*b) }).collect();
        Ok(Self { betas, alphas, alpha_bars, sigmas })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas up to and including `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::contract(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &DiffusionSchedule) -> Vec<f64> {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// Sinusoidal embedding of a timestep: `[sin(t w_k).., cos(t w_k)..]`,
/// `w_k = 10000^(-k / half)`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half.max(1) as f64);
        let phase = t as f64 * freq;
        out[k] = libm::sin(phase);
        out[half + k] = libm::cos(phase);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionParams {
    /// One learned embedding per tree level (`depth x latent_dim`).
    pub level_embeddings: Matrix,
    pub time_dim: usize,
    /// Per-level factors applied to code vectors before they enter the condition.
    pub level_weights: Vec<f64>,
}

impl ConditionParams {
    pub fn depth(&self) -> usize {
        self.level_embeddings.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.level_embeddings.cols()
    }

    pub fn dim(&self) -> usize {
        self.latent_dim() + self.time_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_weights.len() != self.depth() {
            return Err(Error::shape(format!("{} level weights for depth {}", self.level_weights.len(), self.depth())));
        }
        if let Some(w) = self.level_weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::contract(format!("level weights must be finite, got {w}")));
        }
        Ok(())
    }

    /// Chooses level weights and embeddings so the code part of the condition
    /// equals `sum_l (w^l - parent(w^l)) / r_l` minus its mean over leaves,
    /// `r_l` being the root-mean-square parent offset of level `l`. Every level
    /// then contributes on the same scale whatever the code geometry.
    pub fn normalize_to(&mut self, codebook: &TreeCodebook) -> Result<()> {
        let depth = codebook.depth();
        if depth != self.depth() || codebook.dim() != self.latent_dim() {
            return Err(Error::shape("condition parameters do not match the codebook"));
        }
        let mut inv_rms = vec![0.0; depth + 1];
        let mut parents = Matrix::from_vec(1, codebook.dim(), codebook.root())?;
        for l in 1..=depth {
            let codes = codebook.level(l);
            let sq: f64 = (0..codes.rows()).map(|j| crate::linalg::sq_dist(codes.row(j), parents.row(j / 2))).sum();
            let rms = libm::sqrt(sq / codes.rows() as f64);
            inv_rms[l - 1] = if rms > 1e-12 { 1.0 / rms } else { 1.0 };
            parents = codes.clone();
        }
        // sum_l a_l (w_l - w_{l-1}) = sum_l (a_l - a_{l+1}) w_l - a_1 root, the root being constant
        for l in 1..=depth {
            let weight = inv_rms[l - 1] - inv_rms[l];
            self.level_weights[l - 1] = weight;
            let mean = codebook.level(l).col_means();
            for (e, m) in self.level_embeddings.row_mut(l - 1).iter_mut().zip(&mean) {
                *e = -weight * m;
            }
        }
        Ok(())
    }
}

/// `sum_l (a_l w_{s_l}^l + e_l)` concatenated with the time embedding of `t`,
/// `a_l` being the level weights.
pub fn condition_vector(
    path: &CodePath,
    t: usize,
    codebook: &TreeCodebook,
    cond: &ConditionParams,
) -> Result<Vec<f64>> {
    if !path.is_valid_descent() || path.depth() != codebook.depth() {
        return Err(Error::contract(format!("{path:?} is not a root-to-leaf path of the codebook")));
    }
    if cond.depth() != codebook.depth() || cond.latent_dim() != codebook.dim() {
        return Err(Error::shape("condition parameters do not match the codebook"));
    }
    let mut c = vec![0.0; cond.dim()];
    let d = cond.latent_dim();
    for l in 1..=codebook.depth() {
        axpy(cond.level_weights[l - 1], codebook.code(l, path.at(l)), &mut c[..d]);
        axpy(1.0, cond.level_embeddings.row(l - 1), &mut c[..d]);
    }
    c[d..].copy_from_slice(&time_embedding(t, cond.time_dim));
    Ok(c)
}

/// Anything that predicts the injected noise from `(x_t, t, path)`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Matrix, t: &[usize], paths: &[CodePath]) -> Result<Matrix>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionDecoder {
    pub net: Mlp,
    pub cond: ConditionParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads {
    pub net: MlpGrads,
    pub level_embeddings: Matrix,
}

impl DiffusionDecoder {
    pub fn new<R: Rng + ?Sized>(
        data_dim: usize,
        latent_dim: usize,
        depth: usize,
        hidden: &[usize],
        time_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![data_dim + latent_dim + time_dim];
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        let net = Mlp::new(&widths, activation, rng)?;
        let mut level_embeddings = Matrix::zeros(depth, latent_dim);
        for v in level_embeddings.as_mut_slice() {
            *v = 0.01 * rng::normal(rng);
        }
        Ok(Self { net, cond: ConditionParams { level_embeddings, time_dim, level_weights: vec![1.0; depth] } })
    }

    pub fn from_parts(net: Mlp, cond: ConditionParams) -> Result<Self> {
        cond.validate()?;
        let data_dim = net.output_dim();
        if net.input_dim() != data_dim + cond.dim() {
            return Err(Error::shape(format!(
                "decoder input width {} != data {} + condition {}",
                net.input_dim(),
                data_dim,
                cond.dim()
            )));
        }
        Ok(Self { net, cond })
    }

    pub fn data_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn input(&self, x_t: &Matrix, t: &[usize], paths: &[CodePath], codebook: &TreeCodebook) -> Result<Matrix> {
        if x_t.cols() != self.data_dim() || t.len() != x_t.rows() || paths.len() != x_t.rows() {
            return Err(Error::shape(format!(
                "{}x{} noisy batch with {} timesteps and {} paths for a {}-dim decoder",
                x_t.rows(),
                x_t.cols(),
                t.len(),
                paths.len(),
                self.data_dim()
            )));
        }
        let dd = self.data_dim();
        let mut input = Matrix::zeros(x_t.rows(), self.net.input_dim());
        for i in 0..x_t.rows() {
            let c = condition_vector(&paths[i], t[i], codebook, &self.cond)?;
            let row = input.row_mut(i);
            row[..dd].copy_from_slice(x_t.row(i));
            row[dd..].copy_from_slice(&c);
        }
        Ok(input)
    }

    pub fn bind<'a>(&'a self, codebook: &'a TreeCodebook) -> BoundDecoder<'a> {
        BoundDecoder { decoder: self, codebook }
    }

    /// Parameter slices: network tensors followed by the level embeddings.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.net.tensors_mut();
        t.push(self.cond.level_embeddings.as_mut_slice());
        t
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        let mut m = self.net.decay_mask();
        m.push(false);
        m
    }
}

impl DecoderGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.net.tensors();
        t.push(self.level_embeddings.as_slice());
        t
    }
}

/// A decoder paired with the codebook that supplies its conditions.
#[derive(Debug, Clone, Copy)]
pub struct BoundDecoder<'a> {
    pub decoder: &'a DiffusionDecoder,
    pub codebook: &'a TreeCodebook,
}

impl NoisePredictor for BoundDecoder<'_> {
    fn predict_noise(&self, x_t: &Matrix, t: &[usize], paths: &[CodePath]) -> Result<Matrix> {
        let input = self.decoder.input(x_t, t, paths, self.codebook)?;
        self.decoder.net.predict(&input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdpOutput {
    pub value: f64,
    pub grads: DecoderGrads,
    /// Gradient on every codebook level through the condition vectors.
    pub grad_codes: Vec<Matrix>,
}

/// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` for every row.
pub fn draw_noise<R: Rng + ?Sized>(rows: usize, dim: usize, steps: usize, rng: &mut R) -> (Vec<usize>, Matrix) {
    let t = (0..rows).map(|_| rng.random_range(1..=steps)).collect();
    let mut eps = Matrix::zeros(rows, dim);
    rng::fill_normal(rng, eps.as_mut_slice());
    (t, eps)
}

fn noisy_batch(x0: &Matrix, t: &[usize], eps: &Matrix, schedule: &DiffusionSchedule) -> Result<Matrix> {
    let mut x_t = Matrix::zeros(x0.rows(), x0.cols());
    for i in 0..x0.rows() {
        schedule.check_step(t[i])?;
        x_t.row_mut(i).copy_from_slice(&q_sample(x0.row(i), t[i], eps.row(i), schedule));
    }
    Ok(x_t)
}

/// `mean_i |eps_i - eps_theta(x_t, t_i, s_i)|^2` for given timesteps and noise.
pub fn ddp_loss_value<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x0: &Matrix,
    paths: &[CodePath],
    schedule: &DiffusionSchedule,
    t: &[usize],
    eps: &Matrix,
) -> Result<f64> {
    if x0.shape() != eps.shape() || t.len() != x0.rows() {
        return Err(Error::shape("data, noise and timesteps disagree in shape"));
    }
    let x_t = noisy_batch(x0, t, eps, schedule)?;
    let pred = predictor.predict_noise(&x_t, t, paths)?;
    let sq: f64 = pred.as_slice().iter().zip(eps.as_slice()).map(|(p, e)| (e - p) * (e - p)).sum();
    Ok(sq / x0.rows().max(1) as f64)
}

/// Diffusion loss with gradients for fixed timesteps and noise.
pub fn ddp_loss_fixed(
    decoder: &DiffusionDecoder,
    codebook: &TreeCodebook,
    x0: &Matrix,
    paths: &[CodePath],
    schedule: &DiffusionSchedule,
    t: &[usize],
    eps: &Matrix,
) -> Result<DdpOutput> {
    let n = x0.rows();
    if n == 0 {
        return Err(Error::contract("diffusion loss needs a non-empty batch"));
    }
    if x0.shape() != eps.shape() || t.len() != n {
        return Err(Error::shape("data, noise and timesteps disagree in shape"));
    }
    let x_t = noisy_batch(x0, t, eps, schedule)?;
    let input = decoder.input(&x_t, t, paths, codebook)?;
    let (pred, tape) = decoder.net.forward(&input)?;
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad_out = Matrix::zeros(n, decoder.data_dim());
    for ((g, p), e) in grad_out.as_mut_slice().iter_mut().zip(pred.as_slice()).zip(eps.as_slice()) {
        let r = p - e;
        value += r * r;
        *g = 2.0 * r * inv_n;
    }
    value *= inv_n;
    let (net_grads, grad_in) = decoder.net.backward(&tape, &grad_out)?;

    let dd = decoder.data_dim();
    let ld = decoder.cond.latent_dim();
    let mut level_embeddings = Matrix::zeros(codebook.depth(), ld);
    let mut grad_codes: Vec<Matrix> = codebook.levels().iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    for (i, path) in paths.iter().enumerate() {
        let gc = &grad_in.row(i)[dd..dd + ld];
        for l in 1..=codebook.depth() {
            axpy(decoder.cond.level_weights[l - 1], gc, grad_codes[l - 1].row_mut(path.at(l)));
            axpy(1.0, gc, level_embeddings.row_mut(l - 1));
        }
    }
    Ok(DdpOutput { value, grads: DecoderGrads { net: net_grads, level_embeddings }, grad_codes })
}

/// Diffusion loss with freshly drawn timesteps and noise.
pub fn ddp_loss<R: Rng + ?Sized>(
    decoder: &DiffusionDecoder,
    codebook: &TreeCodebook,
    x0: &Matrix,
    paths: &[CodePath],
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<DdpOutput> {
    let (t, eps) = draw_noise(x0.rows(), x0.cols(), schedule.steps(), rng);
    ddp_loss_fixed(decoder, codebook, x0, paths, schedule, &t, &eps)
}

/// One ancestral step
/// `x_{t-1} = (x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) eps_theta) / sqrt(alpha_t) + sigma_t noise`.
/// `noise = None` runs the deterministic mean update.
pub fn reverse_step<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x_t: &Matrix,
    t: usize,
    paths: &[CodePath],
    schedule: &DiffusionSchedule,
    noise: Option<&Matrix>,
) -> Result<Matrix> {
    schedule.check_step(t)?;
    let ts = vec![t; x_t.rows()];
    let eps = predictor.predict_noise(x_t, &ts, paths)?;
    if eps.shape() != x_t.shape() {
        return Err(Error::shape("noise prediction does not match the sample shape"));
    }
    let alpha = schedule.alpha(t);
    let coef = (1.0 - alpha) / libm::sqrt(1.0 - schedule.alpha_bar(t));
    let inv_sqrt_alpha = 1.0 / libm::sqrt(alpha);
    let sigma = schedule.sigma(t);
    let mut out = Matrix::zeros(x_t.rows(), x_t.cols());
    for (k, o) in out.as_mut_slice().iter_mut().enumerate() {
        *o = inv_sqrt_alpha * (x_t.as_slice()[k] - coef * eps.as_slice()[k]);
    }
    if let Some(z) = noise {
        if sigma > 0.0 {
            if z.shape() != x_t.shape() {
                return Err(Error::shape("injected noise does not match the sample shape"));
            }
            axpy(sigma, z.as_slice(), out.as_mut_slice());
        }
    }
    Ok(out)
}

/// Ancestral sampling from `x_T ~ N(0, I)` for every path.
pub fn generate<P: NoisePredictor + ?Sized>(
    predictor: &P,
    paths: &[CodePath],
    data_dim: usize,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(paths.len(), data_dim);
    // each sample owns its noise stream so results do not depend on batch composition
    let mut rngs: Vec<_> = (0..paths.len()).map(|i| rng::stream(seed, Domain::Generate, i as u64)).collect();
    for (i, r) in rngs.iter_mut().enumerate() {
        rng::fill_normal(r, out.row_mut(i));
    }
    let mut noise = Matrix::zeros(paths.len(), data_dim);
    for t in (1..=schedule.steps()).rev() {
        if t > 1 {
            for (i, r) in rngs.iter_mut().enumerate() {
                rng::fill_normal(r, noise.row_mut(i));
            }
        }
        out = reverse_step(predictor, &out, t, paths, schedule, Some(&noise))?;
    }
    Ok(out)
}

/// First timestep of the reconstruction trajectory for a start fraction of `T`.
pub fn reconstruction_start(steps: usize, fraction: f64) -> usize {
    let t = libm::round(steps as f64 * fraction) as usize;
    t.clamp(1, steps)
}

/// Deterministic reconstruction: noise-free partial forward to `start`
/// (`x_start = sqrt(alpha_bar) x`), then noise-free reverse steps down to 0.
pub fn reconstruct_with<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x: &Matrix,
    paths: &[CodePath],
    schedule: &DiffusionSchedule,
    start: usize,
) -> Result<Matrix> {
    schedule.check_step(start)?;
    let mut cur = x.map(|v| v * libm::sqrt(schedule.alpha_bar(start)));
    for t in (1..=start).rev() {
        cur = reverse_step(predictor, &cur, t, paths, schedule, None)?;
    }
    Ok(cur)
}
