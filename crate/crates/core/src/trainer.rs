//! Model state, the joint objective and the training loop.
//!
//! Training runs in two phases. During the warm-up epochs only the contrastive
//! loss shapes the encoder; the tree codebook is then fitted to a full
//! embedding pass and the joint objective
//! `SCL + lambda_hql * HQL + lambda_ddp * DDP` takes over.
//!
//! Every source of randomness is a stream keyed by `(seed, purpose, counter)`,
//! so a checkpoint only needs the counters to resume bit-exactly.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{knn_pairs, sample_augmented, AugmentedPairs, Dataset};
use crate::diffusion::{
    self, ddp_loss_fixed, make_schedule, DecoderGrads, DiffusionDecoder, DiffusionSchedule, ScheduleSpec,
};
use crate::error::{Error, Result};
use crate::htc::{hql_loss, init_codebook, quantize_batch, quantize_path, CodePath, TreeCodebook};
use crate::linalg::{axpy, Matrix};
use crate::nn::{Activation, Mlp, MlpGrads};
use crate::optim::{adamw_step, clip_global_norm, cosine_lr, AdamWConfig, OptimizerState};
use crate::rng::{self, Domain};
use crate::scl::{project_rows, project_rows_backward, scl_loss, KernelConfig};

/// Datasets below this size get the desk-scale depth and step count.
pub const DESK_SCALE_LIMIT: usize = 20_000;
pub const FULL_SCALE_DEPTH: usize = 10;
pub const FULL_SCALE_STEPS: usize = 1000;
pub const DESK_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Contrastive-only epochs before the codebook is fitted.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Tree depth `L`; chosen from the dataset size when absent.
    pub depth: Option<usize>,
    /// Diffusion step count `T`; chosen from the dataset size when absent.
    pub diffusion_steps: Option<usize>,
    pub beta_start: f64,
    pub beta_end: f64,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub time_dim: usize,
    pub activation: Activation,
    pub lambda_hql: f64,
    pub lambda_ddp: f64,
    /// Weight of the code-to-embedding consistency term inside HQL.
    pub hql_consistency: f64,
    pub kernel: KernelConfig,
    /// Neighbors considered when drawing augmented views.
    pub aug_k: usize,
    pub clip_norm: f64,
    pub adamw: AdamWConfig,
    /// Start of the deterministic reconstruction trajectory as a fraction of `T`.
    pub reconstruction_start: f64,
    pub code_space: CodeSpace,
    /// Rescale and center each level of the decoder condition whenever the
    /// codebook is fitted.
    pub normalize_condition: bool,
}

/// Coordinates in which embeddings meet the tree codebook.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeSpace {
    /// Raw encoder outputs.
    #[default]
    Latent,
    /// Encoder outputs mapped into the Poincaré ball by the contrastive
    /// loss projection.
    Ball,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 50,
            warmup_epochs: 5,
            batch_size: 1000,
            lr: 0.005,
            depth: None,
            diffusion_steps: None,
            beta_start: 1e-4,
            beta_end: 0.02,
            latent_dim: 64,
            encoder_hidden: vec![256, 256],
            decoder_hidden: vec![256, 256],
            time_dim: 32,
            activation: Activation::Relu,
            lambda_hql: 1.0,
            lambda_ddp: 1.0,
            hql_consistency: 2.0,
            kernel: KernelConfig::default(),
            aug_k: 5,
            clip_norm: 5.0,
            adamw: AdamWConfig::default(),
            reconstruction_start: 0.25,
            code_space: CodeSpace::Latent,
            normalize_condition: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::contract(format!("invalid configuration: {what}")));
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.depth == Some(0) {
            return bad("depth must be >= 1");
        }
        if self.diffusion_steps == Some(0) {
            return bad("diffusion_steps must be >= 1");
        }
        if self.latent_dim == 0 || self.time_dim == 0 {
            return bad("latent_dim and time_dim must be positive");
        }
        if self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.lambda_hql >= 0.0 && self.lambda_ddp >= 0.0 && self.hql_consistency >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.aug_k == 0 {
            return bad("aug_k must be >= 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.reconstruction_start > 0.0 && self.reconstruction_start <= 1.0) {
            return bad("reconstruction_start must lie in (0, 1]");
        }
        self.kernel.validate()?;
        self.schedule_spec(1).map(|_| ())
    }

    /// Fills in depth and step count for a dataset of `n` samples.
    pub fn resolved(&self, n: usize) -> Self {
        let desk = n < DESK_SCALE_LIMIT;
        let mut out = self.clone();
        if out.depth.is_none() {
            out.depth = Some(if desk { desk_depth(n) } else { FULL_SCALE_DEPTH });
        }
        if out.diffusion_steps.is_none() {
            out.diffusion_steps = Some(if desk { DESK_STEPS } else { FULL_SCALE_STEPS });
        }
        out
    }

    pub fn depth_or(&self, n: usize) -> usize {
        self.resolved(n).depth.unwrap_or(FULL_SCALE_DEPTH)
    }

    pub fn schedule_spec(&self, n: usize) -> Result<ScheduleSpec> {
        let spec = ScheduleSpec {
            steps: self.resolved(n).diffusion_steps.unwrap_or(FULL_SCALE_STEPS),
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            kind: diffusion::ScheduleKind::Linear,
        };
        make_schedule(&spec)?;
        Ok(spec)
    }
}

/// Roughly 100 samples per leaf, between 1 and the full-scale depth.
pub fn desk_depth(n: usize) -> usize {
    let mut depth = 1;
    while depth < FULL_SCALE_DEPTH && (n >> (depth + 1)) >= 100 {
        depth += 1;
    }
    depth
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: Mlp,
    pub codebook: TreeCodebook,
    pub decoder: DiffusionDecoder,
    pub schedule: ScheduleSpec,
    pub kernel: KernelConfig,
    #[serde(default)]
    pub code_space: CodeSpace,
}

impl Model {
    /// Freshly initialized parameters; the codebook holds small random codes
    /// until it is fitted.
    pub fn init(config: &TrainConfig, data_dim: usize, depth: usize, schedule: ScheduleSpec) -> Result<Self> {
        let mut widths = vec![data_dim];
        widths.extend_from_slice(&config.encoder_hidden);
        widths.push(config.latent_dim);
        let encoder = Mlp::new(&widths, config.activation, &mut rng::stream(config.seed, Domain::Init, 0))?;
        let decoder = DiffusionDecoder::new(
            data_dim,
            config.latent_dim,
            depth,
            &config.decoder_hidden,
            config.time_dim,
            config.activation,
            &mut rng::stream(config.seed, Domain::Init, 1),
        )?;
        let mut r = rng::stream(config.seed, Domain::Init, 2);
        let levels = (1..=depth)
            .map(|l| {
                let mut m = Matrix::zeros(1 << l, config.latent_dim);
                m.as_mut_slice().iter_mut().for_each(|v| *v = 0.01 * rng::normal(&mut r));
                m
            })
            .collect();
        let codebook = TreeCodebook::from_levels(levels)?;
        Ok(Self { encoder, codebook, decoder, schedule, kernel: config.kernel, code_space: config.code_space })
    }

    /// Consistency checks for parameters that came from outside (e.g. a file).
    pub fn validate(&self) -> Result<()> {
        let enc = Mlp::from_layers(self.encoder.layers().to_vec())?;
        if enc.output_dim() != self.codebook.dim() {
            return Err(Error::shape("encoder output does not match the codebook dimension"));
        }
        let dec = DiffusionDecoder::from_parts(Mlp::from_layers(self.decoder.net.layers().to_vec())?, self.decoder.cond.clone())?;
        if dec.data_dim() != self.encoder.input_dim() {
            return Err(Error::shape("decoder output does not match the data dimension"));
        }
        if dec.cond.depth() != self.codebook.depth() || dec.cond.latent_dim() != self.codebook.dim() {
            return Err(Error::shape("decoder conditioning does not match the codebook"));
        }
        TreeCodebook::from_levels(self.codebook.levels().to_vec())?;
        self.kernel.validate()?;
        make_schedule(&self.schedule)?;
        Ok(())
    }

    pub fn data_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn depth(&self) -> usize {
        self.codebook.depth()
    }

    pub fn diffusion_schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(&self.schedule)
    }

    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        Ok(crate::encoder::encode(&self.encoder, x)?.z)
    }

    /// Encoder outputs expressed in the coordinates of the codebook.
    pub fn to_code_space(&self, z: &Matrix) -> Matrix {
        match self.code_space {
            CodeSpace::Latent => z.clone(),
            CodeSpace::Ball => project_rows(z, &self.kernel),
        }
    }

    /// Embeddings in the coordinates of the codebook.
    pub fn code_points(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.to_code_space(&self.embed(x)?))
    }

    pub fn paths(&self, x: &Matrix) -> Result<Vec<CodePath>> {
        Ok(quantize_batch(&self.codebook, &self.code_points(x)?)?.paths)
    }

    pub fn reconstruct(&self, x: &Matrix, start_fraction: f64) -> Result<Matrix> {
        let paths = self.paths(x)?;
        let schedule = self.diffusion_schedule()?;
        let start = diffusion::reconstruction_start(schedule.steps(), start_fraction);
        diffusion::reconstruct_with(&self.decoder.bind(&self.codebook), x, &paths, &schedule, start)
    }

    pub fn generate(&self, paths: &[CodePath], seed: u64) -> Result<Matrix> {
        for p in paths {
            if p.depth() != self.depth() || !p.is_valid_descent() {
                return Err(Error::contract(format!("{p:?} is not a root-to-leaf path of this tree")));
            }
        }
        let schedule = self.diffusion_schedule()?;
        diffusion::generate(&self.decoder.bind(&self.codebook), paths, self.data_dim(), &schedule, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Contrastive loss only.
    Warmup,
    /// Full objective.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub scl: f64,
    pub hql: f64,
    pub ddp: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub hql: f64,
    pub ddp: f64,
    pub consistency: f64,
}

impl LossWeights {
    pub fn from_config(config: &TrainConfig) -> Self {
        Self { hql: config.lambda_hql, ddp: config.lambda_ddp, consistency: config.hql_consistency }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: MlpGrads,
    pub codes: Vec<Matrix>,
    pub decoder: Option<DecoderGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub components: LossComponents,
    pub grads: ModelGrads,
    pub paths: Vec<CodePath>,
}

/// Timesteps and noise for the diffusion term of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DdpNoise {
    pub t: Vec<usize>,
    pub eps: Matrix,
}

fn check_component(step: u64, name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Training { step, component: name.into() })
    }
}

/// Joint objective on a batch `x` with augmented views `x_plus`.
///
/// In the warm-up phase only the contrastive term is evaluated. The diffusion
/// term is skipped when its weight is zero. `step` only labels errors.
pub fn total_loss(
    model: &Model,
    x: &Matrix,
    x_plus: &Matrix,
    weights: &LossWeights,
    phase: Phase,
    noise: &DdpNoise,
    step: u64,
) -> Result<LossOutput> {
    let n = x.rows();
    if x_plus.shape() != x.shape() {
        return Err(Error::shape("batch and augmented views differ in shape"));
    }
    let both = x.vstack(x_plus)?;
    let (z_all, tape) = model.encoder.forward(&both)?;
    let z = Matrix::from_vec(n, z_all.cols(), z_all.as_slice()[..n * z_all.cols()].to_vec())?;
    let z_plus = Matrix::from_vec(n, z_all.cols(), z_all.as_slice()[n * z_all.cols()..].to_vec())?;

    let scl = scl_loss(&z, &z_plus, &model.kernel).map_err(|e| match e {
        Error::Numeric(_) => Error::Training { step, component: "scl".into() },
        other => other,
    })?;
    check_component(step, "scl", scl.value)?;
    let mut grad_z = scl.grad_z;
    let mut components = LossComponents { scl: scl.value, ..Default::default() };
    let mut codes: Vec<Matrix> = model.codebook.levels().iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let mut decoder = None;
    let mut paths = Vec::new();

    if phase == Phase::Joint {
        let points = model.to_code_space(&z);
        paths = quantize_batch(&model.codebook, &points)?.paths;
        if weights.hql > 0.0 {
            let hql = hql_loss(&points, &model.codebook, &paths, weights.consistency)?;
            check_component(step, "hql", hql.value)?;
            components.hql = hql.value;
            let hql_grad_z = match model.code_space {
                CodeSpace::Latent => hql.grad_z,
                CodeSpace::Ball => project_rows_backward(&z, &hql.grad_z, &model.kernel)?,
            };
            axpy(weights.hql, hql_grad_z.as_slice(), grad_z.as_mut_slice());
            for (g, h) in codes.iter_mut().zip(&hql.grad_codes) {
                axpy(weights.hql, h.as_slice(), g.as_mut_slice());
            }
        }
        if weights.ddp > 0.0 {
            let ddp = ddp_loss_fixed(&model.decoder, &model.codebook, x, &paths, &model.diffusion_schedule()?, &noise.t, &noise.eps)?;
            check_component(step, "ddp", ddp.value)?;
            components.ddp = ddp.value;
            for (g, h) in codes.iter_mut().zip(&ddp.grad_codes) {
                axpy(weights.ddp, h.as_slice(), g.as_mut_slice());
            }
            let mut dg = ddp.grads;
            dg.net.scale(weights.ddp);
            dg.level_embeddings.scale(weights.ddp);
            decoder = Some(dg);
        }
    }
    components.total = components.scl + weights.hql * components.hql + weights.ddp * components.ddp;
    check_component(step, "total", components.total)?;

    let grad_all = grad_z.vstack(&scl.grad_z_plus)?;
    let (encoder, _) = model.encoder.backward(&tape, &grad_all)?;
    Ok(LossOutput { components, grads: ModelGrads { encoder, codes, decoder }, paths })
}

/// Counters that, together with the config, determine all future randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub codebook_ready: bool,
    pub encoder_opt: OptimizerState,
    pub codebook_opt: OptimizerState,
    pub decoder_opt: OptimizerState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub state: TrainState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub grad_norm: f64,
    pub losses: LossComponents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub steps: usize,
    /// Batch means of every component.
    pub losses: LossComponents,
    /// Non-empty leaves among the training batches of the epoch.
    pub occupied_leaves: usize,
    pub reseeded_nodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainFailure {
    pub error: Error,
    /// State at the end of the last completed epoch, if training had started.
    pub last_good: Option<Box<Checkpoint>>,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self { error, last_good: None }
    }
}

pub struct Trainer<'a> {
    data: &'a Matrix,
    pairs: AugmentedPairs,
    checkpoint: Checkpoint,
    steps_per_epoch: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let n = dataset.len();
        let config = config.resolved(n);
        let depth = config.depth.unwrap_or(FULL_SCALE_DEPTH);
        let model = Model::init(&config, dataset.dim(), depth, config.schedule_spec(n)?)?;
        let state = TrainState {
            epoch: 0,
            step: 0,
            codebook_ready: false,
            encoder_opt: OptimizerState::new(config.adamw),
            codebook_opt: OptimizerState::new(config.adamw),
            decoder_opt: OptimizerState::new(config.adamw),
        };
        Self::resume(dataset, Checkpoint { config, model, state })
    }

    /// Continues from a checkpoint taken at an epoch boundary.
    pub fn resume(dataset: &'a Dataset, checkpoint: Checkpoint) -> Result<Self> {
        let n = dataset.len();
        if n < 2 {
            return Err(Error::contract("training needs at least two samples"));
        }
        checkpoint.config.validate()?;
        checkpoint.model.validate()?;
        if checkpoint.model.data_dim() != dataset.dim() {
            return Err(Error::shape(format!(
                "model expects {} features, dataset has {}",
                checkpoint.model.data_dim(),
                dataset.dim()
            )));
        }
        let pairs = knn_pairs(dataset, checkpoint.config.aug_k)?;
        let batch = checkpoint.config.batch_size.min(n);
        Ok(Self {
            data: &dataset.features,
            pairs,
            steps_per_epoch: (n / batch).max(1),
            checkpoint,
            steps: Vec::new(),
            epochs: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.checkpoint
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    fn total_steps(&self) -> u64 {
        (self.steps_per_epoch * self.checkpoint.config.epochs) as u64
    }

    /// Trains until the configured epoch count. On divergence the error carries
    /// the checkpoint of the last completed epoch.
    pub fn run(&mut self) -> core::result::Result<(), TrainFailure> {
        while self.checkpoint.state.epoch < self.checkpoint.config.epochs {
            let last_good = self.checkpoint.clone();
            if let Err(error) = self.run_epoch() {
                self.checkpoint = last_good.clone();
                return Err(TrainFailure { error, last_good: Some(Box::new(last_good)) });
            }
        }
        if !self.checkpoint.state.codebook_ready {
            // no joint epoch ran; fit the codebook so the model is still usable
            self.fit_codebook()
                .map_err(|error| TrainFailure { error, last_good: Some(Box::new(self.checkpoint.clone())) })?;
        }
        Ok(())
    }

    fn fit_codebook(&mut self) -> Result<()> {
        let ck = &mut self.checkpoint;
        let z = ck.model.code_points(self.data)?;
        ck.model.codebook = init_codebook(&z, ck.model.depth(), ck.config.seed)?;
        if ck.config.normalize_condition {
            ck.model.decoder.cond.normalize_to(&ck.model.codebook)?;
        }
        ck.state.codebook_ready = true;
        Ok(())
    }

    /// One pass over the data.
    pub fn run_epoch(&mut self) -> Result<()> {
        let epoch = self.checkpoint.state.epoch;
        let config = self.checkpoint.config.clone();
        if epoch >= config.warmup_epochs && !self.checkpoint.state.codebook_ready {
            self.fit_codebook()?;
        }
        let phase = if self.checkpoint.state.codebook_ready { Phase::Joint } else { Phase::Warmup };
        let n = self.data.rows();
        let batch = config.batch_size.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(config.seed, Domain::Shuffle, epoch as u64));

        let depth = self.checkpoint.model.depth();
        let mut visits: Vec<Vec<usize>> = (1..=depth).map(|l| vec![0; 1 << l]).collect();
        let mut sums = LossComponents::default();
        let weights = LossWeights::from_config(&config);
        let total_steps = self.total_steps();
        for b in 0..self.steps_per_epoch {
            let idx = &order[b * batch..(b + 1) * batch];
            let record = self.step(idx, phase, &weights, total_steps)?;
            for p in &record.1 {
                for l in 1..=depth {
                    visits[l - 1][p.at(l)] += 1;
                }
            }
            let c = record.0.losses;
            sums.scl += c.scl;
            sums.hql += c.hql;
            sums.ddp += c.ddp;
            sums.total += c.total;
            self.steps.push(record.0);
        }
        let reseeded = if phase == Phase::Joint { self.reseed_unvisited(&visits, epoch)? } else { 0 };
        if phase == Phase::Joint && self.checkpoint.config.normalize_condition {
            let m = &mut self.checkpoint.model;
            m.decoder.cond.normalize_to(&m.codebook)?;
        }
        let k = self.steps_per_epoch as f64;
        self.epochs.push(EpochRecord {
            epoch,
            phase,
            steps: self.steps_per_epoch,
            losses: LossComponents { scl: sums.scl / k, hql: sums.hql / k, ddp: sums.ddp / k, total: sums.total / k },
            occupied_leaves: visits[depth - 1].iter().filter(|&&c| c > 0).count(),
            reseeded_nodes: reseeded,
        });
        log::info!(
            "epoch {epoch} ({phase:?}): total {:.5} scl {:.5} hql {:.5} ddp {:.5}",
            sums.total / k,
            sums.scl / k,
            sums.hql / k,
            sums.ddp / k
        );
        self.checkpoint.state.epoch += 1;
        Ok(())
    }

    fn step(
        &mut self,
        idx: &[usize],
        phase: Phase,
        weights: &LossWeights,
        total_steps: u64,
    ) -> Result<(StepRecord, Vec<CodePath>)> {
        let ck = &mut self.checkpoint;
        let step = ck.state.step;
        let mut r = rng::stream(ck.config.seed, Domain::Step, step);
        let neighbors: Vec<usize> = idx.iter().map(|&i| sample_augmented(&self.pairs, i, &mut r)).collect();
        let x = self.data.select_rows(idx);
        let x_plus = self.data.select_rows(&neighbors);
        let steps = ck.model.schedule.steps;
        let (t, eps) = diffusion::draw_noise(x.rows(), x.cols(), steps, &mut r);
        let out = total_loss(&ck.model, &x, &x_plus, weights, phase, &DdpNoise { t, eps }, step + 1)?;

        let lr = cosine_lr(step, total_steps.max(step + 1), ck.config.lr)?;
        let mut grads = out.grads;
        let joint = phase == Phase::Joint;
        let with_decoder = joint && grads.decoder.is_some();
        let grad_norm = {
            let mut all: Vec<&mut [f64]> = Vec::new();
            for layer in grads.encoder.layers.iter_mut() {
                all.push(layer.weights.as_mut_slice());
                all.push(&mut layer.bias);
            }
            if joint {
                all.extend(grads.codes.iter_mut().map(|m| m.as_mut_slice()));
            }
            if let Some(d) = grads.decoder.as_mut() {
                for layer in d.net.layers.iter_mut() {
                    all.push(layer.weights.as_mut_slice());
                    all.push(&mut layer.bias);
                }
                all.push(d.level_embeddings.as_mut_slice());
            }
            clip_global_norm(&mut all, ck.config.clip_norm)
        };
        if !grad_norm.is_finite() {
            return Err(Error::Training { step: step + 1, component: "gradient".into() });
        }

        let decay = ck.model.encoder.decay_mask();
        adamw_step(&mut ck.model.encoder.tensors_mut(), &grads.encoder.tensors(), &decay, &mut ck.state.encoder_opt, lr)?;
        if joint {
            let g: Vec<&[f64]> = grads.codes.iter().map(Matrix::as_slice).collect();
            let decay = vec![false; g.len()];
            adamw_step(&mut ck.model.codebook.tensors_mut(), &g, &decay, &mut ck.state.codebook_opt, lr)?;
        }
        if with_decoder {
            if let Some(d) = &grads.decoder {
                let decay = ck.model.decoder.decay_mask();
                adamw_step(&mut ck.model.decoder.tensors_mut(), &d.tensors(), &decay, &mut ck.state.decoder_opt, lr)?;
            }
        }
        ck.state.step += 1;
        let record = StepRecord { step: step + 1, epoch: ck.state.epoch, phase, lr, grad_norm, losses: out.components };
        Ok((record, out.paths))
    }

    /// Moves every node no batch visited this epoch onto a random embedding
    /// currently routed to its parent.
    fn reseed_unvisited(&mut self, visits: &[Vec<usize>], epoch: usize) -> Result<usize> {
        let dead: Vec<(usize, usize)> = visits
            .iter()
            .enumerate()
            .flat_map(|(l, v)| v.iter().enumerate().filter(|(_, &c)| c == 0).map(move |(j, _)| (l + 1, j)))
            .collect();
        if dead.is_empty() {
            return Ok(0);
        }
        let ck = &mut self.checkpoint;
        let z = ck.model.code_points(self.data)?;
        let mut r = rng::stream(ck.config.seed, Domain::Reseed, epoch as u64);
        let paths: Vec<CodePath> = z.row_iter().map(|row| quantize_path(&ck.model.codebook, row)).collect::<Result<_>>()?;
        let mut count = 0;
        for (l, j) in dead {
            let members: Vec<usize> = if l == 1 {
                (0..z.rows()).collect()
            } else {
                paths.iter().enumerate().filter(|(_, p)| p.at(l - 1) == j / 2).map(|(i, _)| i).collect()
            };
            if members.is_empty() {
                continue;
            }
            let pick = members[r.random_range(0..members.len())];
            ck.model.codebook.code_mut(l, j).copy_from_slice(z.row(pick));
            count += 1;
        }
        Ok(count)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

/// Trains from scratch and returns the final checkpoint with its logs.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> core::result::Result<TrainOutcome, TrainFailure> {
    let mut trainer = Trainer::new(dataset, config).map_err(TrainFailure::from)?;
    trainer.run()?;
    let epochs = core::mem::take(&mut trainer.epochs);
    let steps = core::mem::take(&mut trainer.steps);
    Ok(TrainOutcome { checkpoint: trainer.into_checkpoint(), epochs, steps })
}
