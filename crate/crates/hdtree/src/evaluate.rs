//! Evaluation protocol for trained models and the Ward baselines.

use hdtree_core::data::Dataset;
use hdtree_core::metrics::{
    acc_hungarian, dendrogram_purity, frechet_in_pca, leaf_purity, ll_elbo, nmi, recon_loss, rop, ward_agglomerative,
    Dendrogram, ElboSteps,
};
use hdtree_core::trainer::Model;
use hdtree_core::Matrix;

use crate::error::Result;
use crate::export::MetricRow;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub rop_k: usize,
    /// Count neighbors one time bin away as consistent.
    pub rop_adjacent: bool,
    pub elbo: ElboSteps,
    pub fid_components: usize,
    /// Reconstruction start as a fraction of the diffusion steps.
    pub reconstruction_start: f64,
    /// Seed of the ELBO timestep draws and of the generated samples.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rop_k: 30,
            rop_adjacent: false,
            elbo: ElboSteps::Sampled(50),
            fid_components: 50,
            reconstruction_start: 0.25,
            seed: 0,
        }
    }
}

fn class_count(labels: &[usize]) -> usize {
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// DP, ACC and NMI of Ward clustering on `points`, cut at the class count.
fn ward_scores(points: &Matrix, labels: &[usize]) -> Result<(f64, f64, f64)> {
    let ward = ward_agglomerative(points, class_count(labels))?;
    let dp = dendrogram_purity(&ward.dendrogram, labels)?;
    Ok((dp, acc_hungarian(&ward.labels, labels)?, nmi(&ward.labels, labels)?))
}

fn empty_row(dataset: &str, method: &str, seed: u64) -> MetricRow {
    MetricRow {
        dataset: dataset.into(),
        method: method.into(),
        seed,
        dp: None,
        lp: None,
        acc: None,
        nmi: None,
        neg_rl: None,
        ll: None,
        fid: None,
        rop: None,
    }
}

/// Full metric row of a trained model on `data`.
///
/// DP and LP come from the codebook tree itself; ACC and NMI from Ward
/// clustering of the codebook-space embeddings; ROP from their neighborhoods.
pub fn evaluate_model(model: &Model, data: &Dataset, dataset: &str, seed: u64, options: &EvalOptions) -> Result<MetricRow> {
    let x = &data.features;
    let points = model.code_points(x)?;
    let paths = model.paths(x)?;
    let mut row = empty_row(dataset, "hdtree", seed);

    if let Some(labels) = &data.labels {
        let tree = Dendrogram::from_code_paths(model.depth(), &paths)?;
        row.dp = Some(dendrogram_purity(&tree, labels)?);
        let leaves: Vec<usize> = paths.iter().map(|p| p.leaf()).collect();
        row.lp = Some(leaf_purity(&leaves, labels)?);
        let (_, acc, nmi) = ward_scores(&points, labels)?;
        row.acc = Some(acc);
        row.nmi = Some(nmi);
    }

    let recon = model.reconstruct(x, options.reconstruction_start)?;
    row.neg_rl = Some(-recon_loss(x, &recon)?);

    let schedule = model.diffusion_schedule()?;
    let ll = ll_elbo(&model.decoder.bind(&model.codebook), x, &paths, &schedule, options.elbo, options.seed)?;
    row.ll = Some(ll.iter().sum::<f64>() / ll.len().max(1) as f64);

    if x.rows() >= 2 {
        let generated = model.generate(&paths, options.seed)?;
        row.fid = Some(frechet_in_pca(x, &generated, options.fid_components.min(x.cols()))?);
    }

    if let Some(ts) = &data.timestamps {
        row.rop = Some(rop(&points, ts, options.rop_k, options.rop_adjacent)?.overall);
    }
    Ok(row)
}

/// Ward agglomerative clustering on fixed `points` (raw features or embeddings).
pub fn ward_baseline(
    points: &Matrix,
    data: &Dataset,
    dataset: &str,
    method: &str,
    seed: u64,
    options: &EvalOptions,
) -> Result<MetricRow> {
    let mut row = empty_row(dataset, method, seed);
    if let Some(labels) = &data.labels {
        let (dp, acc, nmi) = ward_scores(points, labels)?;
        row.dp = Some(dp);
        row.acc = Some(acc);
        row.nmi = Some(nmi);
    }
    if let Some(ts) = &data.timestamps {
        row.rop = Some(rop(points, ts, options.rop_k, options.rop_adjacent)?.overall);
    }
    Ok(row)
}
