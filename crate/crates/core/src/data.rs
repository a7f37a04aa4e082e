//! Datasets, preprocessing, neighbor-based augmentation, a planted-hierarchy
//! generator and the train/val/test split protocol.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::rng::{self, Domain};

/// Cap on the test partition; larger test splits are subsampled uniformly.
pub const TEST_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub timestamps: Option<Vec<f64>>,
    pub feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(features: Matrix) -> Self {
        Self { features, labels: None, timestamps: None, feature_names: None }
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::shape(format!("{} labels for {} samples", labels.len(), self.len())));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_timestamps(mut self, timestamps: Vec<f64>) -> Result<Self> {
        if timestamps.len() != self.len() {
            return Err(Error::shape(format!("{} timestamps for {} samples", timestamps.len(), self.len())));
        }
        self.timestamps = Some(timestamps);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            timestamps: self.timestamps.as_ref().map(|t| indices.iter().map(|&i| t[i]).collect()),
            feature_names: self.feature_names.clone(),
        }
    }

    fn with_features(&self, features: Matrix, keep: Option<&[usize]>) -> Dataset {
        let feature_names = match (keep, &self.feature_names) {
            (Some(keep), Some(names)) => Some(keep.iter().map(|&c| names[c].clone()).collect()),
            _ => self.feature_names.clone(),
        };
        Dataset { features, labels: self.labels.clone(), timestamps: self.timestamps.clone(), feature_names }
    }
}

/// Keeps the `k` columns with the largest population variance (ties go to the
/// lower column index). Column order is preserved.
pub fn select_hvg(dataset: &Dataset, k: usize) -> Result<(Vec<bool>, Dataset)> {
    let d = dataset.dim();
    if k == 0 {
        return Err(Error::contract("highly-variable selection needs k >= 1"));
    }
    if k > d {
        return Err(Error::contract(format!("cannot keep {k} of {d} columns")));
    }
    let var = dataset.features.col_variances();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order[..k].to_vec();
    keep.sort_unstable();
    let mut mask = vec![false; d];
    for &c in &keep {
        mask[c] = true;
    }
    let features = dataset.features.select_cols(&keep);
    Ok((mask, dataset.with_features(features, Some(&keep))))
}

/// Per-column centering and scaling fitted on one matrix and reusable on others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    /// Column means and population standard deviations, the latter floored at `1e-8`.
    pub fn fit(x: &Matrix) -> Self {
        let means = x.col_means();
        let stds = x.col_variances().iter().map(|v| libm::sqrt(*v).max(1e-8)).collect();
        Self { means, stds }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.means.len() {
            return Err(Error::shape(format!("standardizer fit on {} columns, got {}", self.means.len(), x.cols())));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.means).zip(&self.stds) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Standardizes every column to mean 0 and (population) standard deviation 1.
/// Standard deviations below `1e-8` are replaced by `1e-8`, so constant
/// columns become zeros.
pub fn zscore(dataset: &Dataset) -> Dataset {
    let features = Standardizer::fit(&dataset.features).apply(&dataset.features).unwrap_or_else(|_| dataset.features.clone());
    dataset.with_features(features, None)
}

pub fn log1p(dataset: &Dataset) -> Result<Dataset> {
    if let Some(v) = dataset.features.as_slice().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::contract(format!("log1p needs non-negative features, found {v}")));
    }
    Ok(dataset.with_features(dataset.features.map(libm::log1p), None))
}

/// Exact `k`-nearest-neighbor lists used to draw augmented views.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedPairs {
    pub neighbors: Vec<Vec<usize>>,
}

impl AugmentedPairs {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn k(&self) -> usize {
        self.neighbors.first().map_or(0, Vec::len)
    }
}

/// Neighbor count actually used for `n` points when `k` was requested.
pub fn effective_k(n: usize, k: usize) -> usize {
    if k >= n {
        log::warn!("requested {k} neighbors among {n} points, clamping to {}", n.saturating_sub(1));
        n.saturating_sub(1)
    } else {
        k
    }
}

pub fn knn_pairs(dataset: &Dataset, k: usize) -> Result<AugmentedPairs> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::contract("neighbor augmentation needs at least two samples"));
    }
    let k = effective_k(n, k);
    Ok(AugmentedPairs { neighbors: knn_rows(&dataset.features, k, 0..n) })
}

const QUERY_BLOCK: usize = 32;
const REF_BLOCK: usize = 256;

/// Exact Euclidean neighbors for the query rows in `rows`, self excluded,
/// ties broken by lower index. Works in cache-sized tiles.
pub fn knn_rows(points: &Matrix, k: usize, rows: Range<usize>) -> Vec<Vec<usize>> {
    let n = points.rows();
    let mut out = Vec::with_capacity(rows.len());
    let mut dist = vec![0.0; QUERY_BLOCK * n];
    let mut start = rows.start;
    while start < rows.end {
        let end = (start + QUERY_BLOCK).min(rows.end);
        let q = end - start;
        for jb in (0..n).step_by(REF_BLOCK) {
            let je = (jb + REF_BLOCK).min(n);
            for qi in 0..q {
                let a = points.row(start + qi);
                let drow = &mut dist[qi * n..(qi + 1) * n];
                for (j, d) in drow.iter_mut().enumerate().take(je).skip(jb) {
                    *d = sq_dist4(a, points.row(j));
                }
            }
        }
        for qi in 0..q {
            let i = start + qi;
            let drow = &dist[qi * n..(qi + 1) * n];
            out.push(top_k(drow, i, k));
        }
        start = end;
    }
    out
}

fn top_k(dist: &[f64], exclude: usize, k: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..dist.len()).filter(|&j| j != exclude).collect();
    let cmp = |a: &usize, b: &usize| dist[*a].total_cmp(&dist[*b]).then(a.cmp(b));
    if k < cand.len() {
        cand.select_nth_unstable_by(k, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    cand
}

#[inline]
fn sq_dist4(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let k = 4 * c;
        let d0 = a[k] - b[k];
        let d1 = a[k + 1] - b[k + 1];
        let d2 = a[k + 2] - b[k + 2];
        let d3 = a[k + 3] - b[k + 3];
        s0 += d0 * d0;
        s1 += d1 * d1;
        s2 += d2 * d2;
        s3 += d3 * d3;
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for k in 4 * chunks..n {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}

/// Draws the index of an augmented view of sample `i` uniformly from its neighbors.
pub fn sample_augmented<R: Rng + ?Sized>(pairs: &AugmentedPairs, i: usize, rng: &mut R) -> usize {
    let nb = &pairs.neighbors[i];
    nb[rng.random_range(0..nb.len())]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthOrigin {
    /// Every sample is drawn around a leaf mean.
    Leaves,
    /// Each tree node (root included) emits `n_per_leaf` samples; internal-node
    /// samples play progenitor states and carry their node depth as time.
    AllLevels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub depth: usize,
    pub n_per_leaf: usize,
    pub dim: usize,
    /// Standard deviation of the isotropic noise around a node mean.
    pub spread: f64,
    /// Length of a level-1 branch offset.
    pub branch_scale: f64,
    /// Offset length shrinks by this factor at every level.
    pub decay: f64,
    pub origin: SynthOrigin,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            n_per_leaf: 512,
            dim: 32,
            spread: 0.5,
            branch_scale: 8.0,
            decay: 0.5,
            origin: SynthOrigin::Leaves,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub depth: usize,
    /// `node_means[l]` holds the `2^l` planted means of level `l` (level 0 is the root).
    pub node_means: Vec<Matrix>,
    /// Planted leaf (the sample's fate) for every sample.
    pub leaf: Vec<usize>,
    /// Level of the node the sample was drawn around.
    pub origin_level: Vec<usize>,
}

impl SyntheticTruth {
    pub fn leaf_count(&self) -> usize {
        1 << self.depth
    }

    /// Planted ancestor of `leaf` at `level`.
    pub fn ancestor(&self, leaf: usize, level: usize) -> usize {
        leaf >> (self.depth - level)
    }
}

/// Recursive Gaussian branching: child mean = parent mean + random offset of
/// length `branch_scale * decay^(l-1)`, samples drawn around node means.
pub fn synth_hierarchy(config: &SynthConfig) -> Result<(Dataset, SyntheticTruth)> {
    if config.depth == 0 {
        return Err(Error::contract("synthetic hierarchy needs depth >= 1"));
    }
    if config.dim == 0 {
        return Err(Error::contract("synthetic hierarchy needs dim >= 1"));
    }
    let mut rng = rng::stream(config.seed, Domain::Synth, 0);
    let dim = config.dim;
    let mut node_means = vec![Matrix::zeros(1, dim)];
    for level in 1..=config.depth {
        let len = config.branch_scale * libm::pow(config.decay, (level - 1) as f64);
        let parents = &node_means[level - 1];
        let mut means = Matrix::zeros(1 << level, dim);
        let mut dir = vec![0.0; dim];
        for j in 0..(1 << level) {
            rng::fill_normal(&mut rng, &mut dir);
            let n = norm(&dir).max(1e-12);
            let parent = parents.row(j / 2);
            for ((m, p), d) in means.row_mut(j).iter_mut().zip(parent).zip(&dir) {
                *m = p + len * d / n;
            }
        }
        node_means.push(means);
    }

    let depth = config.depth;
    let leaves = 1usize << depth;
    let origins: Vec<usize> = match config.origin {
        SynthOrigin::Leaves => vec![depth],
        SynthOrigin::AllLevels => (0..=depth).collect(),
    };
    let total: usize = origins.iter().map(|&l| (1usize << l) * config.n_per_leaf).sum();
    let mut features = Matrix::zeros(total, dim);
    let mut leaf = Vec::with_capacity(total);
    let mut origin_level = Vec::with_capacity(total);
    let mut timestamps = Vec::with_capacity(total);
    let mut row = 0;
    for &level in &origins {
        let span = leaves >> level;
        for node in 0..(1usize << level) {
            for _ in 0..config.n_per_leaf {
                let mean = node_means[level].row(node);
                let dst = features.row_mut(row);
                for (x, m) in dst.iter_mut().zip(mean) {
                    *x = m + config.spread * rng::normal(&mut rng);
                }
                let fate = node * span + if span > 1 { rng.random_range(0..span) } else { 0 };
                leaf.push(fate);
                origin_level.push(level);
                timestamps.push(level as f64 + rng.random_range(0.0..0.25));
                row += 1;
            }
        }
    }
    let dataset = Dataset::new(features).with_labels(leaf.clone())?.with_timestamps(timestamps)?;
    Ok((dataset, SyntheticTruth { depth, node_means, leaf, origin_level }))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled 8:1:1 partition; a test part above [`TEST_CAP`] is uniformly
/// subsampled down to the cap.
pub fn split(n: usize, seed: u64) -> Result<SplitIndices> {
    if n < 10 {
        return Err(Error::contract(format!("an 8:1:1 split needs at least 10 samples, got {n}")));
    }
    let mut rng = rng::stream(seed, Domain::Split, 0);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test_all = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    let train = idx;
    let test = if test_all.len() > TEST_CAP {
        let mut t = test_all;
        t.shuffle(&mut rng);
        t.truncate(TEST_CAP);
        t
    } else {
        test_all
    };
    Ok(SplitIndices { train, val, test })
}
