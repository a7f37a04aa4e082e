//! Hierarchical tree codebook.
//!
//! Level `l` (1..=depth) holds `2^l` code vectors; the children of `(l, j)` are
//! `(l + 1, 2j)` and `(l + 1, 2j + 1)`. The root (level 0) is implicit.
//! Quantization descends greedily: at every level only the two children of the
//! previous choice compete, so a path need not end at the globally nearest leaf.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, sq_dist, Matrix};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeCodebook {
    depth: usize,
    dim: usize,
    /// `levels[l - 1]` is the `2^l x dim` code matrix of level `l`.
    levels: Vec<Matrix>,
}

/// Node indices `[j_1, .., j_L]`, one per level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CodePath(pub Vec<usize>);

impl CodePath {
    pub fn depth(&self) -> usize {
        self.0.len()
    }

    /// Node index at `level` (1-based).
    pub fn at(&self, level: usize) -> usize {
        self.0[level - 1]
    }

    pub fn leaf(&self) -> usize {
        *self.0.last().expect("paths have at least one level")
    }

    pub fn is_valid_descent(&self) -> bool {
        self.0.first().is_some_and(|&j| j < 2) && self.0.windows(2).all(|w| w[1] / 2 == w[0])
    }

    /// The path that ends at `leaf` in a tree of the given depth.
    pub fn from_leaf(depth: usize, leaf: usize) -> Self {
        CodePath((1..=depth).map(|l| leaf >> (depth - l)).collect())
    }
}

/// Child indices of node `(level, index)` in a tree of the given depth.
pub fn children(depth: usize, level: usize, index: usize) -> Result<(usize, usize)> {
    if level >= depth {
        return Err(Error::contract(format!("level {level} is a leaf level of a depth-{depth} tree")));
    }
    if index >= 1 << level {
        return Err(Error::contract(format!("level {level} has no node {index}")));
    }
    Ok((2 * index, 2 * index + 1))
}

impl TreeCodebook {
    pub fn from_levels(levels: Vec<Matrix>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::contract("a codebook needs at least one level"));
        }
        let dim = levels[0].cols();
        for (k, m) in levels.iter().enumerate() {
            let l = k + 1;
            if m.rows() != 1 << l || m.cols() != dim {
                return Err(Error::shape(format!(
                    "level {l} is {}x{}, expected {}x{dim}",
                    m.rows(),
                    m.cols(),
                    1 << l
                )));
            }
            if !m.is_finite() {
                return Err(Error::contract(format!("level {l} contains non-finite codes")));
            }
        }
        Ok(Self { depth: levels.len(), dim, levels })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Codes of `level` (1-based).
    pub fn level(&self, level: usize) -> &Matrix {
        &self.levels[level - 1]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut Matrix {
        &mut self.levels[level - 1]
    }

    pub fn levels(&self) -> &[Matrix] {
        &self.levels
    }

    pub fn code(&self, level: usize, index: usize) -> &[f64] {
        self.levels[level - 1].row(index)
    }

    pub fn code_mut(&mut self, level: usize, index: usize) -> &mut [f64] {
        self.levels[level - 1].row_mut(index)
    }

    /// Mean of the two level-1 codes; stands in for the implicit root.
    pub fn root(&self) -> Vec<f64> {
        let l1 = &self.levels[0];
        l1.row(0).iter().zip(l1.row(1)).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.levels.iter_mut().map(|m| m.as_mut_slice()).collect()
    }
}

/// Greedy root-to-leaf descent; ties pick the lower index.
pub fn quantize_path(codebook: &TreeCodebook, z: &[f64]) -> Result<CodePath> {
    if z.len() != codebook.dim {
        return Err(Error::shape(format!("latent has {} entries, codebook dim is {}", z.len(), codebook.dim)));
    }
    let mut path = Vec::with_capacity(codebook.depth);
    let mut prev = 0;
    for l in 1..=codebook.depth {
        let (a, b) = (2 * prev, 2 * prev + 1);
        let da = sq_dist(z, codebook.code(l, a));
        let db = sq_dist(z, codebook.code(l, b));
        prev = if db < da { b } else { a };
        path.push(prev);
    }
    Ok(CodePath(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchAssignment {
    pub paths: Vec<CodePath>,
    /// `members[l - 1][j]` lists the batch rows routed through node `(l, j)`.
    pub members: Vec<Vec<Vec<usize>>>,
}

impl BatchAssignment {
    pub fn leaves(&self) -> Vec<usize> {
        self.paths.iter().map(CodePath::leaf).collect()
    }
}

pub fn quantize_batch(codebook: &TreeCodebook, z: &Matrix) -> Result<BatchAssignment> {
    let paths = z.row_iter().map(|row| quantize_path(codebook, row)).collect::<Result<Vec<_>>>()?;
    let mut members: Vec<Vec<Vec<usize>>> = (1..=codebook.depth).map(|l| vec![Vec::new(); 1 << l]).collect();
    for (i, p) in paths.iter().enumerate() {
        for (k, &j) in p.0.iter().enumerate() {
            members[k][j].push(i);
        }
    }
    Ok(BatchAssignment { paths, members })
}

/// Per-level node counts for a set of paths.
pub fn occupancy(depth: usize, paths: &[CodePath]) -> Vec<Vec<usize>> {
    let mut counts: Vec<Vec<usize>> = (1..=depth).map(|l| vec![0; 1 << l]).collect();
    for p in paths {
        for (k, &j) in p.0.iter().enumerate() {
            counts[k][j] += 1;
        }
    }
    counts
}

/// `A(a, b) = |sg(a) - b|^2 + |a - sg(b)|^2`.
///
/// The value is `2|a - b|^2`; `a` is only differentiated through the second
/// summand and `b` only through the first.
pub fn align_term(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let value = 2.0 * sq_dist(a, b);
    let grad_a = a.iter().zip(b).map(|(x, y)| 2.0 * (x - y)).collect();
    let grad_b = a.iter().zip(b).map(|(x, y)| 2.0 * (y - x)).collect();
    (value, grad_a, grad_b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HqlOutput {
    pub value: f64,
    pub grad_z: Matrix,
    /// Gradient for every level, shaped like the codebook levels.
    pub grad_codes: Vec<Matrix>,
}

/// Row of `z` nearest to `w`; ties pick the lower row.
pub fn nearest_row(z: &Matrix, w: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, row) in z.row_iter().enumerate() {
        let d = sq_dist(row, w);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Hierarchical quantization loss, averaged over the batch:
/// `mean_i sum_l A(z_i, c_l(z_i)) + lambda * A(c_l(z_i), Psi(c_l(z_i)))`
/// where `Psi(w)` is the batch embedding nearest to `w`.
pub fn hql_loss(z: &Matrix, codebook: &TreeCodebook, paths: &[CodePath], lambda: f64) -> Result<HqlOutput> {
    let n = z.rows();
    if n == 0 {
        return Err(Error::contract("quantization loss needs a non-empty batch"));
    }
    if z.cols() != codebook.dim || paths.len() != n {
        return Err(Error::shape(format!(
            "{}x{} latents with {} paths for a dim-{} codebook",
            n,
            z.cols(),
            paths.len(),
            codebook.dim
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad_z = Matrix::zeros(n, codebook.dim);
    let mut grad_codes: Vec<Matrix> = codebook.levels.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let mut value = 0.0;
    let mut diff = vec![0.0; codebook.dim];

    for l in 1..=codebook.depth {
        let mut uses = vec![0usize; 1 << l];
        for (i, p) in paths.iter().enumerate() {
            let j = p.at(l);
            uses[j] += 1;
            let c = codebook.code(l, j);
            let zi = z.row(i);
            for ((d, a), b) in diff.iter_mut().zip(zi).zip(c) {
                *d = a - b;
            }
            value += 2.0 * diff.iter().map(|v| v * v).sum::<f64>();
            axpy(2.0 * inv_n, &diff, grad_z.row_mut(i));
            axpy(-2.0 * inv_n, &diff, grad_codes[l - 1].row_mut(j));
        }
        // consistency: each used code against its nearest batch embedding,
        // counted once per sample routed through it
        for (j, &count) in uses.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let c = codebook.code(l, j);
            let k = nearest_row(z, c);
            let zk = z.row(k);
            for ((d, a), b) in diff.iter_mut().zip(c).zip(zk) {
                *d = a - b;
            }
            let w = count as f64 * lambda;
            value += w * 2.0 * diff.iter().map(|v| v * v).sum::<f64>();
            axpy(2.0 * w * inv_n, &diff, grad_codes[l - 1].row_mut(j));
            axpy(-2.0 * w * inv_n, &diff, grad_z.row_mut(k));
        }
    }
    Ok(HqlOutput { value: value * inv_n, grad_z, grad_codes })
}

/// Standard deviation of the jitter given to codes of nodes without points.
const DEAD_JITTER: f64 = 0.031_622_776_601_683_79; // sqrt(1e-3)
const KMEANS_ITERS: usize = 10;

/// Recursive 2-means over warm-up embeddings: each node's two children are
/// fitted to the points routed to that node. Nodes without points get their
/// parent's code plus a small seeded jitter.
pub fn init_codebook(z: &Matrix, depth: usize, seed: u64) -> Result<TreeCodebook> {
    if z.rows() < 2 {
        return Err(Error::contract(format!("codebook initialization needs >= 2 points, got {}", z.rows())));
    }
    if depth == 0 {
        return Err(Error::contract("codebook depth must be >= 1"));
    }
    let dim = z.cols();
    let mut rng = rng::stream(seed, Domain::Codebook, 0);
    let mut levels = Vec::with_capacity(depth);
    let mut parent_members: Vec<Vec<usize>> = vec![(0..z.rows()).collect()];
    let mut parent_codes = Matrix::from_vec(1, dim, z.col_means())?;
    for l in 1..=depth {
        let mut codes = Matrix::zeros(1 << l, dim);
        let mut members = vec![Vec::new(); 1 << l];
        for (p, pts) in parent_members.iter().enumerate() {
            let (c0, c1) = two_means(z, pts, parent_codes.row(p), &mut rng);
            codes.row_mut(2 * p).copy_from_slice(&c0);
            codes.row_mut(2 * p + 1).copy_from_slice(&c1);
            for &i in pts {
                let side = usize::from(sq_dist(z.row(i), &c1) < sq_dist(z.row(i), &c0));
                members[2 * p + side].push(i);
            }
        }
        levels.push(codes.clone());
        parent_members = members;
        parent_codes = codes;
    }
    TreeCodebook::from_levels(levels)
}

fn jittered<R: Rng + ?Sized>(base: &[f64], rng: &mut R) -> Vec<f64> {
    base.iter().map(|v| v + DEAD_JITTER * rng::normal(rng)).collect()
}

fn two_means<R: Rng + ?Sized>(z: &Matrix, pts: &[usize], parent: &[f64], rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    match pts.len() {
        0 => return (jittered(parent, rng), jittered(parent, rng)),
        1 => return (z.row(pts[0]).to_vec(), jittered(z.row(pts[0]), rng)),
        _ => {}
    }
    // k-means++ seeding
    let first = pts[rng.random_range(0..pts.len())];
    let d2: Vec<f64> = pts.iter().map(|&i| sq_dist(z.row(i), z.row(first))).collect();
    let total: f64 = d2.iter().sum();
    let mut c0 = z.row(first).to_vec();
    let mut c1 = if total > 0.0 {
        let mut target = rng.random_range(0.0..total);
        let mut pick = pts[pts.len() - 1];
        for (&i, &d) in pts.iter().zip(&d2) {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        z.row(pick).to_vec()
    } else {
        jittered(&c0, rng)
    };
    let dim = z.cols();
    for _ in 0..KMEANS_ITERS {
        let mut sums = [vec![0.0; dim], vec![0.0; dim]];
        let mut counts = [0usize; 2];
        for &i in pts {
            let side = usize::from(sq_dist(z.row(i), &c1) < sq_dist(z.row(i), &c0));
            axpy(1.0, z.row(i), &mut sums[side]);
            counts[side] += 1;
        }
        let mean = |s: &[f64], n: usize| s.iter().map(|v| v / n as f64).collect::<Vec<f64>>();
        let new0 = if counts[0] > 0 { mean(&sums[0], counts[0]) } else { jittered(parent, rng) };
        let new1 = if counts[1] > 0 { mean(&sums[1], counts[1]) } else { jittered(parent, rng) };
        let converged = new0 == c0 && new1 == c1;
        c0 = new0;
        c1 = new1;
        if converged {
            break;
        }
    }
    (c0, c1)
}

/// One exported tree node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNodeRecord {
    pub level: usize,
    pub index: usize,
    pub vector: Vec<f64>,
    pub occupancy: usize,
    /// `(level, index)` of the parent; level-1 nodes point at the root `(0, 0)`.
    pub parent: Option<(usize, usize)>,
}

/// Flattened tree, root first, then level by level.
pub fn tree_records(codebook: &TreeCodebook, occupancy: &[Vec<usize>]) -> Vec<TreeNodeRecord> {
    let total: usize = occupancy.first().map_or(0, |l| l.iter().sum());
    let mut out = vec![TreeNodeRecord { level: 0, index: 0, vector: codebook.root(), occupancy: total, parent: None }];
    for l in 1..=codebook.depth {
        for j in 0..(1 << l) {
            out.push(TreeNodeRecord {
                level: l,
                index: j,
                vector: codebook.code(l, j).to_vec(),
                occupancy: occupancy.get(l - 1).map_or(0, |c| c[j]),
                parent: Some((l - 1, j / 2)),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> TreeCodebook {
        TreeCodebook::from_levels(vec![
            Matrix::from_rows(&[[-1.0], [1.0]]).unwrap(),
            Matrix::from_rows(&[[-1.5], [-0.5], [0.5], [1.5]]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn child_indices() {
        assert_eq!(children(3, 1, 0).unwrap(), (0, 1));
        assert_eq!(children(3, 1, 1).unwrap(), (2, 3));
        assert_eq!(children(4, 3, 5).unwrap(), (10, 11));
        assert!(children(3, 3, 0).is_err());
        assert!(children(3, 1, 2).is_err());
    }

    #[test]
    fn greedy_descent_example() {
        assert_eq!(quantize_path(&toy(), &[0.9]).unwrap(), CodePath(vec![1, 2]));
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(quantize_path(&toy(), &[0.0]).unwrap(), CodePath(vec![0, 1]));
        assert_eq!(quantize_path(&toy(), &[1.0]).unwrap(), CodePath(vec![1, 2]));
    }

    #[test]
    fn exact_leaf_code_terminates_there() {
        assert_eq!(quantize_path(&toy(), &[1.5]).unwrap(), CodePath(vec![1, 3]));
        assert!(quantize_path(&toy(), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn greedy_can_miss_global_nearest_leaf() {
        // z = -0.1 descends under 0.2, but the leaf equal to z hangs under -5
        let cb = TreeCodebook::from_levels(vec![
            Matrix::from_rows(&[[-5.0], [0.2]]).unwrap(),
            Matrix::from_rows(&[[-0.1], [-9.0], [3.0], [4.0]]).unwrap(),
        ])
        .unwrap();
        let p = quantize_path(&cb, &[-0.1]).unwrap();
        assert_eq!(p, CodePath(vec![1, 2]));
        assert!(p.is_valid_descent());
    }

    #[test]
    fn batch_matches_rows_and_partitions() {
        let z = Matrix::from_rows(&[[0.9], [-2.0], [0.1], [1.4]]).unwrap();
        let a = quantize_batch(&toy(), &z).unwrap();
        for i in 0..4 {
            assert_eq!(a.paths[i], quantize_path(&toy(), z.row(i)).unwrap());
        }
        for level in &a.members {
            let mut all: Vec<usize> = level.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, vec![0, 1, 2, 3]);
        }
        let occ = occupancy(2, &a.paths);
        assert!(occ.iter().all(|l| l.iter().sum::<usize>() == 4));
        assert_eq!(occupancy(2, &[]), vec![vec![0; 2], vec![0; 4]]);
    }

    #[test]
    fn align_term_example() {
        let (v, ga, gb) = align_term(&[0.0, 0.0], &[1.0, 0.0]);
        assert_eq!(v, 2.0);
        assert_eq!(ga, vec![-2.0, 0.0]);
        assert_eq!(gb, vec![2.0, 0.0]);
        let (v, ga, gb) = align_term(&[0.3, 0.4], &[0.3, 0.4]);
        assert_eq!((v, ga, gb), (0.0, vec![0.0, 0.0], vec![0.0, 0.0]));
    }

    #[test]
    fn hql_zero_when_on_codes() {
        // single level so one point can coincide with its code
        let cb = TreeCodebook::from_levels(vec![Matrix::from_rows(&[[0.5], [2.0]]).unwrap()]).unwrap();
        let z = Matrix::from_rows(&[[0.5]]).unwrap();
        let paths = quantize_batch(&cb, &z).unwrap().paths;
        let out = hql_loss(&z, &cb, &paths, 2.0).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(hql_loss(&Matrix::zeros(0, 1), &cb, &[], 2.0).is_err());
    }

    #[test]
    fn hql_two_sample_hand_enumeration() {
        // L = 1, d = 1, codes {-1, 1}, z = {-0.5, 2}
        // sample 0 -> code -1 (dist 0.25), sample 1 -> code 1 (dist 1)
        // Psi(-1) = -0.5 (dist 0.25), Psi(1) = 2 (|1-2| = 1 < |1+0.5| = 1.5)
        // value = mean_i [2 d_i + 2 * 2 * d(c_i, Psi)]
        //       = ((0.5 + 4 * 0.25) + (2 + 4 * 1)) / 2 = 3.75
        let cb = TreeCodebook::from_levels(vec![Matrix::from_rows(&[[-1.0], [1.0]]).unwrap()]).unwrap();
        let z = Matrix::from_rows(&[[-0.5], [2.0]]).unwrap();
        let paths = quantize_batch(&cb, &z).unwrap().paths;
        let out = hql_loss(&z, &cb, &paths, 2.0).unwrap();
        assert!((out.value - 3.75).abs() < 1e-12);
    }

    #[test]
    fn init_separates_two_blobs() {
        let mut rows = Vec::new();
        let mut r = rng::stream(1, Domain::Eval, 0);
        for i in 0..200 {
            let c = if i % 2 == 0 { -5.0 } else { 5.0 };
            rows.push([c + 0.3 * rng::normal(&mut r)]);
        }
        let z = Matrix::from_rows(&rows).unwrap();
        let cb = init_codebook(&z, 1, 9).unwrap();
        let mut codes = [cb.code(1, 0)[0], cb.code(1, 1)[0]];
        codes.sort_by(f64::total_cmp);
        assert!((codes[0] + 5.0).abs() < 1.0 && (codes[1] - 5.0).abs() < 1.0);
        assert_eq!(cb, init_codebook(&z, 1, 9).unwrap());
        assert!(init_codebook(&Matrix::zeros(1, 1), 1, 0).is_err());
    }

    #[test]
    fn init_handles_degenerate_points() {
        let z = Matrix::zeros(5, 3);
        let cb = init_codebook(&z, 4, 2).unwrap();
        assert!(cb.levels().iter().all(Matrix::is_finite));
    }

    #[test]
    fn path_from_leaf_roundtrip() {
        let p = CodePath::from_leaf(3, 5);
        assert_eq!(p, CodePath(vec![1, 2, 5]));
        assert!(p.is_valid_descent());
        assert!(!CodePath(vec![1, 1]).is_valid_descent());
    }
}
