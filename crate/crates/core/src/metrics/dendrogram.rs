//! Rooted trees over samples, dendrogram purity and Ward agglomeration.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::htc::CodePath;
use crate::linalg::{sq_dist, Matrix};

/// A rooted tree given by a parent array, with every sample attached to one node.
///
/// Samples may sit on internal nodes as well as leaves; a node's subtree holds
/// the samples attached to it and to all its descendants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    parent: Vec<Option<usize>>,
    attach: Vec<usize>,
    /// Nodes ordered so that every child precedes its parent.
    order: Vec<usize>,
    /// Merge height per node (0 for nodes that are not merges).
    pub heights: Vec<f64>,
}

impl Dendrogram {
    pub fn new(parent: Vec<Option<usize>>, attach: Vec<usize>) -> Result<Self> {
        let n = parent.len();
        let roots = parent.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::contract(format!("a dendrogram needs exactly one root, found {roots}")));
        }
        if parent.iter().flatten().any(|&p| p >= n) || attach.iter().any(|&a| a >= n) {
            return Err(Error::contract("dendrogram references a missing node"));
        }
        // depth of every node; a cycle shows up as a walk longer than n
        let mut depth = vec![usize::MAX; n];
        for start in 0..n {
            let mut chain = Vec::new();
            let mut cur = start;
            let base = loop {
                if depth[cur] != usize::MAX {
                    break depth[cur];
                }
                chain.push(cur);
                if chain.len() > n {
                    return Err(Error::contract("dendrogram parent links contain a cycle"));
                }
                match parent[cur] {
                    Some(p) => cur = p,
                    None => {
                        chain.pop();
                        depth[cur] = 0;
                        break 0;
                    }
                }
            };
            let mut d = base;
            for &c in chain.iter().rev() {
                d += 1;
                depth[c] = d;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|a, b| depth[*b].cmp(&depth[*a]).then(a.cmp(b)));
        Ok(Self { parent, attach, order, heights: vec![0.0; n] })
    }

    pub fn node_count(&self) -> usize {
        self.parent.len()
    }

    pub fn sample_count(&self) -> usize {
        self.attach.len()
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn attachment(&self, sample: usize) -> usize {
        self.attach[sample]
    }

    /// Per-node class counts of the subtree, `counts[node][class]`.
    fn subtree_counts(&self, classes: &[usize], k: usize) -> Vec<Vec<u64>> {
        let mut counts = vec![vec![0u64; k]; self.node_count()];
        for (s, &node) in self.attach.iter().enumerate() {
            counts[node][classes[s]] += 1;
        }
        for &node in &self.order {
            if let Some(p) = self.parent[node] {
                let child = counts[node].clone();
                for (d, s) in counts[p].iter_mut().zip(child) {
                    *d += s;
                }
            }
        }
        counts
    }

    /// Dendrogram of a tree codebook: nodes in breadth-first order (root 0),
    /// each sample attached to the leaf of its path.
    pub fn from_code_paths(depth: usize, paths: &[CodePath]) -> Result<Self> {
        let nodes = (1usize << (depth + 1)) - 1;
        let parent = (0..nodes).map(|f| if f == 0 { None } else { Some((f - 1) / 2) }).collect();
        let leaf_base = (1usize << depth) - 1;
        let attach = paths.iter().map(|p| leaf_base + p.leaf()).collect();
        Self::new(parent, attach)
    }
}

fn pairs(c: u64) -> u64 {
    c * c.saturating_sub(1) / 2
}

/// Average over same-class sample pairs of the class fraction inside the
/// subtree rooted at the pair's lowest common ancestor.
pub fn dendrogram_purity(tree: &Dendrogram, truth: &[usize]) -> Result<f64> {
    if truth.len() != tree.sample_count() {
        return Err(Error::shape(format!("{} labels for {} attached samples", truth.len(), tree.sample_count())));
    }
    let (classes, k) = dense_labels(truth);
    let counts = tree.subtree_counts(&classes, k);
    let mut child_pairs = vec![vec![0u64; k]; tree.node_count()];
    for node in 0..tree.node_count() {
        if let Some(p) = tree.parent[node] {
            for c in 0..k {
                child_pairs[p][c] += pairs(counts[node][c]);
            }
        }
    }
    let mut total_pairs = 0u64;
    let mut score = 0.0;
    for node in 0..tree.node_count() {
        let size: u64 = counts[node].iter().sum();
        for c in 0..k {
            // pairs of class c whose lowest common ancestor is this node
            let here = pairs(counts[node][c]) - child_pairs[node][c];
            if here > 0 {
                total_pairs += here;
                score += here as f64 * counts[node][c] as f64 / size as f64;
            }
        }
    }
    if total_pairs == 0 {
        return Err(Error::contract("dendrogram purity needs at least one same-class pair"));
    }
    Ok(score / total_pairs as f64)
}

fn dense_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    (labels.iter().map(|l| ids.binary_search(l).unwrap_or(0)).collect(), ids.len())
}

/// One agglomeration step: clusters `a < b` (scipy-style ids) joined at `height`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WardResult {
    /// Merges sorted by height; cluster `n + m` is created by merge `m`.
    pub merges: Vec<Merge>,
    pub dendrogram: Dendrogram,
    pub labels: Vec<usize>,
}

/// Ward-linkage merges via the nearest-neighbor chain algorithm.
///
/// Heights follow the usual convention where two singletons merge at their
/// Euclidean distance. Ties prefer the chain predecessor, then the smaller index.
pub fn ward_linkage(points: &Matrix) -> Result<Vec<Merge>> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::contract("agglomerative clustering needs at least two points"));
    }
    // condensed squared Ward distances between active clusters
    let idx = |i: usize, j: usize| {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        n * i - i * (i + 1) / 2 + (j - i - 1)
    };
    let mut d2 = vec![0.0; n * (n - 1) / 2];
    for i in 0..n {
        for j in i + 1..n {
            d2[idx(i, j)] = sq_dist(points.row(i), points.row(j));
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut raw = Vec::with_capacity(n - 1);
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    while raw.len() < n - 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).unwrap_or(0));
        }
        loop {
            let x = chain[chain.len() - 1];
            let prev = if chain.len() > 1 { Some(chain[chain.len() - 2]) } else { None };
            let mut best = prev;
            let mut best_d = prev.map_or(f64::INFINITY, |p| d2[idx(x, p)]);
            for y in 0..n {
                if y == x || !active[y] {
                    continue;
                }
                let d = d2[idx(x, y)];
                if d < best_d {
                    best_d = d;
                    best = Some(y);
                }
            }
            let y = best.ok_or_else(|| Error::contract("no active neighbor in the merge chain"))?;
            if Some(y) == prev {
                chain.pop();
                chain.pop();
                let (a, b) = if x < y { (x, y) } else { (y, x) };
                raw.push((a, b, best_d));
                // Lance-Williams update; the merged cluster keeps slot b
                let (na, nb) = (size[a] as f64, size[b] as f64);
                active[a] = false;
                for k in 0..n {
                    if !active[k] || k == b {
                        continue;
                    }
                    let nk = size[k] as f64;
                    let v = ((na + nk) * d2[idx(a, k)] + (nb + nk) * d2[idx(b, k)] - nk * best_d) / (na + nb + nk);
                    d2[idx(b, k)] = v;
                }
                size[b] += size[a];
                break;
            }
            chain.push(y);
        }
    }
    // replay in height order to assign scipy-style cluster ids
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&p, &q| raw[p].2.total_cmp(&raw[q].2).then(p.cmp(&q)));
    let mut uf: Vec<usize> = (0..n).collect();
    let mut cluster_of_root: Vec<usize> = (0..n).collect();
    let mut sizes = vec![1usize; n];
    fn find(uf: &mut [usize], mut x: usize) -> usize {
        while uf[x] != x {
            uf[x] = uf[uf[x]];
            x = uf[x];
        }
        x
    }
    let mut merges = Vec::with_capacity(n - 1);
    for (m, &r) in order.iter().enumerate() {
        let (a, b, h2) = raw[r];
        let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
        let (ca, cb) = (cluster_of_root[ra], cluster_of_root[rb]);
        uf[ra] = rb;
        sizes[rb] += sizes[ra];
        cluster_of_root[rb] = n + m;
        merges.push(Merge { a: ca.min(cb), b: ca.max(cb), height: libm::sqrt(h2.max(0.0)), size: sizes[rb] });
    }
    Ok(merges)
}

/// Dendrogram with one node per sample followed by one node per merge.
pub fn merges_to_dendrogram(n: usize, merges: &[Merge]) -> Result<Dendrogram> {
    let nodes = n + merges.len();
    let mut parent = vec![None; nodes];
    let mut heights = vec![0.0; nodes];
    for (m, mg) in merges.iter().enumerate() {
        parent[mg.a] = Some(n + m);
        parent[mg.b] = Some(n + m);
        heights[n + m] = mg.height;
    }
    let mut d = Dendrogram::new(parent, (0..n).collect())?;
    d.heights = heights;
    Ok(d)
}

/// Flat labels after applying the first `n - clusters` merges. Labels are
/// numbered by the smallest sample index in each cluster.
pub fn cut_merges(n: usize, merges: &[Merge], clusters: usize) -> Vec<usize> {
    let clusters = clusters.clamp(1, n);
    let mut uf: Vec<usize> = (0..n + merges.len()).collect();
    fn find(uf: &mut [usize], mut x: usize) -> usize {
        while uf[x] != x {
            uf[x] = uf[uf[x]];
            x = uf[x];
        }
        x
    }
    for (m, mg) in merges.iter().take(n - clusters).enumerate() {
        let ra = find(&mut uf, mg.a);
        let rb = find(&mut uf, mg.b);
        uf[ra] = n + m;
        uf[rb] = n + m;
    }
    let mut label_of_root = vec![usize::MAX; uf.len()];
    let mut next = 0;
    (0..n)
        .map(|i| {
            let r = find(&mut uf, i);
            if label_of_root[r] == usize::MAX {
                label_of_root[r] = next;
                next += 1;
            }
            label_of_root[r]
        })
        .collect()
}

pub fn ward_agglomerative(points: &Matrix, clusters: usize) -> Result<WardResult> {
    let merges = ward_linkage(points)?;
    let dendrogram = merges_to_dendrogram(points.rows(), &merges)?;
    let labels = cut_merges(points.rows(), &merges, clusters);
    Ok(WardResult { merges, dendrogram, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced_four(leaves: [usize; 4]) -> Dendrogram {
        // nodes: 0 root, 1 and 2 internal, samples attached by `leaves`
        let parent = vec![None, Some(0), Some(0), Some(1), Some(1), Some(2), Some(2)];
        Dendrogram::new(parent, leaves.to_vec()).unwrap()
    }

    #[test]
    fn purity_examples() {
        let pure = balanced_four([3, 4, 5, 6]);
        assert_eq!(dendrogram_purity(&pure, &[0, 0, 1, 1]).unwrap(), 1.0);
        // samples 1,3 under node 1 and 2,4 under node 2
        let mixed = balanced_four([3, 5, 4, 6]);
        assert_eq!(dendrogram_purity(&mixed, &[0, 0, 1, 1]).unwrap(), 0.5);
        assert!(dendrogram_purity(&pure, &[0, 1, 2, 3]).is_err());
    }

    #[test]
    fn rejects_bad_trees() {
        assert!(Dendrogram::new(vec![None, None], vec![0]).is_err());
        assert!(Dendrogram::new(vec![Some(1), Some(0), None], vec![0]).is_err());
    }

    #[test]
    fn two_points_merge_at_distance() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        let w = ward_agglomerative(&x, 1).unwrap();
        assert_eq!(w.merges, vec![Merge { a: 0, b: 1, height: 5.0, size: 2 }]);
        assert_eq!(w.labels, vec![0, 0]);
        assert_eq!(cut_merges(2, &w.merges, 2), vec![0, 1]);
    }

    #[test]
    fn ward_three_points_by_hand() {
        // 0 and 1 merge at 1; the pair then meets 2 at sqrt(2*1*2/3) * |10 - 0.5|
        let x = Matrix::from_rows(&[[0.0], [1.0], [10.0]]).unwrap();
        let m = ward_linkage(&x).unwrap();
        assert_eq!((m[0].a, m[0].b, m[0].height), (0, 1, 1.0));
        assert_eq!((m[1].a, m[1].b), (2, 3));
        let expect = libm::sqrt(4.0 / 3.0) * 9.5;
        assert!((m[1].height - expect).abs() < 1e-12);
    }
}
