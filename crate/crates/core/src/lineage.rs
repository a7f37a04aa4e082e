//! Lineage graph over codebook nodes and shortest-path trajectories.
//!
//! Nodes are the root (level 0, the mean of the level-1 codes) and every
//! code at levels `1..=L`. Parent-child pairs are joined by tree edges with
//! Euclidean weight; each node is also joined to its `k` nearest same-level
//! codes with weight `distance + P^(L - l)`.

use alloc::collections::{BTreeMap, BinaryHeap};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::htc::{quantize_path, TreeCodebook};
use crate::linalg::sq_dist;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub level: usize,
    pub index: usize,
}

impl NodeId {
    pub fn new(level: usize, index: usize) -> Self {
        Self { level, index }
    }

    /// Breadth-first position: `2^level - 1 + index`.
    pub fn flat(self) -> usize {
        (1usize << self.level) - 1 + self.index
    }

    pub fn from_flat(flat: usize) -> Self {
        let level = (usize::BITS - 1 - (flat + 1).leading_zeros()) as usize;
        Self { level, index: flat + 1 - (1 << level) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Tree,
    Knn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: NodeId,
    pub b: NodeId,
    pub weight: f64,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineageGraph {
    depth: usize,
    vectors: Vec<Vec<f64>>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<(usize, usize)>>,
    pub penalty: f64,
    pub k: usize,
}

impl LineageGraph {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node_count(&self) -> usize {
        self.vectors.len()
    }

    pub fn vector(&self, node: NodeId) -> &[f64] {
        &self.vectors[node.flat()]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node.level <= self.depth && node.index < (1 << node.level)
    }

    /// The edge joining `a` and `b`, if any.
    pub fn edge(&self, a: NodeId, b: NodeId) -> Option<&Edge> {
        if !self.contains(a) || !self.contains(b) {
            return None;
        }
        let target = b.flat();
        self.adjacency[a.flat()].iter().find(|(n, _)| *n == target).map(|(_, e)| &self.edges[*e])
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(sq_dist(a, b))
}

pub fn build_graph(codebook: &TreeCodebook, k: usize, penalty: f64) -> Result<LineageGraph> {
    if !(penalty > 1.0) || !penalty.is_finite() {
        return Err(Error::contract(format!("depth penalty base must exceed 1, got {penalty}")));
    }
    let depth = codebook.depth();
    let mut vectors = vec![codebook.root()];
    for l in 1..=depth {
        vectors.extend(codebook.level(l).row_iter().map(<[f64]>::to_vec));
    }

    // keyed by (smaller flat id, larger flat id); parallel edges keep the lighter one
    let mut merged: BTreeMap<(usize, usize), (f64, EdgeKind)> = BTreeMap::new();
    let mut add = |a: NodeId, b: NodeId, w: f64, kind: EdgeKind| {
        let key = if a.flat() < b.flat() { (a.flat(), b.flat()) } else { (b.flat(), a.flat()) };
        merged
            .entry(key)
            .and_modify(|e| {
                if w < e.0 {
                    *e = (w, kind);
                }
            })
            .or_insert((w, kind));
    };
    for l in 1..=depth {
        for j in 0..(1usize << l) {
            let child = NodeId::new(l, j);
            let parent = NodeId::new(l - 1, j / 2);
            add(child, parent, dist(&vectors[child.flat()], &vectors[parent.flat()]), EdgeKind::Tree);
        }
    }
    for l in 1..=depth {
        let width = 1usize << l;
        let k_l = k.min(width - 1);
        let extra = libm::pow(penalty, (depth - l) as f64);
        let base = (1usize << l) - 1;
        for j in 0..width {
            let v = &vectors[base + j];
            let mut others: Vec<(f64, usize)> =
                (0..width).filter(|&o| o != j).map(|o| (dist(v, &vectors[base + o]), o)).collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(d, o) in others.iter().take(k_l) {
                add(NodeId::new(l, j), NodeId::new(l, o), d + extra, EdgeKind::Knn);
            }
        }
    }

    let mut adjacency = vec![Vec::new(); vectors.len()];
    let edges: Vec<Edge> = merged
        .into_iter()
        .enumerate()
        .map(|(e, ((a, b), (weight, kind)))| {
            adjacency[a].push((b, e));
            adjacency[b].push((a, e));
            Edge { a: NodeId::from_flat(a), b: NodeId::from_flat(b), weight, kind }
        })
        .collect();
    Ok(LineageGraph { depth, vectors, edges, adjacency, penalty, k })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub nodes: Vec<NodeId>,
    pub total_weight: f64,
    /// Kind of the edge leaving each node but the last.
    pub edge_kinds: Vec<EdgeKind>,
    pub edge_weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Frontier {
    cost: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on cost, then on node id
        other.cost.total_cmp(&self.cost).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact minimum-weight path (Dijkstra). Among equal-cost predecessors the
/// one with the smaller `(level, index)` wins.
pub fn shortest_path(graph: &LineageGraph, start: NodeId, end: NodeId) -> Result<Trajectory> {
    for n in [start, end] {
        if !graph.contains(n) {
            return Err(Error::contract(format!("node {n:?} is not in the lineage graph")));
        }
    }
    let count = graph.node_count();
    let mut best = vec![f64::INFINITY; count];
    let mut pred: Vec<Option<usize>> = vec![None; count];
    let mut done = vec![false; count];
    let mut heap = BinaryHeap::new();
    best[start.flat()] = 0.0;
    heap.push(Frontier { cost: 0.0, node: start.flat() });
    while let Some(Frontier { cost, node }) = heap.pop() {
        if done[node] {
            continue;
        }
        done[node] = true;
        if node == end.flat() {
            break;
        }
        for &(next, e) in &graph.adjacency[node] {
            if done[next] {
                continue;
            }
            let cand = cost + graph.edges[e].weight;
            let better = cand < best[next] || (cand == best[next] && pred[next].is_some_and(|p| node < p));
            if better {
                best[next] = cand;
                pred[next] = Some(node);
                heap.push(Frontier { cost: cand, node: next });
            }
        }
    }
    if !best[end.flat()].is_finite() {
        return Err(Error::contract(format!("{end:?} is unreachable from {start:?}")));
    }
    let mut flat = vec![end.flat()];
    let mut cur = end.flat();
    while let Some(p) = pred[cur] {
        flat.push(p);
        cur = p;
    }
    flat.reverse();
    let nodes: Vec<NodeId> = flat.into_iter().map(NodeId::from_flat).collect();
    let mut edge_kinds = Vec::with_capacity(nodes.len().saturating_sub(1));
    let mut edge_weights = Vec::with_capacity(nodes.len().saturating_sub(1));
    for w in nodes.windows(2) {
        let e = graph.edge(w[0], w[1]).ok_or_else(|| Error::contract("trajectory uses a missing edge"))?;
        edge_kinds.push(e.kind);
        edge_weights.push(e.weight);
    }
    let total_weight = edge_weights.iter().sum();
    Ok(Trajectory { nodes, total_weight, edge_kinds, edge_weights })
}

/// Node at `level` on the greedy path of `point`, given in codebook coordinates.
pub fn node_of_point(codebook: &TreeCodebook, point: &[f64], level: usize) -> Result<NodeId> {
    if level > codebook.depth() {
        return Err(Error::contract(format!("level {level} exceeds tree depth {}", codebook.depth())));
    }
    if level == 0 {
        return Ok(NodeId::new(0, 0));
    }
    let path = quantize_path(codebook, point)?;
    Ok(NodeId::new(level, path.at(level)))
}

/// Shortest lineage path between the nodes of two points in codebook coordinates.
pub fn trajectory_between(
    codebook: &TreeCodebook,
    start: &[f64],
    end: &[f64],
    k: usize,
    penalty: f64,
    level: usize,
) -> Result<Trajectory> {
    let graph = build_graph(codebook, k, penalty)?;
    let a = node_of_point(codebook, start, level)?;
    let b = node_of_point(codebook, end, level)?;
    shortest_path(&graph, a, b)
}

/// Ancestors of `node` from itself up to the root.
pub fn ancestry(node: NodeId) -> Vec<NodeId> {
    (0..=node.level).rev().map(|l| NodeId::new(l, node.index >> (node.level - l))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn line_codebook() -> TreeCodebook {
        TreeCodebook::from_levels(vec![
            Matrix::from_rows(&[[-1.0], [1.0]]).unwrap(),
            Matrix::from_rows(&[[-1.5], [-0.5], [0.5], [1.5]]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn flat_ids_round_trip() {
        for f in 0..63 {
            assert_eq!(NodeId::from_flat(f).flat(), f);
        }
        assert_eq!(NodeId::from_flat(4), NodeId::new(2, 1));
    }

    #[test]
    fn edge_weights() {
        let g = build_graph(&line_codebook(), 1, 2.0).unwrap();
        let tree = g.edge(NodeId::new(2, 1), NodeId::new(1, 0)).unwrap();
        assert_eq!((tree.weight, tree.kind), (0.5, EdgeKind::Tree));
        // leaf-level lateral edge: distance 1 + 2^0
        let lateral = g.edge(NodeId::new(2, 1), NodeId::new(2, 2)).unwrap();
        assert_eq!((lateral.weight, lateral.kind), (2.0, EdgeKind::Knn));
        let top = g.edge(NodeId::new(1, 0), NodeId::new(1, 1)).unwrap();
        assert_eq!(top.weight, 2.0 + 2.0);
        assert!(build_graph(&line_codebook(), 1, 1.0).is_err());
    }

    #[test]
    fn trivial_and_tree_paths() {
        let g = build_graph(&line_codebook(), 0, 2.0).unwrap();
        let same = shortest_path(&g, NodeId::new(2, 3), NodeId::new(2, 3)).unwrap();
        assert_eq!((same.nodes.len(), same.total_weight), (1, 0.0));
        let p = shortest_path(&g, NodeId::new(2, 1), NodeId::new(2, 2)).unwrap();
        assert_eq!(
            p.nodes,
            vec![NodeId::new(2, 1), NodeId::new(1, 0), NodeId::new(0, 0), NodeId::new(1, 1), NodeId::new(2, 2)]
        );
        assert!((p.total_weight - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ancestry_chain() {
        assert_eq!(ancestry(NodeId::new(3, 5)), vec![
            NodeId::new(3, 5),
            NodeId::new(2, 2),
            NodeId::new(1, 1),
            NodeId::new(0, 0)
        ]);
    }
}
