//! Brute-force reference implementations, only usable on small inputs.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;

fn dense(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    (labels.iter().map(|l| ids[l]).collect(), ids.len())
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(m - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, m - 1);
            out.push(q);
        }
    }
    out
}

/// Accuracy under the best relabeling, searching every permutation.
pub fn acc(pred: &[usize], truth: &[usize]) -> f64 {
    let (p, kp) = dense(pred);
    let (t, kt) = dense(truth);
    let best = permutations(kp.max(kt))
        .into_iter()
        .map(|perm| p.iter().zip(&t).filter(|(a, b)| perm[**a] == **b).count())
        .max()
        .unwrap();
    best as f64 / pred.len() as f64
}

/// Minimum assignment cost over every permutation.
pub fn assignment_cost(cost: &[Vec<i64>]) -> i64 {
    permutations(cost.len())
        .into_iter()
        .map(|perm| perm.iter().enumerate().map(|(r, &c)| cost[r][c]).sum())
        .min()
        .unwrap()
}

/// Normalized mutual information from explicit empirical probabilities.
pub fn nmi(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let (p, kp) = dense(pred);
    let (t, kt) = dense(truth);
    let prob = |f: &dyn Fn(usize) -> bool| (0..p.len()).filter(|&i| f(i)).count() as f64 / n;
    let pc: Vec<f64> = (0..kp).map(|a| prob(&|i| p[i] == a)).collect();
    let pg: Vec<f64> = (0..kt).map(|b| prob(&|i| t[i] == b)).collect();
    let h = |ps: &[f64]| -ps.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
    let (hc, hg) = (h(&pc), h(&pg));
    if hc == 0.0 && hg == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for a in 0..kp {
        for b in 0..kt {
            let j = prob(&|i| p[i] == a && t[i] == b);
            if j > 0.0 {
                mi += j * (j / (pc[a] * pg[b])).ln();
            }
        }
    }
    2.0 * mi / (hc + hg)
}

/// Mean over occupied leaves of the majority-class share.
pub fn leaf_purity(leaves: &[usize], truth: &[usize]) -> f64 {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&l, &c) in leaves.iter().zip(truth) {
        groups.entry(l).or_default().push(c);
    }
    let total: f64 = groups
        .values()
        .map(|members| {
            let top = members.iter().map(|c| members.iter().filter(|d| *d == c).count()).max().unwrap();
            top as f64 / members.len() as f64
        })
        .sum();
    total / groups.len() as f64
}

fn ancestors(parent: &[Option<usize>], mut node: usize) -> Vec<usize> {
    let mut out = vec![node];
    while let Some(p) = parent[node] {
        out.push(p);
        node = p;
    }
    out
}

/// Dendrogram purity by enumerating every same-class pair and the samples
/// below its lowest common ancestor. `None` when no such pair exists.
pub fn dendrogram_purity(parent: &[Option<usize>], attach: &[usize], truth: &[usize]) -> Option<f64> {
    let n = attach.len();
    let (mut sum, mut pairs) = (0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            if truth[i] != truth[j] {
                continue;
            }
            let up_i = ancestors(parent, attach[i]);
            let up_j = ancestors(parent, attach[j]);
            let lca = *up_i.iter().find(|a| up_j.contains(a)).unwrap();
            let below: Vec<usize> = (0..n).filter(|&s| ancestors(parent, attach[s]).contains(&lca)).collect();
            let same = below.iter().filter(|&&s| truth[s] == truth[i]).count();
            sum += same as f64 / below.len() as f64;
            pairs += 1;
        }
    }
    (pairs > 0).then(|| sum / pairs as f64)
}

/// Ward merges by exhaustive search over cluster pairs: sorted member lists
/// of the merged cluster and its height `sqrt(2 n_a n_b / (n_a + n_b)) |mu_a - mu_b|`.
pub fn ward_naive(points: &[Vec<f64>]) -> Vec<(Vec<usize>, f64)> {
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    let centroid = |c: &[usize]| {
        let d = points[0].len();
        let mut m = vec![0.0; d];
        for &i in c {
            for k in 0..d {
                m[k] += points[i][k] / c.len() as f64;
            }
        }
        m
    };
    let mut out = Vec::new();
    while clusters.len() > 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let (ma, mb) = (centroid(&clusters[a]), centroid(&clusters[b]));
                let sq: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
                let (na, nb) = (clusters[a].len() as f64, clusters[b].len() as f64);
                let h = (2.0 * na * nb / (na + nb) * sq).sqrt();
                if h < best.0 {
                    best = (h, a, b);
                }
            }
        }
        let (h, a, b) = best;
        let mut merged = clusters.remove(b);
        merged.extend(clusters.remove(a));
        merged.sort_unstable();
        out.push((merged.clone(), h));
        clusters.push(merged);
    }
    out
}

/// All-pairs shortest path weights (Floyd-Warshall) over an undirected edge list.
pub fn all_pairs(nodes: usize, edges: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
    let mut d = vec![vec![f64::INFINITY; nodes]; nodes];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for &(a, b, w) in edges {
        d[a][b] = d[a][b].min(w);
        d[b][a] = d[b][a].min(w);
    }
    for k in 0..nodes {
        for i in 0..nodes {
            for j in 0..nodes {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

/// Exact neighbors of row `i` by full sort, self excluded, ties by index.
pub fn knn(points: &[Vec<f64>], i: usize, k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = (0..points.len())
        .filter(|&j| j != i)
        .map(|j| (points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum(), j))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Greedy descent recomputed level by level against both children.
pub fn greedy_path(levels: &[Vec<Vec<f64>>], z: &[f64]) -> Vec<usize> {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut path = Vec::new();
    let mut j = 0;
    for codes in levels {
        let (left, right) = (2 * j, 2 * j + 1);
        j = if sq(z, &codes[right]) < sq(z, &codes[left]) { right } else { left };
        path.push(j);
    }
    path
}
