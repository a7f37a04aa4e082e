//! Flat clustering scores: Hungarian accuracy, NMI and leaf purity.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense relabeling of arbitrary ids in ascending order.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    for &l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    // ascending order of the original ids
    for (rank, v) in ids.values_mut().enumerate() {
        *v = rank;
    }
    (labels.iter().map(|l| ids[l]).collect(), ids.len())
}

/// `counts[p][t]` for compacted predicted and true labels.
pub fn contingency(pred: &[usize], truth: &[usize]) -> Result<Vec<Vec<u64>>> {
    if pred.is_empty() {
        return Err(Error::contract("clustering scores need at least one sample"));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let (p, kp) = compact(pred);
    let (t, kt) = compact(truth);
    let mut counts = vec![vec![0u64; kt]; kp];
    for (a, b) in p.iter().zip(&t) {
        counts[*a][*b] += 1;
    }
    Ok(counts)
}

/// Minimum-cost perfect assignment on a square cost matrix.
/// Returns `assign[row] = column`.
pub fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    // potentials-based shortest augmenting path, 1-based with a sentinel column 0
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut min_to = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = inf;
            let mut next = 0;
            for c in 1..=n {
                if used[c] {
                    continue;
                }
                let reduced = cost[r - 1][c - 1] - u[r] - v[c];
                if reduced < min_to[c] {
                    min_to[c] = reduced;
                    way[c] = col0;
                }
                if min_to[c] < delta {
                    delta = min_to[c];
                    next = c;
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    min_to[c] -= delta;
                }
            }
            col0 = next;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for c in 1..=n {
        if owner[c] > 0 {
            assign[owner[c] - 1] = c - 1;
        }
    }
    assign
}

/// Best accuracy over one-to-one matchings of predicted clusters to classes.
pub fn acc_hungarian(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let counts = contingency(pred, truth)?;
    let n = counts.len().max(counts[0].len());
    let top = counts.iter().flatten().copied().max().unwrap_or(0) as i64;
    let mut cost = vec![vec![top; n]; n];
    for (p, row) in counts.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            cost[p][t] = top - c as i64;
        }
    }
    let assign = hungarian(&cost);
    let matched: u64 =
        assign.iter().enumerate().filter(|(p, _)| *p < counts.len()).map(|(p, &t)| counts[p].get(t).copied().unwrap_or(0)).sum();
    Ok(matched as f64 / pred.len() as f64)
}

fn entropy(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| {
        let p = c as f64 / n;
        -p * libm::log(p)
    }).sum()
}

/// `2 I(C; G) / (H(C) + H(G))` with natural logarithms.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let counts = contingency(pred, truth)?;
    let n = pred.len() as f64;
    let rows: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
    let mut cols = vec![0u64; counts[0].len()];
    for r in &counts {
        for (c, v) in cols.iter_mut().zip(r) {
            *c += v;
        }
    }
    let hc = entropy(rows.iter().copied(), n);
    let hg = entropy(cols.iter().copied(), n);
    if hc == 0.0 && hg == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (p, row) in counts.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            if c > 0 {
                let joint = c as f64 / n;
                mi += joint * libm::log(c as f64 * n / (rows[p] as f64 * cols[t] as f64));
            }
        }
    }
    Ok((2.0 * mi / (hc + hg)).clamp(0.0, 1.0))
}

/// Mean over non-empty leaves of the dominant-class fraction.
pub fn leaf_purity(leaves: &[usize], truth: &[usize]) -> Result<f64> {
    if leaves.is_empty() {
        return Err(Error::contract("leaf purity needs at least one non-empty leaf"));
    }
    let counts = contingency(leaves, truth)?;
    let total: f64 = counts
        .iter()
        .map(|row| {
            let size: u64 = row.iter().sum();
            *row.iter().max().unwrap_or(&0) as f64 / size as f64
        })
        .sum();
    Ok(total / counts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acc_examples() {
        assert_eq!(acc_hungarian(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(acc_hungarian(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        // best map 0->1, 1->0 or 2->1: two correct out of four
        assert_eq!(acc_hungarian(&[0, 1, 2, 0], &[0, 1, 1, 1]).unwrap(), 0.5);
        assert!(acc_hungarian(&[], &[]).is_err());
    }

    #[test]
    fn hungarian_small() {
        let cost = vec![vec![4, 1, 3], vec![2, 0, 5], vec![3, 2, 2]];
        let a = hungarian(&cost);
        let total: i64 = a.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi(&[0, 0, 1, 1], &[5, 5, 3, 3]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[2, 2, 2], &[7, 7, 7]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 1, 2], &[7, 7, 7]).unwrap(), 0.0);
    }

    #[test]
    fn leaf_purity_examples() {
        assert!((leaf_purity(&[0, 0, 0, 1, 1], &[0, 0, 1, 1, 1]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(leaf_purity(&[0, 1, 2], &[0, 0, 1]).unwrap(), 1.0);
    }
}
