//! Time-bin consistency of latent neighborhoods.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{effective_k, knn_rows};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopReport {
    /// Mean over all samples.
    pub overall: f64,
    /// `(bin, mean over the samples in that bin)`, bins ascending.
    pub per_bin: Vec<(i64, f64)>,
}

pub fn time_bin(t: f64) -> i64 {
    libm::floor(t) as i64
}

/// Fraction of each sample's `k` latent neighbors sharing its time bin
/// (or, with `adjacent`, lying at most one bin away).
pub fn rop(embeddings: &Matrix, timestamps: &[f64], k: usize, adjacent: bool) -> Result<RopReport> {
    let n = embeddings.rows();
    if timestamps.len() != n {
        return Err(Error::shape(format!("{} timestamps for {n} samples", timestamps.len())));
    }
    if n < 2 {
        return Err(Error::contract("neighbor consistency needs at least two samples"));
    }
    let k = effective_k(n, k);
    let bins: Vec<i64> = timestamps.iter().map(|&t| time_bin(t)).collect();
    let neighbors = knn_rows(embeddings, k, 0..n);
    let mut per_bin: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for (i, nb) in neighbors.iter().enumerate() {
        let hits = nb
            .iter()
            .filter(|&&j| if adjacent { (bins[j] - bins[i]).abs() <= 1 } else { bins[j] == bins[i] })
            .count();
        let frac = hits as f64 / k as f64;
        total += frac;
        let e = per_bin.entry(bins[i]).or_insert((0.0, 0));
        e.0 += frac;
        e.1 += 1;
    }
    Ok(RopReport {
        overall: total / n as f64,
        per_bin: per_bin.into_iter().map(|(b, (s, c))| (b, s / c as f64)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_bin_is_one() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        assert_eq!(rop(&x, &[0.1, 0.2, 0.3, 0.9], 2, false).unwrap().overall, 1.0);
    }

    #[test]
    fn mixed_neighbors() {
        // every bin-2 sample sees neighbor bins {2, 2, 1}; the bin-1 sample sees {2, 2, 2}
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        let r = rop(&x, &[2.5, 2.0, 2.9, 1.5], 3, false).unwrap();
        assert_eq!(r.per_bin.len(), 2);
        assert_eq!(r.per_bin[0], (1, 0.0));
        assert!((r.per_bin[1].1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.overall - 0.5).abs() < 1e-15);
        assert_eq!(rop(&x, &[2.5, 2.0, 2.9, 1.5], 3, true).unwrap().overall, 1.0);
    }
}
