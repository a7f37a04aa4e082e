//! Encoder from input space to the latent space.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::{sample_augmented, AugmentedPairs};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::Mlp;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub z: Matrix,
    pub z_plus: Option<Matrix>,
    /// Dataset rows the batch was drawn from.
    pub indices: Vec<usize>,
    /// Dataset rows used as augmented views, aligned with `indices`.
    pub neighbor_indices: Option<Vec<usize>>,
}

fn check_input(encoder: &Mlp, batch: &Matrix) -> Result<()> {
    if batch.cols() != encoder.input_dim() {
        return Err(Error::shape(format!(
            "encoder expects {} input columns, batch has {}",
            encoder.input_dim(),
            batch.cols()
        )));
    }
    Ok(())
}

pub fn encode(encoder: &Mlp, batch: &Matrix) -> Result<LatentBatch> {
    check_input(encoder, batch)?;
    let z = encoder.predict(batch)?;
    Ok(LatentBatch { z, z_plus: None, indices: (0..batch.rows()).collect(), neighbor_indices: None })
}

/// Draws one neighbor per row of `indices` and encodes both views.
///
/// `data` is the full dataset the neighbor table was built on.
pub fn encode_pair<R: Rng + ?Sized>(
    encoder: &Mlp,
    data: &Matrix,
    indices: &[usize],
    pairs: &AugmentedPairs,
    rng: &mut R,
) -> Result<LatentBatch> {
    check_input(encoder, data)?;
    if pairs.len() != data.rows() {
        return Err(Error::contract(format!(
            "neighbor table covers {} rows, data has {}",
            pairs.len(),
            data.rows()
        )));
    }
    let mut neighbors = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= data.rows() {
            return Err(Error::contract(format!("batch index {i} outside {} rows", data.rows())));
        }
        if pairs.neighbors[i].is_empty() {
            return Err(Error::contract(format!("row {i} has no neighbors")));
        }
        neighbors.push(sample_augmented(pairs, i, rng));
    }
    let z = encoder.predict(&data.select_rows(indices))?;
    let z_plus = encoder.predict(&data.select_rows(&neighbors))?;
    Ok(LatentBatch { z, z_plus: Some(z_plus), indices: indices.to_vec(), neighbor_indices: Some(neighbors) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense};
    use crate::rng::{stream, Domain};
    use alloc::vec;

    fn identity(d: usize) -> Mlp {
        Mlp::from_layers(vec![Dense { weights: Matrix::identity(d), bias: vec![0.0; d], activation: Activation::Identity }])
            .unwrap()
    }

    #[test]
    fn identity_encoder_is_identity() {
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, 7.0]]).unwrap();
        assert_eq!(encode(&identity(3), &x).unwrap().z, x);
        assert!(encode(&identity(2), &x).is_err());
    }

    #[test]
    fn two_points_swap() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let pairs = AugmentedPairs { neighbors: vec![vec![1], vec![0]] };
        let b = encode_pair(&identity(2), &x, &[0, 1], &pairs, &mut stream(1, Domain::Step, 0)).unwrap();
        assert_eq!(b.z_plus.unwrap(), x.select_rows(&[1, 0]));
        let empty = AugmentedPairs { neighbors: vec![vec![], vec![0]] };
        assert!(encode_pair(&identity(2), &x, &[0], &empty, &mut stream(1, Domain::Step, 0)).is_err());
    }
}
