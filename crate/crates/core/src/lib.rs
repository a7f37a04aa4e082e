//! Hierarchical vector-quantized diffusion over a binary tree codebook.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every numerical piece
//! of the model: dense matrices and MLPs with hand-written backward passes,
//! the AdamW optimizer, the soft contrastive loss on the Poincaré ball, the
//! tree codebook with its quantization loss, the conditional DDPM decoder,
//! the training loop, lineage graphs and the evaluation metrics.
//!
//! File formats, checkpoints on disk and the command line live in the `hdtree`
//! companion crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod htc;
pub mod lineage;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scl;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;
