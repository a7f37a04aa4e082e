//! File formats, checkpoints, exports and the evaluation pipeline around
//! [`hdtree_core`]. The `hdtree` binary is a thin command-line layer on top.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod export;
pub mod io;

pub use error::{Error, Result};
