//! Evaluation metrics and the agglomerative baseline.

mod clustering;
mod dendrogram;
mod generative;
mod rop;

pub use clustering::{acc_hungarian, contingency, hungarian, leaf_purity, nmi};
pub use dendrogram::{
    cut_merges, dendrogram_purity, merges_to_dendrogram, ward_agglomerative, ward_linkage, Dendrogram, Merge,
    WardResult,
};
pub use generative::{frechet_distance, frechet_in_pca, ll_elbo, recon_loss, ElboSteps, GaussianSummary, Pca};
pub use rop::{rop, time_bin, RopReport};
