//! Clustering of paired image/text feature data in which some instances lack
//! one modality.
//!
//! Each modality is encoded into a shared-width subspace. Clustering-
//! conditioned generators produce the missing modality's subspace
//! representation from the present one, discriminators keep those fakes
//! realistic, and KL consistency losses tie each modality's soft cluster
//! assignment to the fused one.

pub mod cgan;
pub mod checkpoint;
pub mod clusterhead;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/assignments.md")]
    mod assignments {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
