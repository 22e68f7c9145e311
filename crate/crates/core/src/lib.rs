//! Latent disease clusters and patient subgroups from diagnosis-count data.
//!
//! Two topic models are provided: latent Dirichlet allocation over diagnosis
//! tokens (collapsed Gibbs sampling) and a Poisson Dirichlet model over
//! diagnosis counts relative to age/sex expected counts (Metropolis-Hastings
//! within Gibbs). Downstream modules cluster patients on their topic
//! posteriors, compare subgroups with survival and comorbidity statistics,
//! and embed diseases in two dimensions.

pub mod cluster;
pub mod cohort;
pub mod dist;
pub mod embed;
pub mod error;
pub mod lda;
pub mod pdm;
pub mod rates;
pub mod rng;
pub mod stats;
pub mod topic;

pub use error::{Error, ErrorClass, Result};
