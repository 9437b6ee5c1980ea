//! Counterfactual outcome estimation over time from observational sequences.
//!
//! The crate bundles everything needed to run desk-scale experiments:
//!
//! - [`simulator`]: a confounded tumor-growth panel generator with ground-truth
//!   counterfactual continuations.
//! - [`diffnum`]: dense `f64` tensors with a reverse-mode tape, recurrent and
//!   causal-attention sequence encoders, an outcome head and Adam.
//! - [`clustering`]: treatment-agnostic diagonal GMM / k-means sub-grouping.
//! - [`transport`]: Sinkhorn and exact Wasserstein-1 solvers, the sub-group
//!   alignment loss and bound diagnostics.
//! - [`masking`]: random temporal masking of input covariates.
//! - [`training`]: the factual + alignment training schedule and rollouts.
//! - [`evaluation`]: normalized RMSE tables, attention audits, ablation suites.

pub mod clustering;
pub mod diffnum;
pub mod error;
pub mod evaluation;
pub mod masking;
pub mod rng;
pub mod simulator;
pub mod training;
pub mod transport;

pub use error::{Error, Result};

/// Hex SHA-256 of a serializable value's canonical JSON encoding.
pub fn content_hash<T: serde::Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(value).expect("config types always serialize");
    hex::encode(Sha256::digest(&bytes))
}
