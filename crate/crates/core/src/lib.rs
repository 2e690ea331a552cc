//! Evolutionary breadth-first search over a generative model's latent space
//! for attribute-balanced sets of synthetic identities.
//!
//! The generator, attribute classifier and face detector are abstracted behind
//! an [`oracle::OracleHandle`]. A calibrated Gaussian-mixture world stands in
//! for a real biased generator so every behavior is testable on a laptop;
//! real models attach through the line-delimited JSON protocol in
//! [`oracle::external`].

pub mod audit;
pub mod baseline;
pub mod config;
pub mod error;
pub mod manifest;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod search;

pub use error::{Error, Result};
pub use model::{
    DatasetManifest, GroupLabel, GroupStatus, GroupSummary, IdentityRecord, LatentSpaceSpec,
    LatentVector, OracleVerdict, SearchConfig, SpaceTag, VariationDirection, VariationSpec,
};
pub use oracle::OracleHandle;
