//! Missing-modality representation learning with prompt attention and
//! hierarchical contrastive objectives.
//!
//! The pipeline: [`dataio`] loads or synthesizes two-modality embedding
//! datasets and drops modalities according to a seeded missing pattern;
//! [`promptattn`] generates features for absent modalities from the
//! available one; [`contrast`] aligns modalities (cross-modal NT-Xent) and
//! clusters classes (within-modality supervised contrast); [`trainer`]
//! optimizes everything with Adam; [`metrics`] scores the result; [`cli`]
//! wraps it all into reproducible commands.

pub mod cli;
pub mod contrast;
pub mod dataio;
mod error;
pub mod metrics;
pub mod numkernel;
pub mod promptattn;
pub mod trainer;

pub use error::{Error, Result};
