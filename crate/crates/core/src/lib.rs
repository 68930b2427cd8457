//! Cross-device identity linking: candidate generation, similarity
//! features, stacked classifiers and pairwise ranking over browsing logs.

pub mod candidates;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod ingest;
pub mod learners;
pub mod matcher;
pub mod pipeline;
pub mod rng;
pub mod stages;
pub mod synthgen;
pub mod types;

pub use error::{Error, Result};
