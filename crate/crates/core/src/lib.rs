//! Training and evaluation toolkit for cross-spectral (VIS / SWIR / MWIR /
//! LWIR) body identification.
//!
//! - [`data`]: records, manifests, synthetic generation, detection ingest
//! - [`model`]: patch-token transformer with global and region tokens
//! - [`training`]: identity and batch-hard triplet losses, samplers, trainer
//! - [`eval`]: templates, cosine matching, CMC / mAP, 1:N protocol
//! - [`harness`]: run directories, configuration, experiment commands

pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod training;

pub use error::{Error, Result};
