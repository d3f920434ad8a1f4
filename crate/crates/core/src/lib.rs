//! Attention-based multiple-instance learning on bags of slice features, with
//! adversarial gender debiasing, stratified cross-validation, fold ensembling
//! and per-class decision thresholds.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diff;
pub mod error;
pub mod inference;
pub mod kv;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use error::{Error, FormatError, Result};
pub use labels::{Gender, Label, Stratum, N_CLASSES};
pub use tensor::Tensor;
