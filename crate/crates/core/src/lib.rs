//! Action-unit detection with landmark-adaptive ROI nets, multi-label
//! learning and LSTM temporal fusion, built on a small autodiff core.
//!
//! Layout:
//! - [`tensor_core`]: tensors, the differentiation tape and gradient checking
//! - [`roi_geometry`]: landmarks to AU centers to feature-grid crop windows
//! - [`model`]: backbone, the 20 ROI subnets, heads and checkpoints
//! - [`lstm`]: the LSTM cell and stacks over 24-frame sequences
//! - [`loss_metrics`]: offset multi-label loss, per-AU F1, subject folds
//! - [`training`]: SGD with momentum and the train/eval loops for every mode
//! - [`data_synth`]: deterministic synthetic faces and the on-disk dataset format

pub mod data_synth;
pub mod error;
pub mod loss_metrics;
pub mod lstm;
pub mod model;
pub mod roi_geometry;
pub mod tensor_core;
pub mod training;

pub use error::{Error, Result};
