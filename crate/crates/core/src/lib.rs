//! Tensor convolutional neural networks.
//!
//! Convolution weights are stored and trained as truncated Tucker factors
//! (a small core tensor and one factor matrix per weight mode). The crate
//! covers the tensor algebra, layer forward/backward passes, model
//! construction and parameter accounting, the data pipeline, the training
//! loop and the evaluation metrics.

pub mod data;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
