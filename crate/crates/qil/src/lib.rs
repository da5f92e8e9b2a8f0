//! Low-bit-width neural network toolkit built around trainable
//! quantization intervals.
//!
//! Weights and activations are quantized per layer through intervals whose
//! center, radius and curvature are learned jointly with the network
//! weights from the task loss, so pruning and clipping ranges place
//! themselves where the task needs them. The crate provides:
//!
//! - [`quantizer`] -- the interval transformers, discretizer, analytic
//!   straight-through gradients, thresholds and pruning metrics
//! - [`nn`] -- a small dense-tensor layer library (conv / fc / batch norm /
//!   pooling) with hand-written backprop and per-layer quantizers
//! - [`train`] -- momentum SGD with parameter groups, progressive
//!   bit-width finetuning, quantizer-only training and logit distillation
//! - [`deploy`] / [`bitpack`] -- the integer deployment path: bit-plane
//!   packed tensors and AND+popcount convolution, bit-exact against the
//!   reference integer arithmetic
//! - [`data`] -- IDX-format image datasets, class splits and a synthetic
//!   digit generator for self-contained experiments
//! - [`checkpoint`] / [`report`] -- binary model snapshots and CSV metric
//!   exports

pub mod bitpack;
pub mod checkpoint;
pub mod data;
pub mod deploy;
pub mod error;
pub mod nn;
pub mod quantizer;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{QilError, Result};
pub use tensor::Tensor;
