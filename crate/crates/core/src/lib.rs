//! Quantization-aware training with learned gradient quantization.
//!
//! Weight gradients are quantized by a small shared calibration network
//! (`hypernet`) whose parameters are trained through a delayed weight
//! update: the update expression of iteration `t` stays in the graph and is
//! differentiated by the loss of iteration `t + 1`.

pub mod autodiff;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod hypernet;
pub mod meta_update;
pub mod models;
pub mod quant;
pub mod tensor;

pub use autodiff::{Gradients, Precision, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
