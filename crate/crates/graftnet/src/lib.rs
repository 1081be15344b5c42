//! graftnet: a scale-configurable dual-branch segmentation network.
//!
//! Two encoders — a truncated residual CNN over the high-resolution input and
//! a windowed-attention transformer over the low-resolution input — feed a
//! cross-grafting module that fuses their features through additive QKV
//! projection and self-attention. The grafted features drive a staggered
//! decoder that predicts a binary segmentation mask, trained with a joint
//! BCE/IoU/attention objective.
//!
//! Everything runs on the crate's own reverse-mode autodiff tensor core, so
//! every gradient in the stack can be checked against finite differences.
//! See the `book/` guide for a chapter-by-chapter tour; the chapters' code
//! blocks are compiled and run as doc-tests via [`guide`].

pub mod augment;
pub mod backbone;
pub mod cgm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod guide;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use tensor::{no_grad, Element, Tensor};
