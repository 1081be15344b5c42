//! The two encoding streams: a truncated residual CNN over the
//! high-resolution input and a windowed-attention transformer over the
//! low-resolution input.
//!
//! Stage shapes follow two closed-form laws. CNN stage i ∈ 2..=5 emits
//! `[B, c0·2^(i−1), H/2^i, W/2^i]`; transformer stage i ∈ 1..=3 emits
//! `[B, e0·2^i, (Ht/p)/2^(i−1), (Wt/p)/2^(i−1)]`, and stage 4 — a separate
//! patch-merging block kept for the graft-pair ablation — matches stage 3's
//! shape.

mod cnn;
mod transformer;

pub use cnn::CnnBackbone;
pub use transformer::{
    nchw_to_tokens, tokens_to_nchw, PatchMerging, SwinBlock, TransformerBackbone, WindowAttention,
};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-branch stage outputs, all NCHW.
pub struct FeaturePyramid<T: Element> {
    /// CNN stages 2..=5.
    pub cnn: Vec<Tensor<T>>,
    /// Transformer stages 1..=3 plus the stage-4 patch-merging output.
    pub trans: Vec<Tensor<T>>,
}

impl<T: Element> FeaturePyramid<T> {
    /// CNN stage i ∈ 2..=5.
    pub fn cnn_stage(&self, i: usize) -> Result<&Tensor<T>> {
        if !(2..=5).contains(&i) || self.cnn.len() != 4 {
            return Err(Error::shape(format!("cnn stage {i} absent from pyramid")));
        }
        Ok(&self.cnn[i - 2])
    }

    /// Transformer stage i ∈ 1..=4.
    pub fn trans_stage(&self, i: usize) -> Result<&Tensor<T>> {
        if !(1..=4).contains(&i) || self.trans.len() != 4 {
            return Err(Error::shape(format!("transformer stage {i} absent from pyramid")));
        }
        Ok(&self.trans[i - 1])
    }
}

/// The graft pair: `(cnn[5], trans[pair])`. The default pair is stage 2,
/// whose spatial size sits closest to the deepest CNN map; other stages are
/// the ablation rows.
pub fn select_graft_pair<T: Element>(
    pyr: &FeaturePyramid<T>,
    pair: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((pyr.cnn_stage(5)?.clone(), pyr.trans_stage(pair)?.clone()))
}

/// Closed-form expected stage shapes for a config (batch 1); used by the
/// shape-law tests and the acceptance suite.
pub fn expected_shapes(cfg: &ModelConfig) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let cnn = (2..=5)
        .map(|i| vec![1, cfg.cnn_channels(i), cfg.cnn_grid(i), cfg.cnn_grid(i)])
        .collect();
    let mut trans: Vec<Vec<usize>> = (1..=3)
        .map(|i| vec![1, cfg.trans_channels(i), cfg.trans_grid(i), cfg.trans_grid(i)])
        .collect();
    trans.push(trans[2].clone());
    (cnn, trans)
}
