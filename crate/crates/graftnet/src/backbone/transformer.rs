//! Windowed-attention transformer branch: patch embedding with a learned
//! absolute position embedding, three stages of window-attention + MLP
//! blocks separated by patch merging, and a fourth patch-merging block kept
//! for the graft-pair ablation.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerNorm, Linear, Param, Visitor};
use crate::tensor::{Element, Tensor};

const LN_EPS: f64 = 1e-6;
const MLP_RATIO: usize = 4;

/// `[B,N,C]` tokens on a `g×g` grid → `[B,C,g,g]`.
pub fn tokens_to_nchw<T: Element>(x: &Tensor<T>, g: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let (b, n, c) = (s[0], s[1], s[2]);
    if n != g * g {
        return Err(Error::shape(format!("tokens_to_nchw: {n} tokens vs grid {g}²")));
    }
    x.permute(&[0, 2, 1])?.reshape(&[b, c, g, g])
}

/// `[B,C,g,g]` → `[B,N,C]` tokens in row-major grid order.
pub fn nchw_to_tokens<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    x.reshape(&[b, c, h * w])?.permute(&[0, 2, 1])
}

/// Partitions `[B,N,C]` tokens on a `g×g` grid into non-overlapping `ws×ws`
/// windows: `[B·(g/ws)², ws², C]`.
fn window_partition<T: Element>(x: &Tensor<T>, g: usize, ws: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let (b, c) = (s[0], s[2]);
    let nw = g / ws;
    x.reshape(&[b, nw, ws, nw, ws, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b * nw * nw, ws * ws, c])
}

fn window_reverse<T: Element>(x: &Tensor<T>, b: usize, g: usize, ws: usize) -> Result<Tensor<T>> {
    let c = x.shape()[2];
    let nw = g / ws;
    x.reshape(&[b, nw, nw, ws, ws, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, g * g, c])
}

/// Multi-head self-attention within a window of tokens.
pub struct WindowAttention<T: Element> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
    pub dim: usize,
}

impl<T: Element> WindowAttention<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        WindowAttention {
            wq: Linear::new(dim, dim, true, rng),
            wk: Linear::new(dim, dim, true, rng),
            wv: Linear::new(dim, dim, true, rng),
            proj: Linear::new(dim, dim, true, rng),
            heads,
            dim,
        }
    }

    /// `x`: `[G, n, C]` windows of n tokens each.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let (gr, n, c) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, self.dim / self.heads);
        let split = |t: Tensor<T>| -> Result<Tensor<T>> {
            t.reshape(&[gr, n, h, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[gr * h, n, dh])
        };
        let q = split(self.wq.forward(x)?)?;
        let k = split(self.wk.forward(x)?)?;
        let v = split(self.wv.forward(x)?)?;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let logits = q.bmm(&k.permute(&[0, 2, 1])?)?.mul_scalar(scale);
        let attn = logits.softmax_rows()?;
        let out = attn
            .bmm(&v)?
            .reshape(&[gr, h, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[gr, n, c])?;
        self.proj.forward(&out)
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.wq.visit(&format!("{prefix}.wq"), v);
        self.wk.visit(&format!("{prefix}.wk"), v);
        self.wv.visit(&format!("{prefix}.wv"), v);
        self.proj.visit(&format!("{prefix}.proj"), v);
    }
}

/// Pre-norm windowed attention + MLP block with residual connections.
/// `shift > 0` cyclically rolls the grid before partitioning (no attention
/// masking is applied to the wrapped windows).
pub struct SwinBlock<T: Element> {
    ln1: LayerNorm<T>,
    pub attn: WindowAttention<T>,
    ln2: LayerNorm<T>,
    mlp1: Linear<T>,
    mlp2: Linear<T>,
    window: usize,
    shift: usize,
}

impl<T: Element> SwinBlock<T> {
    pub fn new(dim: usize, heads: usize, window: usize, shift: usize, rng: &mut impl Rng) -> Self {
        SwinBlock {
            ln1: LayerNorm::new(dim, LN_EPS),
            attn: WindowAttention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim, LN_EPS),
            mlp1: Linear::new(dim, dim * MLP_RATIO, true, rng),
            mlp2: Linear::new(dim * MLP_RATIO, dim, true, rng),
            window,
            shift,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, grid: usize) -> Result<Tensor<T>> {
        let s = x.shape();
        let (b, c) = (s[0], s[2]);
        let normed = self.ln1.forward(x)?;
        let spatial = normed.reshape(&[b, grid, grid, c])?;
        let spatial = if self.shift > 0 {
            spatial
                .roll_axis(1, grid - self.shift)?
                .roll_axis(2, grid - self.shift)?
        } else {
            spatial
        };
        let windows = window_partition(&spatial.reshape(&[b, grid * grid, c])?, grid, self.window)?;
        let attended = self.attn.forward(&windows)?;
        let merged = window_reverse(&attended, b, grid, self.window)?;
        let merged = if self.shift > 0 {
            merged
                .reshape(&[b, grid, grid, c])?
                .roll_axis(1, self.shift)?
                .roll_axis(2, self.shift)?
                .reshape(&[b, grid * grid, c])?
        } else {
            merged
        };
        let x = x.add(&merged)?;
        let y = self.mlp2.forward(&self.mlp1.forward(&self.ln2.forward(&x)?)?.gelu())?;
        x.add(&y)
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.ln1.visit(&format!("{prefix}.ln1"), v);
        self.attn.visit(&format!("{prefix}.attn"), v);
        self.ln2.visit(&format!("{prefix}.ln2"), v);
        self.mlp1.visit(&format!("{prefix}.mlp1"), v);
        self.mlp2.visit(&format!("{prefix}.mlp2"), v);
    }
}

/// 2×2 neighborhood concatenation (4C) + layer norm + linear halving (2C).
pub struct PatchMerging<T: Element> {
    norm: LayerNorm<T>,
    reduce: Linear<T>,
}

impl<T: Element> PatchMerging<T> {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        PatchMerging {
            norm: LayerNorm::new(dim * 4, LN_EPS),
            reduce: Linear::new(dim * 4, dim * 2, false, rng),
        }
    }

    /// `[B, g², C]` → `[B, (g/2)², 2C]`.
    pub fn forward(&self, x: &Tensor<T>, grid: usize) -> Result<Tensor<T>> {
        if !grid.is_multiple_of(2) {
            return Err(Error::shape(format!("patch merging needs even grid, got {grid}")));
        }
        let s = x.shape();
        let (b, c) = (s[0], s[2]);
        let half = grid / 2;
        let grouped = x
            .reshape(&[b, half, 2, half, 2, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[b, half * half, 4 * c])?;
        self.reduce.forward(&self.norm.forward(&grouped)?)
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.norm.visit(&format!("{prefix}.norm"), v);
        self.reduce.visit(&format!("{prefix}.reduce"), v);
    }
}

pub struct TransformerBackbone<T: Element> {
    patch_embed: Conv2d<T>,
    pos_emb: Param<T>,
    embed_norm: LayerNorm<T>,
    stages: Vec<Vec<SwinBlock<T>>>,
    merges: Vec<PatchMerging<T>>,
    merge4: PatchMerging<T>,
    input_hw: (usize, usize),
    grids: [usize; 3],
}

impl<T: Element> TransformerBackbone<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let c1 = cfg.trans_channels(1);
        let g1 = cfg.trans_grid(1);
        let patch_embed = Conv2d::new(3, c1, cfg.patch_size, cfg.patch_size, 0, true, rng);
        let pos_emb = Param::new(crate::nn::small_uniform(&[g1 * g1, c1], 0.02, rng), true);
        let embed_norm = LayerNorm::new(c1, LN_EPS);
        let mut stages = Vec::with_capacity(3);
        for stage in 1..=3usize {
            let dim = cfg.trans_channels(stage);
            let heads = cfg.heads_per_stage[stage - 1];
            let blocks = (0..cfg.trans_depth)
                .map(|bi| {
                    let shift = if cfg.shifted_windows && bi % 2 == 1 {
                        cfg.window_size / 2
                    } else {
                        0
                    };
                    SwinBlock::new(dim, heads, cfg.window_size, shift, rng)
                })
                .collect();
            stages.push(blocks);
        }
        let merges = vec![
            PatchMerging::new(cfg.trans_channels(1), rng),
            PatchMerging::new(cfg.trans_channels(2), rng),
        ];
        // The stage-4 merging consumes stage-2 features, producing a map with
        // stage-3's shape for the graft-pair ablation.
        let merge4 = PatchMerging::new(cfg.trans_channels(2), rng);
        TransformerBackbone {
            patch_embed,
            pos_emb,
            embed_norm,
            stages,
            merges,
            merge4,
            input_hw: cfg.trans_input_hw,
            grids: [cfg.trans_grid(1), cfg.trans_grid(2), cfg.trans_grid(3)],
        }
    }

    /// Stage outputs 1..=3 plus the stage-4 merging output, all NCHW.
    pub fn forward(&self, img: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let s = img.shape();
        if s.len() != 4 || s[1] != 3 || (s[2], s[3]) != self.input_hw {
            return Err(Error::shape(format!(
                "transformer input {:?} does not match configured {}×{}",
                s, self.input_hw.0, self.input_hw.1
            )));
        }
        let embedded = self.patch_embed.forward(img)?;
        let mut tokens = nchw_to_tokens(&embedded)?
            .add_suffix(&self.pos_emb.tensor)?;
        tokens = self.embed_norm.forward(&tokens)?;

        let mut out = Vec::with_capacity(4);
        let mut stage2_tokens = None;
        for (si, blocks) in self.stages.iter().enumerate() {
            let grid = self.grids[si];
            if si > 0 {
                tokens = self.merges[si - 1].forward(&tokens, self.grids[si - 1])?;
            }
            for block in blocks {
                tokens = block.forward(&tokens, grid)?;
            }
            if si == 1 {
                stage2_tokens = Some(tokens.clone());
            }
            out.push(tokens_to_nchw(&tokens, grid)?);
        }
        let s4 = self.merge4.forward(&stage2_tokens.expect("stage 2 ran"), self.grids[1])?;
        out.push(tokens_to_nchw(&s4, self.grids[2])?);
        Ok(out)
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.patch_embed.visit(&format!("{prefix}.patch_embed"), v);
        crate::nn::visit_param(v, format!("{prefix}.pos_emb"), &self.pos_emb);
        self.embed_norm.visit(&format!("{prefix}.embed_norm"), v);
        for (si, blocks) in self.stages.iter().enumerate() {
            for (bi, block) in blocks.iter().enumerate() {
                block.visit(&format!("{prefix}.stage{}.blk{bi}", si + 1), v);
            }
        }
        for (mi, merge) in self.merges.iter().enumerate() {
            merge.visit(&format!("{prefix}.merge{}", mi + 1), v);
        }
        self.merge4.visit(&format!("{prefix}.merge4"), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_stage_shapes_follow_the_law() {
        // 64×64 input, patch 4, e0=16: stages 16²×32, 8²×64, 4²×128
        let mut cfg = ModelConfig::toy();
        cfg.trans_input_hw = (64, 64);
        cfg.trans_embed_base = 16;
        cfg.window_size = 4;
        cfg.heads_per_stage = vec![2, 4, 8];
        cfg.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = TransformerBackbone::<f32>::new(&cfg, &mut rng);
        let out = net.forward(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert_eq!(out[0].shape(), &[1, 32, 16, 16]);
        assert_eq!(out[1].shape(), &[1, 64, 8, 8]);
        assert_eq!(out[2].shape(), &[1, 128, 4, 4]);
        assert_eq!(out[3].shape(), &[1, 128, 4, 4]); // stage-4 merge
    }

    #[test]
    fn uniform_attention_mean_pools_values() {
        // One window, one head, zero q/k weights (uniform attention),
        // identity value/proj: every output token is the token mean.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 3;
        let attn = WindowAttention::<f64>::new(dim, 1, &mut rng);
        let zero = vec![0.0; dim * dim];
        attn.wq.weight.tensor.set_data(&zero);
        attn.wk.weight.tensor.set_data(&zero);
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        attn.wv.weight.tensor.set_data(&eye);
        attn.proj.weight.tensor.set_data(&eye);
        attn.wq.bias.as_ref().unwrap().tensor.set_data(&[0.0; 3]);
        attn.wk.bias.as_ref().unwrap().tensor.set_data(&[0.0; 3]);
        attn.wv.bias.as_ref().unwrap().tensor.set_data(&[0.0; 3]);
        attn.proj.bias.as_ref().unwrap().tensor.set_data(&[0.0; 3]);

        let x = Tensor::new(&[1, 4, 3], (0..12).map(|i| i as f64 * 0.5).collect()).unwrap();
        let y = attn.forward(&x).unwrap();
        let xd = x.to_vec();
        let mut mean = [0.0; 3];
        for tok in xd.chunks(3) {
            for (m, &v) in mean.iter_mut().zip(tok) {
                *m += v / 4.0;
            }
        }
        for tok in y.to_vec().chunks(3) {
            for (a, b) in tok.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_under_seed() {
        let cfg = ModelConfig::toy();
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            TransformerBackbone::<f32>::new(&cfg, &mut rng)
        };
        let img = Tensor::new(
            &[1, 3, 32, 32],
            (0..3 * 32 * 32).map(|i| (i as f32 * 0.001).sin()).collect(),
        )
        .unwrap();
        let a = build().forward(&img).unwrap();
        let b = build().forward(&img).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_vec(), y.to_vec()); // bitwise
        }
    }

    #[test]
    fn shifted_windows_flag_changes_output() {
        let mut cfg = ModelConfig::toy();
        cfg.trans_depth = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let plain = TransformerBackbone::<f32>::new(&cfg, &mut rng);
        cfg.shifted_windows = true;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let shifted = TransformerBackbone::<f32>::new(&cfg, &mut rng);
        let img = Tensor::new(
            &[1, 3, 32, 32],
            (0..3 * 32 * 32).map(|i| (i as f32 * 0.01).cos()).collect(),
        )
        .unwrap();
        let a = plain.forward(&img).unwrap();
        let b = shifted.forward(&img).unwrap();
        assert_ne!(a[2].to_vec(), b[2].to_vec());
    }

    #[test]
    fn cnn_and_trans_mode_interplay_full_pyramid() {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cnn = crate::backbone::CnnBackbone::<f32>::new(&cfg, &mut rng);
        let trans = TransformerBackbone::<f32>::new(&cfg, &mut rng);
        let pyr = crate::backbone::FeaturePyramid {
            cnn: cnn.forward(&Tensor::zeros(&[2, 3, 64, 64]), Mode::Train).unwrap(),
            trans: trans.forward(&Tensor::zeros(&[2, 3, 32, 32])).unwrap(),
        };
        let (r, s) = crate::backbone::select_graft_pair(&pyr, 2).unwrap();
        assert_eq!(r.shape(), &[2, 128, 2, 2]);
        assert_eq!(s.shape(), &[2, 32, 4, 4]);
        assert!(crate::backbone::select_graft_pair(&pyr, 5).is_err());
    }
}
