//! Cross Grafting Module: fuses the deepest CNN feature map with a
//! transformer stage through additive QKV projection and self-attention.
//!
//! Both inputs are resampled to a common token grid and pushed through a
//! prep operator (1×1 conv → batch norm → GELU → flatten). After layer
//! norm, each branch gets its own Q/K/V projections; the branches fuse by
//! elementwise addition, and a single-head attention over the fused tokens
//! produces the grafted features. Two skip paths feed the output: a pooled
//! projection of the pre-norm token tensors into Y, and a convolutional
//! residual on the re-gridded Y into Z. The attention matrix also yields a
//! cross-transposed attention map (CTAM) that the objective supervises
//! against a ground-truth outer-product map.

use rand::Rng;

use crate::backbone::{nchw_to_tokens, tokens_to_nchw};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, LayerNorm, Linear, Mode, Visitor};
use crate::tensor::{concat, Element, Tensor};

/// One branch's query/key/value projections.
pub type QkvTriple<T> = (Tensor<T>, Tensor<T>, Tensor<T>);

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-6;

/// Intermediate products of one grafting pass.
pub struct GraftPack<T: Element> {
    /// Pre-norm token tensors `[B,N,d]` (the Y-skip inputs).
    pub r_tokens: Tensor<T>,
    pub s_tokens: Tensor<T>,
    /// Fused projections `[B,N,d]`.
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// Row-stochastic attention `[B,N,N]`.
    pub attn: Tensor<T>,
    /// Attention output `[B,N,d]`.
    pub x: Tensor<T>,
    /// Skip-enriched tokens `[B,N,d]`.
    pub y: Tensor<T>,
    /// Grafted features on the token grid `[B,d,g,g]`.
    pub z: Tensor<T>,
    /// Cross-transposed attention map `[B,1,N,N]`.
    pub ctam: Tensor<T>,
}

/// The prep operator: 1×1 conv to `d` channels, batch norm, GELU.
struct GraftPrep<T: Element> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

impl<T: Element> GraftPrep<T> {
    fn new(c_in: usize, d: usize, rng: &mut impl Rng) -> Self {
        GraftPrep {
            conv: Conv2d::new(c_in, d, 1, 1, 0, true, rng),
            bn: BatchNorm2d::new(d, BN_MOMENTUM, BN_EPS),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.gelu())
    }

    fn visit(&self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.conv.visit(&format!("{prefix}.conv"), v);
        self.bn.visit(&format!("{prefix}.bn"), v);
    }
}

struct QkvSet<T: Element> {
    q: Linear<T>,
    k: Linear<T>,
    v: Linear<T>,
}

impl<T: Element> QkvSet<T> {
    fn new(d: usize, rng: &mut impl Rng) -> Self {
        QkvSet {
            q: Linear::new(d, d, true, rng),
            k: Linear::new(d, d, true, rng),
            v: Linear::new(d, d, true, rng),
        }
    }

    fn forward(&self, tokens: &Tensor<T>) -> Result<QkvTriple<T>> {
        Ok((
            self.q.forward(tokens)?,
            self.k.forward(tokens)?,
            self.v.forward(tokens)?,
        ))
    }

    fn visit(&self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.q.visit(&format!("{prefix}.wq"), v);
        self.k.visit(&format!("{prefix}.wk"), v);
        self.v.visit(&format!("{prefix}.wv"), v);
    }
}

pub struct CrossGraftingModule<T: Element> {
    prep_r: GraftPrep<T>,
    prep_s: GraftPrep<T>,
    norm_r: LayerNorm<T>,
    norm_s: LayerNorm<T>,
    qkv_r: QkvSet<T>,
    /// `None` when both branches share `qkv_r`'s weights.
    qkv_s: Option<QkvSet<T>>,
    out_linear: Linear<T>,
    pool_proj: Linear<T>,
    z_conv: Conv2d<T>,
    ctam_conv: Conv2d<T>,
    ctam_bn: BatchNorm2d<T>,
    pub grid: usize,
    pub d: usize,
    pub alpha: f64,
}

impl<T: Element> CrossGraftingModule<T> {
    pub fn new(cfg: &ModelConfig, c_r: usize, c_s: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_graft;
        if d == 0 {
            return Err(Error::config("d_graft must be ≥ 1"));
        }
        let alpha = cfg.alpha_value();
        // negated form also rejects NaN
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(alpha > 0.0) {
            return Err(Error::config(format!("alpha must be > 0, got {alpha}")));
        }
        Ok(CrossGraftingModule {
            prep_r: GraftPrep::new(c_r, d, rng),
            prep_s: GraftPrep::new(c_s, d, rng),
            norm_r: LayerNorm::new(d, LN_EPS),
            norm_s: LayerNorm::new(d, LN_EPS),
            qkv_r: QkvSet::new(d, rng),
            qkv_s: (!cfg.shared_qkv).then(|| QkvSet::new(d, rng)),
            out_linear: Linear::new(d, d, true, rng),
            pool_proj: Linear::new(d, d, true, rng),
            z_conv: Conv2d::new(d, d, 3, 1, 1, true, rng),
            ctam_conv: Conv2d::new(1, 1, 3, 1, 1, true, rng),
            ctam_bn: BatchNorm2d::new(1, BN_MOMENTUM, BN_EPS),
            grid: cfg.graft_grid_side(),
            d,
            alpha,
        })
    }

    /// Resamples both graft inputs to the token grid and applies the prep
    /// operator; returns the pre-norm token tensors `[B,N,d]`.
    pub fn prepare_tokens(
        &self,
        r_feat: &Tensor<T>,
        s_feat: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let g = self.grid;
        let r = self.prep_r.forward(&r_feat.resize_bilinear(g, g)?, mode)?;
        let s = self.prep_s.forward(&s_feat.resize_bilinear(g, g)?, mode)?;
        Ok((nchw_to_tokens(&r)?, nchw_to_tokens(&s)?))
    }

    /// Per-branch Q/K/V projections of layer-normed tokens.
    pub fn project_qkv(
        &self,
        r_normed: &Tensor<T>,
        s_normed: &Tensor<T>,
    ) -> Result<(QkvTriple<T>, QkvTriple<T>)> {
        let r = self.qkv_r.forward(r_normed)?;
        let s = match &self.qkv_s {
            Some(set) => set.forward(s_normed)?,
            None => self.qkv_r.forward(s_normed)?,
        };
        Ok((r, s))
    }

    /// Attention over fused tokens: `A = softmax(Q·Kᵀ/α)`, `X = A·V`.
    pub fn grafted_attention(
        &self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let inv_alpha = T::from_f64(1.0 / self.alpha);
        let logits = q.bmm(&k.permute(&[0, 2, 1])?)?.mul_scalar(inv_alpha);
        let worst = logits.with_data(|d| {
            d.iter()
                .find(|v| !v.is_finite())
                .copied()
        });
        if let Some(bad) = worst {
            return Err(Error::Numerics(format!(
                "grafted attention produced a non-finite logit ({bad})"
            )));
        }
        let attn = logits.softmax_rows()?;
        let x = attn.bmm(v)?;
        Ok((x, attn))
    }

    /// The two skip paths: `Y = linear(X) + proj(pool(R̂ ⊕ Ŝ))` and
    /// `Z = grid(Y) + conv(grid(Y))`.
    pub fn graft_output(
        &self,
        x: &Tensor<T>,
        r_tokens: &Tensor<T>,
        s_tokens: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = x.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        if n != self.grid * self.grid || d != self.d {
            return Err(Error::shape(format!(
                "graft_output: tokens {:?} do not match grid {}²×{}",
                s, self.grid, self.d
            )));
        }
        // Channel concat, then adjacent-pair averaging back down to d.
        let both = concat(&[r_tokens.clone(), s_tokens.clone()], 2)?;
        let pooled = both.reshape(&[b, n, d, 2])?.mean_lastdim()?;
        let y = self.out_linear.forward(x)?.add(&self.pool_proj.forward(&pooled)?)?;
        let y_grid = tokens_to_nchw(&y, self.grid)?;
        let z = y_grid.add(&self.z_conv.forward(&y_grid)?)?;
        Ok((y, z))
    }

    /// `CTAM = GELU(BN(Conv(A + Aᵀ)))`, the attention matrix viewed as a
    /// one-channel image.
    pub fn ctam(&self, attn: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = attn.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::shape(format!("ctam: expected [B,N,N], got {:?}", s)));
        }
        let (b, n) = (s[0], s[1]);
        let sym = attn.add(&attn.permute(&[0, 2, 1])?)?;
        let img = sym.reshape(&[b, 1, n, n])?;
        Ok(self
            .ctam_bn
            .forward(&self.ctam_conv.forward(&img)?, mode)?
            .gelu())
    }

    /// Full grafting pass over the selected feature pair.
    pub fn forward(&self, r_feat: &Tensor<T>, s_feat: &Tensor<T>, mode: Mode) -> Result<GraftPack<T>> {
        let (r_tokens, s_tokens) = self.prepare_tokens(r_feat, s_feat, mode)?;
        let r_normed = self.norm_r.forward(&r_tokens)?;
        let s_normed = self.norm_s.forward(&s_tokens)?;
        let ((qr, kr, vr), (qs, ks, vs)) = self.project_qkv(&r_normed, &s_normed)?;
        let (q, k, v) = fuse_qkv((&qr, &kr, &vr), (&qs, &ks, &vs))?;
        let (x, attn) = self.grafted_attention(&q, &k, &v)?;
        let (y, z) = self.graft_output(&x, &r_tokens, &s_tokens)?;
        let ctam = self.ctam(&attn, mode)?;
        Ok(GraftPack {
            r_tokens,
            s_tokens,
            q,
            k,
            v,
            attn,
            x,
            y,
            z,
            ctam,
        })
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.prep_r.visit(&format!("{prefix}.prep_r"), v);
        self.prep_s.visit(&format!("{prefix}.prep_s"), v);
        self.norm_r.visit(&format!("{prefix}.norm_r"), v);
        self.norm_s.visit(&format!("{prefix}.norm_s"), v);
        self.qkv_r.visit(&format!("{prefix}.qkv_r"), v);
        if let Some(set) = &self.qkv_s {
            set.visit(&format!("{prefix}.qkv_s"), v);
        }
        self.out_linear.visit(&format!("{prefix}.out_linear"), v);
        self.pool_proj.visit(&format!("{prefix}.pool_proj"), v);
        self.z_conv.visit(&format!("{prefix}.z_conv"), v);
        self.ctam_conv.visit(&format!("{prefix}.ctam_conv"), v);
        self.ctam_bn.visit(&format!("{prefix}.ctam_bn"), v);
    }
}

/// Elementwise additive fusion of the per-branch projections.
pub fn fuse_qkv<T: Element>(
    r: (&Tensor<T>, &Tensor<T>, &Tensor<T>),
    s: (&Tensor<T>, &Tensor<T>, &Tensor<T>),
) -> Result<QkvTriple<T>> {
    Ok((r.0.add(s.0)?, r.1.add(s.1)?, r.2.add(s.2)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, spread_sample, DEFAULT_STEP};
    use crate::nn::Collector;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_cgm(seed: u64) -> CrossGraftingModule<f64> {
        let mut cfg = ModelConfig::toy();
        cfg.d_graft = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CrossGraftingModule::new(&cfg, 16, 12, &mut rng).unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn prepare_tokens_shapes_at_reference_scale() {
        // (32²×512, 28²×256) with grid 28 → both B×784×d
        let cfg = ModelConfig::paper();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cgm = CrossGraftingModule::<f32>::new(&cfg, 512, 256, &mut rng).unwrap();
        let r = Tensor::zeros(&[1, 512, 32, 32]);
        let s = Tensor::zeros(&[1, 256, 28, 28]);
        let (rt, st) = cgm.prepare_tokens(&r, &s, Mode::Train).unwrap();
        assert_eq!(rt.shape(), &[1, 784, 128]);
        assert_eq!(st.shape(), &[1, 784, 128]);
    }

    #[test]
    fn prepare_tokens_shapes_at_toy_scale() {
        // (8²×128, 8²×64) with grid 8 → both B×64×d
        let mut cfg = ModelConfig::toy();
        cfg.cnn_input_hw = (256, 256);
        cfg.trans_input_hw = (64, 64);
        cfg.trans_embed_base = 16;
        cfg.window_size = 4;
        cfg.d_graft = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cgm = CrossGraftingModule::<f32>::new(&cfg, 128, 64, &mut rng).unwrap();
        let r = Tensor::zeros(&[2, 128, 8, 8]);
        let s = Tensor::zeros(&[2, 64, 8, 8]);
        let (rt, st) = cgm.prepare_tokens(&r, &s, Mode::Train).unwrap();
        assert_eq!(rt.shape(), &[2, 64, 32]);
        assert_eq!(st.shape(), &[2, 64, 32]);
    }

    #[test]
    fn prepare_tokens_deterministic() {
        let cgm = toy_cgm(23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let r = randn(&mut rng, &[1, 16, 2, 2]);
        let s = randn(&mut rng, &[1, 12, 4, 4]);
        let (a1, b1) = cgm.prepare_tokens(&r, &s, Mode::Train).unwrap();
        let (a2, b2) = cgm.prepare_tokens(&r, &s, Mode::Train).unwrap();
        assert_eq!(a1.to_vec(), a2.to_vec());
        assert_eq!(b1.to_vec(), b2.to_vec());
    }

    #[test]
    fn qkv_identity_and_zero_weights() {
        let cgm = toy_cgm(25);
        let d = cgm.d;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let set = &cgm.qkv_r;
        set.q.weight.tensor.set_data(&eye);
        set.k.weight.tensor.set_data(&eye);
        set.v.weight.tensor.set_data(&eye);
        set.q.bias.as_ref().unwrap().tensor.set_data(&vec![0.0; d]);
        set.k.bias.as_ref().unwrap().tensor.set_data(&vec![0.0; d]);
        set.v.bias.as_ref().unwrap().tensor.set_data(&vec![0.0; d]);
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let tokens = randn(&mut rng, &[1, 4, d]);
        let (q, k, v) = set.forward(&tokens).unwrap();
        assert_eq!(q.to_vec(), tokens.to_vec());
        assert_eq!(k.to_vec(), tokens.to_vec());
        assert_eq!(v.to_vec(), tokens.to_vec());

        let zero = vec![0.0; d * d];
        set.q.weight.tensor.set_data(&zero);
        let (q, _, _) = set.forward(&tokens).unwrap();
        assert!(q.to_vec().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn qkv_projection_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let d = 6;
        let lin = Linear::<f64>::new(d, d, true, &mut rng);
        let tokens = Tensor::leaf(&[2, 3, d], (0..36).map(|i| (i as f64 * 0.1).sin()).collect()).unwrap();
        let report = check_gradients(
            &[tokens, lin.weight.tensor.clone(), lin.bias.as_ref().unwrap().tensor.clone()],
            &|ins| {
                let l = Linear {
                    weight: crate::nn::Param::new(ins[1].clone(), true),
                    bias: Some(crate::nn::Param::new(ins[2].clone(), true)),
                    d_in: d,
                    d_out: d,
                };
                Ok(l.forward(&ins[0])?.gelu().sum())
            },
            DEFAULT_STEP,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn fuse_identity_commutativity_cancellation() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let a = randn(&mut rng, &[1, 3, 4]);
        let b = randn(&mut rng, &[1, 3, 4]);
        let zero = Tensor::zeros(&[1, 3, 4]);
        let (fa, _, _) = fuse_qkv((&a, &a, &a), (&zero, &zero, &zero)).unwrap();
        assert_eq!(fa.to_vec(), a.to_vec());
        let (ab, _, _) = fuse_qkv((&a, &a, &a), (&b, &b, &b)).unwrap();
        let (ba, _, _) = fuse_qkv((&b, &b, &b), (&a, &a, &a)).unwrap();
        assert_eq!(ab.to_vec(), ba.to_vec());
        let neg = a.neg();
        let (cancelled, _, _) = fuse_qkv((&a, &a, &a), (&neg, &neg, &neg)).unwrap();
        assert!(cancelled.to_vec().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_token_attention_is_value() {
        let cgm = toy_cgm(29);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let q = randn(&mut rng, &[2, 1, 8]);
        let k = randn(&mut rng, &[2, 1, 8]);
        let v = randn(&mut rng, &[2, 1, 8]);
        let (x, attn) = cgm.grafted_attention(&q, &k, &v).unwrap();
        assert_eq!(attn.to_vec(), vec![1.0, 1.0]);
        assert_eq!(x.to_vec(), v.to_vec());
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let cgm = toy_cgm(31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let q = Tensor::zeros(&[1, 4, 8]);
        let k = randn(&mut rng, &[1, 4, 8]);
        let v = randn(&mut rng, &[1, 4, 8]);
        let (x, attn) = cgm.grafted_attention(&q, &k, &v).unwrap();
        for row in attn.to_vec().chunks(4) {
            for &a in row {
                assert!((a - 0.25).abs() < 1e-12);
            }
        }
        // Every output token is the mean of value tokens.
        let vd = v.to_vec();
        let mut mean = vec![0.0; 8];
        for tok in vd.chunks(8) {
            for (m, &x) in mean.iter_mut().zip(tok) {
                *m += x / 4.0;
            }
        }
        for tok in x.to_vec().chunks(8) {
            for (a, b) in tok.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_token_closed_form() {
        // N=2, d=1: Q=[1,0], K=[1,0], V=[2,4], α=1
        let mut cfg = ModelConfig::toy();
        cfg.d_graft = 1;
        cfg.alpha = Some(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let cgm = CrossGraftingModule::<f64>::new(&cfg, 4, 4, &mut rng).unwrap();
        let q = Tensor::new(&[1, 2, 1], vec![1.0, 0.0]).unwrap();
        let k = Tensor::new(&[1, 2, 1], vec![1.0, 0.0]).unwrap();
        let v = Tensor::new(&[1, 2, 1], vec![2.0, 4.0]).unwrap();
        let (x, attn) = cgm.grafted_attention(&q, &k, &v).unwrap();
        let e = std::f64::consts::E;
        let a = attn.to_vec();
        assert!((a[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((a[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        let x0 = x.to_vec()[0];
        assert!((x0 - (2.0 * e + 4.0) / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_error_names_value() {
        let cgm = toy_cgm(34);
        let q = Tensor::full(&[1, 2, 8], f64::MAX / 4.0);
        let k = q.clone();
        let v = Tensor::zeros(&[1, 2, 8]);
        let err = cgm.grafted_attention(&q, &k, &v).unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");
        assert!(err.contains("inf"), "{err}");
    }

    #[test]
    fn attention_rows_sum_to_one_any_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for alpha in [0.3, 1.0, 7.7] {
            let mut cfg = ModelConfig::toy();
            cfg.d_graft = 8;
            cfg.alpha = Some(alpha);
            let cgm = CrossGraftingModule::<f64>::new(&cfg, 4, 4, &mut rng).unwrap();
            let q = randn(&mut rng, &[2, 5, 8]);
            let k = randn(&mut rng, &[2, 5, 8]);
            let v = randn(&mut rng, &[2, 5, 8]);
            let (_, attn) = cgm.grafted_attention(&q, &k, &v).unwrap();
            for row in attn.to_vec().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn joint_qk_alpha_rescaling_leaves_attention_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let c = 4.0_f64;
        let mut cfg = ModelConfig::toy();
        cfg.d_graft = 8;
        cfg.alpha = Some(2.0);
        let base = CrossGraftingModule::<f64>::new(&cfg, 4, 4, &mut rng).unwrap();
        cfg.alpha = Some(2.0 * c);
        let scaled = CrossGraftingModule::<f64>::new(&cfg, 4, 4, &mut rng).unwrap();
        let q = randn(&mut rng, &[1, 6, 8]);
        let k = randn(&mut rng, &[1, 6, 8]);
        let v = randn(&mut rng, &[1, 6, 8]);
        let (_, a1) = base.grafted_attention(&q, &k, &v).unwrap();
        let root = c.sqrt();
        let (_, a2) = scaled
            .grafted_attention(&q.mul_scalar(root), &k.mul_scalar(root), &v)
            .unwrap();
        for (x, y) in a1.to_vec().iter().zip(a2.to_vec()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_conv_makes_z_pure_reshape_of_y() {
        let cgm = toy_cgm(37);
        let d = cgm.d;
        cgm.z_conv.weight.tensor.set_data(&vec![0.0; d * d * 9]);
        cgm.z_conv.bias.as_ref().unwrap().tensor.set_data(&vec![0.0; d]);
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let n = cgm.grid * cgm.grid;
        let x = randn(&mut rng, &[1, n, d]);
        let r = randn(&mut rng, &[1, n, d]);
        let s = randn(&mut rng, &[1, n, d]);
        let (y, z) = cgm.graft_output(&x, &r, &s).unwrap();
        let y_grid = tokens_to_nchw(&y, cgm.grid).unwrap();
        assert_eq!(z.to_vec(), y_grid.to_vec());
    }

    #[test]
    fn zero_linear_makes_y_the_pooled_skip() {
        let cgm = toy_cgm(39);
        let d = cgm.d;
        cgm.out_linear.weight.tensor.set_data(&vec![0.0; d * d]);
        cgm.out_linear.bias.as_ref().unwrap().tensor.set_data(&vec![0.0; d]);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let n = cgm.grid * cgm.grid;
        let x = randn(&mut rng, &[1, n, d]);
        let r = randn(&mut rng, &[1, n, d]);
        let s = randn(&mut rng, &[1, n, d]);
        let (y, _) = cgm.graft_output(&x, &r, &s).unwrap();
        // Hand-compose the pooled skip: pairwise channel average then proj.
        let both = concat(&[r, s], 2).unwrap();
        let pooled = both.reshape(&[1, n, d, 2]).unwrap().mean_lastdim().unwrap();
        let expect = cgm.pool_proj.forward(&pooled).unwrap();
        for (a, b) in y.to_vec().iter().zip(expect.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ctam_symmetry_properties() {
        let cgm = toy_cgm(41);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // A + Aᵀ exactly symmetric for random A
        let a = randn(&mut rng, &[2, 5, 5]);
        let sym = a.add(&a.permute(&[0, 2, 1]).unwrap()).unwrap();
        let symt = sym.permute(&[0, 2, 1]).unwrap();
        assert_eq!(sym.to_vec(), symt.to_vec()); // bitwise
        // A symmetric → S = 2A
        let half = sym.mul_scalar(0.5);
        let doubled = half.add(&half.permute(&[0, 2, 1]).unwrap()).unwrap();
        for (x, y) in doubled.to_vec().iter().zip(sym.to_vec()) {
            assert!((x - y).abs() < 1e-15);
        }
        // zero A, zero conv bias → CTAM exactly zero (GELU(BN(0)) with zero
        // batch stats: 0/√eps → 0)
        cgm.ctam_conv.bias.as_ref().unwrap().tensor.set_data(&[0.0]);
        let zero_a = Tensor::zeros(&[1, 4, 4]);
        let out = cgm.ctam(&zero_a, Mode::Train).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_grid_z_equals_hand_composed_mlp() {
        // g=1: attention collapses (X=V); Z must equal the hand-built path
        // linear(V)+proj(pool) + conv-residual with only the center tap.
        let mut cfg = ModelConfig::toy();
        cfg.d_graft = 4;
        cfg.graft_grid = Some(1);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let cgm = CrossGraftingModule::<f64>::new(&cfg, 5, 3, &mut rng).unwrap();
        // Batch of 2 so train-mode batch norm has ≥ 2 samples per channel.
        let r_feat = randn(&mut rng, &[2, 5, 2, 2]);
        let s_feat = randn(&mut rng, &[2, 3, 3, 3]);
        let pack = cgm.forward(&r_feat, &s_feat, Mode::Train).unwrap();
        assert_eq!(pack.attn.to_vec(), vec![1.0, 1.0]);
        assert_eq!(pack.x.to_vec(), pack.v.to_vec());

        // Hand-compose Y and Z from the same weights.
        let y_hand = cgm
            .out_linear
            .forward(&pack.v)
            .unwrap()
            .add(
                &cgm.pool_proj
                    .forward(
                        &concat(&[pack.r_tokens.clone(), pack.s_tokens.clone()], 2)
                            .unwrap()
                            .reshape(&[2, 1, 4, 2])
                            .unwrap()
                            .mean_lastdim()
                            .unwrap(),
                    )
                    .unwrap(),
            )
            .unwrap();
        for (a, b) in pack.y.to_vec().iter().zip(y_hand.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
        // 3×3 conv on a 1×1 grid sees only its center tap.
        let w = cgm.z_conv.weight.tensor.to_vec();
        let bias = cgm.z_conv.bias.as_ref().unwrap().tensor.to_vec();
        let yv = y_hand.to_vec();
        let d = 4;
        let mut z_hand = vec![0.0; 2 * d];
        for bi in 0..2 {
            for co in 0..d {
                let mut acc = bias[co];
                for ci in 0..d {
                    acc += w[(co * d + ci) * 9 + 4] * yv[bi * d + ci];
                }
                z_hand[bi * d + co] = yv[bi * d + co] + acc;
            }
        }
        for (a, b) in pack.z.to_vec().iter().zip(&z_hand) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn end_to_end_cgm_gradcheck() {
        let mut cfg = ModelConfig::toy();
        cfg.d_graft = 4;
        cfg.graft_grid = Some(2);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let cgm = CrossGraftingModule::<f64>::new(&cfg, 3, 2, &mut rng).unwrap();
        let r_feat = randn(&mut rng, &[1, 3, 2, 2]);
        let s_feat = randn(&mut rng, &[1, 2, 2, 2]);

        let mut collector = Collector::new();
        cgm.visit("cgm", &mut collector);
        let params: Vec<Tensor<f64>> = collector.params().map(|(_, t, _)| t.clone()).collect();
        let sel: Vec<Vec<usize>> = params.iter().map(|p| spread_sample(p.numel(), 6)).collect();
        let report = check_gradients(
            &params,
            &|_| {
                let pack = cgm.forward(&r_feat, &s_feat, Mode::Train)?;
                // Sum both outputs so every parameter participates.
                Ok(pack.z.sum().add(&pack.ctam.sum())?.mul_scalar(1.0))
            },
            DEFAULT_STEP,
            Some(&sel),
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "rel err {}", report.max_rel_err);
    }
}
