//! Central-finite-difference gradient verification.
//!
//! The harness perturbs inputs one element at a time and compares
//! `(f(x+h) − f(x−h)) / 2h` against the analytic gradient from the reverse
//! sweep. It only re-runs the user-supplied forward closure, so it stays
//! independent of any backward rule it is checking. Checks are meant to run
//! at `f64`, where `h = 1e-5` leaves ~1e-10 of truncation noise.

use crate::error::Result;
use crate::tensor::Tensor;

/// A forward computation under test: leaves in, scalar loss out.
pub type ForwardFn<'a> = &'a dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with an absolute floor: `|a−n| / max(|a|, |n|, 1)`.
/// The floor keeps finite-difference noise on near-zero gradients from
/// registering as a large relative error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Result of one gradient check: the largest relative error observed and
/// where it occurred.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_element: usize,
    pub checked: usize,
}

impl CheckReport {
    fn new() -> Self {
        CheckReport {
            max_rel_err: 0.0,
            worst_input: 0,
            worst_element: 0,
            checked: 0,
        }
    }

    fn note(&mut self, input: usize, element: usize, err: f64) {
        self.checked += 1;
        if err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst_input = input;
            self.worst_element = element;
        }
    }
}

/// Checks `∂f/∂x_i` for every element of every tensor in `inputs` against
/// central differences. `forward` must return a scalar tensor built from the
/// given leaves. `elements`: `None` checks all elements, `Some(idxs)` only
/// the listed flat indices (for large parameter tensors).
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    forward: ForwardFn,
    step: f64,
    elements: Option<&[Vec<usize>]>,
) -> Result<CheckReport> {
    // Analytic gradients from one reverse sweep.
    for t in inputs {
        t.zero_grad();
    }
    let loss = forward(inputs)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut report = CheckReport::new();
    for (ti, t) in inputs.iter().enumerate() {
        let base = t.to_vec();
        let all: Vec<usize>;
        let idxs: &[usize] = match elements {
            Some(sel) => &sel[ti],
            None => {
                all = (0..t.numel()).collect();
                &all
            }
        };
        for &ei in idxs {
            let mut bumped = base.clone();
            bumped[ei] = base[ei] + step;
            t.set_data(&bumped);
            let up = crate::no_grad(|| forward(inputs))?.item();
            bumped[ei] = base[ei] - step;
            t.set_data(&bumped);
            let down = crate::no_grad(|| forward(inputs))?.item();
            t.set_data(&base);
            let numeric = (up - down) / (2.0 * step);
            report.note(ti, ei, rel_err(analytic[ti][ei], numeric));
        }
    }
    Ok(report)
}

/// Convenience: check all elements of all inputs at the default step.
pub fn check_all(inputs: &[Tensor<f64>], forward: ForwardFn) -> Result<CheckReport> {
    check_gradients(inputs, forward, DEFAULT_STEP, None)
}

/// Deterministically samples up to `k` element indices per tensor, spread
/// across the buffer, for large-parameter checks.
pub fn spread_sample(numel: usize, k: usize) -> Vec<usize> {
    if numel <= k {
        return (0..numel).collect();
    }
    (0..k).map(|i| i * numel / k).collect()
}

// ── Named suites (the `gradcheck` CLI surface) ───────────────────────

use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::nn::{Collector, Mode};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::leaf(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn sampled_param_check(params: &[Tensor<f64>], forward: ForwardFn, per_tensor: usize) -> Result<f64> {
    let sel: Vec<Vec<usize>> = params
        .iter()
        .map(|p| spread_sample(p.numel(), per_tensor))
        .collect();
    Ok(check_gradients(params, forward, DEFAULT_STEP, Some(&sel))?.max_rel_err)
}

/// Finite-difference checks for every differentiable primitive; returns
/// `(check name, max rel err)` per primitive.
pub fn check_primitives() -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut out = Vec::new();
    let mut push = |name: &str, inputs: &[Tensor<f64>], f: ForwardFn| -> Result<()> {
        let report = check_all(inputs, f)?;
        out.push((name.to_string(), report.max_rel_err));
        Ok(())
    };

    let a = randn(&mut rng, &[4, 6]);
    let b = randn(&mut rng, &[6, 3]);
    push("matmul", &[a, b], &|ins| Ok(ins[0].matmul(&ins[1])?.gelu().sum()))?;

    let a = randn(&mut rng, &[2, 3, 4]);
    let b = randn(&mut rng, &[2, 4, 5]);
    push("bmm", &[a, b], &|ins| Ok(ins[0].bmm(&ins[1])?.sigmoid().sum()))?;

    let x = randn(&mut rng, &[3, 5]);
    push("softmax_rows", &[x], &|ins| {
        ins[0].softmax_rows()?.mul(&ins[0])?.sum().pipe()
    })?;

    let x = randn(&mut rng, &[2, 7]);
    push("gelu", &[x], &|ins| Ok(ins[0].gelu().sum()))?;

    let x = randn(&mut rng, &[2, 7]);
    push("sigmoid", &[x], &|ins| Ok(ins[0].sigmoid().sum()))?;

    let x = randn(&mut rng, &[3, 6]);
    let gain = randn(&mut rng, &[6]);
    let bias = randn(&mut rng, &[6]);
    push("layer_norm", &[x, gain, bias], &|ins| {
        ins[0].layer_norm(&ins[1], &ins[2], 1e-6)?.gelu().sum().pipe()
    })?;

    let x = randn(&mut rng, &[2, 3, 4, 4]);
    let gain = randn(&mut rng, &[3]);
    let bias = randn(&mut rng, &[3]);
    push("batch_norm", &[x, gain, bias], &|ins| {
        let (y, _, _) = ins[0].batch_norm_train(&ins[1], &ins[2], 1e-5)?;
        Ok(y.gelu().sum())
    })?;

    let x = randn(&mut rng, &[1, 2, 5, 5]);
    let w = randn(&mut rng, &[3, 2, 3, 3]);
    push("conv2d", &[x, w], &|ins| {
        ins[0].conv2d(&ins[1], 1, 1)?.gelu().sum().pipe()
    })?;

    let x = randn(&mut rng, &[1, 2, 4, 4]);
    push("resize_bilinear", &[x], &|ins| {
        ins[0].resize_bilinear(7, 5)?.gelu().sum().pipe()
    })?;

    let x = randn(&mut rng, &[1, 2, 6, 6]);
    push("avg_pool2d", &[x], &|ins| ins[0].avg_pool2d(2, 2)?.gelu().sum().pipe())?;

    let x = randn(&mut rng, &[1, 2, 6, 6]);
    push("max_pool2d", &[x], &|ins| ins[0].max_pool2d(2, 2)?.gelu().sum().pipe())?;

    let x = randn(&mut rng, &[2, 3, 4]);
    push("permute_reshape", &[x], &|ins| {
        ins[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?.gelu().sum().pipe()
    })?;

    let a = randn(&mut rng, &[1, 2, 3, 3]);
    let b = randn(&mut rng, &[1, 1, 3, 3]);
    push("concat", &[a, b], &|ins| {
        crate::tensor::concat(&[ins[0].clone(), ins[1].clone()], 1)?.gelu().sum().pipe()
    })?;

    let x = randn(&mut rng, &[2, 3, 4]);
    let suffix = randn(&mut rng, &[3, 4]);
    push("add_suffix", &[x, suffix], &|ins| {
        ins[0].add_suffix(&ins[1])?.gelu().sum().pipe()
    })?;

    let z = randn(&mut rng, &[3, 3]);
    let t = Tensor::new(&[3, 3], (0..9).map(|i| (i as f64 / 10.0).fract()).collect()).unwrap();
    push("bce_with_logits", &[z], &|ins| {
        crate::tensor::bce_with_logits(&ins[0], &t, None)
    })?;

    let a = randn(&mut rng, &[2, 5]);
    let b = randn(&mut rng, &[2, 5]);
    b.update_data(|d| {
        for v in d.iter_mut() {
            if v.abs() < 0.2 {
                *v = 0.25;
            }
        }
    });
    push("elementwise", &[a, b], &|ins| {
        let sum = ins[0].add(&ins[1])?;
        let prod = ins[0].mul(&ins[1])?;
        let quot = ins[0].div(&ins[1])?;
        sum.add(&prod)?.add(&quot)?.sum().pipe()
    })?;

    Ok(out)
}

trait Pipe {
    fn pipe(self) -> Result<Tensor<f64>>;
}
impl Pipe for Tensor<f64> {
    fn pipe(self) -> Result<Tensor<f64>> {
        Ok(self)
    }
}

/// Tiny-scale configuration for f64 model checks.
fn grad_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.cnn_channel_base = 4;
    cfg.trans_embed_base = 4;
    cfg.d_graft = 8;
    cfg
}

/// Sampled parameter checks through both encoder branches.
pub fn check_encoders() -> Result<Vec<(String, f64)>> {
    let cfg = grad_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc1);
    let mut out = Vec::new();

    let cnn = crate::backbone::CnnBackbone::<f64>::new(&cfg, &mut rng);
    let img = randn(&mut rng, &[1, 3, 64, 64]);
    let mut c = Collector::new();
    cnn.visit("cnn", &mut c);
    let params: Vec<Tensor<f64>> = c.params().map(|(_, t, _)| t.clone()).collect();
    let err = sampled_param_check(&params, &|_| {
        let stages = cnn.forward(&img, Mode::Train)?;
        let mut acc = stages[0].sum();
        for s in &stages[1..] {
            acc = acc.add(&s.sum())?;
        }
        Ok(acc)
    }, 3)?;
    out.push(("cnn_backbone".to_string(), err));

    let trans = crate::backbone::TransformerBackbone::<f64>::new(&cfg, &mut rng);
    let img = randn(&mut rng, &[1, 3, 32, 32]);
    let mut c = Collector::new();
    trans.visit("trans", &mut c);
    let params: Vec<Tensor<f64>> = c.params().map(|(_, t, _)| t.clone()).collect();
    let err = sampled_param_check(&params, &|_| {
        let stages = trans.forward(&img)?;
        let mut acc = stages[0].sum();
        for s in &stages[1..] {
            acc = acc.add(&s.sum())?;
        }
        Ok(acc)
    }, 3)?;
    out.push(("transformer_backbone".to_string(), err));
    Ok(out)
}

/// Sampled parameter check through a full grafting pass.
pub fn check_cgm() -> Result<Vec<(String, f64)>> {
    let mut cfg = grad_cfg();
    cfg.graft_grid = Some(2);
    let mut rng = ChaCha8Rng::seed_from_u64(0xc6);
    let cgm = crate::cgm::CrossGraftingModule::<f64>::new(&cfg, 3, 2, &mut rng)?;
    let r_feat = randn(&mut rng, &[1, 3, 2, 2]);
    let s_feat = randn(&mut rng, &[1, 2, 2, 2]);
    let mut c = Collector::new();
    cgm.visit("cgm", &mut c);
    let params: Vec<Tensor<f64>> = c.params().map(|(_, t, _)| t.clone()).collect();
    let err = sampled_param_check(&params, &|_| {
        let pack = cgm.forward(&r_feat, &s_feat, Mode::Train)?;
        pack.z.sum().add(&pack.ctam.sum())?.pipe()
    }, 6)?;
    Ok(vec![("cgm".to_string(), err)])
}

/// Checks the loss surfaces w.r.t. their logit inputs.
pub fn check_objective() -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b1);
    let mut out = Vec::new();

    let z = randn(&mut rng, &[1, 1, 4, 4]);
    let t = Tensor::new(&[1, 1, 4, 4], (0..16).map(|i| f64::from(i % 2 == 0)).collect()).unwrap();
    let report = check_all(&[z], &|ins| crate::objective::seg_loss(&ins[0], &t))?;
    out.push(("seg_loss".to_string(), report.max_rel_err));

    let ctam = randn(&mut rng, &[1, 1, 4, 4]);
    let masks = Tensor::new(&[1, 1, 8, 8], (0..64).map(|i| f64::from(i % 3 == 0)).collect()).unwrap();
    let report = check_all(&[ctam], &|ins| crate::objective::att_loss(&ins[0], &masks, 4.0))?;
    out.push(("att_loss".to_string(), report.max_rel_err));

    let a = randn(&mut rng, &[1, 1, 4, 4]);
    let b = randn(&mut rng, &[1, 1, 4, 4]);
    let report = check_all(&[a, b], &|ins| {
        crate::objective::aux_loss(Some(&ins[0]), Some(&ins[1]), &t)
    })?;
    out.push(("aux_loss".to_string(), report.max_rel_err));
    Ok(out)
}

/// Central-difference check of the fully composed model at a tiny scale:
/// batch-1 image through both branches, grafting, decoder, and the joint
/// objective, sampling `per_tensor` entries of every parameter.
pub fn check_full_model(per_tensor: usize) -> Result<CheckReport> {
    let cfg = grad_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(0xf01d);
    let model = crate::model::TransResNet::<f64>::new(&cfg, &mut rng)?;
    let img = Tensor::new(
        &[1, 3, 64, 64],
        (0..3 * 64 * 64).map(|i| 0.5 + 0.4 * ((i as f64) * 0.37).sin()).collect(),
    )
    .unwrap();
    let masks = Tensor::new(
        &[1, 1, 64, 64],
        (0..64 * 64)
            .map(|i| {
                let (y, x) = ((i / 64) as f64 - 32.0, (i % 64) as f64 - 32.0);
                f64::from(y * y + x * x < 180.0)
            })
            .collect(),
    )
    .unwrap();
    let mut c = Collector::new();
    model.visit(&mut c);
    let params: Vec<Tensor<f64>> = c.params().map(|(_, t, _)| t.clone()).collect();
    let sel: Vec<Vec<usize>> = params
        .iter()
        .map(|p| spread_sample(p.numel(), per_tensor))
        .collect();
    check_gradients(
        &params,
        &|_| {
            let out = model.forward(&img, Mode::Train)?;
            let (loss, _) = crate::objective::model_loss(&out, &masks, cfg.lambda_aux, 4.0)?;
            Ok(loss)
        },
        DEFAULT_STEP,
        Some(&sel),
    )
}
