//! Neural layers over the tensor core: linear, convolution, and the two
//! norms, plus the parameter/buffer visitor the optimizer and checkpointer
//! walk.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Train/eval switch; batch norm is the only layer that cares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named, gradient-tracked tensor. `decay` marks whether weight decay
/// applies (norm gains/biases opt out).
#[derive(Clone)]
pub struct Param<T: Element> {
    pub tensor: Tensor<T>,
    pub decay: bool,
}

impl<T: Element> Param<T> {
    pub fn new(tensor: Tensor<T>, decay: bool) -> Self {
        Param { tensor, decay }
    }
}

/// What a visited entry is: a learnable parameter or a persistent buffer
/// (running statistics) that checkpoints alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Param { decay: bool },
    Buffer,
}

/// Walks every parameter and buffer of a module tree with its dotted path.
pub trait Visitor<T: Element> {
    fn entry(&mut self, name: &str, tensor: &Tensor<T>, kind: EntryKind);
}

impl<T: Element, F: FnMut(&str, &Tensor<T>, EntryKind)> Visitor<T> for F {
    fn entry(&mut self, name: &str, tensor: &Tensor<T>, kind: EntryKind) {
        self(name, tensor, kind)
    }
}

pub(crate) fn visit_param<T: Element>(v: &mut dyn Visitor<T>, name: String, p: &Param<T>) {
    v.entry(&name, &p.tensor, EntryKind::Param { decay: p.decay });
}

/// Kaiming-uniform fan-in initialization: `U(−√(6/fan_in), √(6/fan_in))`.
/// Samples are drawn in f64 so a seed yields the same weights at any dtype.
pub fn kaiming_uniform<T: Element>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::leaf(shape, data).expect("consistent by construction")
}

/// Small uniform init for embeddings and learned constants.
pub fn small_uniform<T: Element>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::leaf(shape, data).expect("consistent by construction")
}

// ── Linear ───────────────────────────────────────────────────────────

/// Tokenwise affine map `[..., in] -> [..., out]`; weight stored `[in, out]`.
pub struct Linear<T: Element> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub d_in: usize,
    pub d_out: usize,
}

impl<T: Element> Linear<T> {
    pub fn new(d_in: usize, d_out: usize, with_bias: bool, rng: &mut impl Rng) -> Self {
        let weight = Param::new(kaiming_uniform(&[d_in, d_out], d_in, rng), true);
        let bias = with_bias.then(|| {
            Param::new(Tensor::leaf(&[d_out], vec![T::ZERO; d_out]).unwrap(), true)
        });
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let last = *s.last().ok_or_else(|| Error::shape("linear: rank-0 input"))?;
        if last != self.d_in {
            return Err(Error::shape(format!(
                "linear: input width {last} != {}",
                self.d_in
            )));
        }
        let rows = x.numel() / last;
        let y = x
            .reshape(&[rows, last])?
            .matmul(&self.weight.tensor)?;
        let mut out_shape = s.to_vec();
        *out_shape.last_mut().unwrap() = self.d_out;
        let y = y.reshape(&out_shape)?;
        match &self.bias {
            Some(b) => y.add_suffix(&b.tensor),
            None => Ok(y),
        }
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn Visitor<T>) {
        visit_param(v, format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            visit_param(v, format!("{prefix}.bias"), b);
        }
    }
}

// ── Conv2d ───────────────────────────────────────────────────────────

pub struct Conv2d<T: Element> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> Conv2d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = Param::new(
            kaiming_uniform(&[c_out, c_in, kernel, kernel], fan_in, rng),
            true,
        );
        let bias = with_bias.then(|| {
            Param::new(Tensor::leaf(&[c_out], vec![T::ZERO; c_out]).unwrap(), true)
        });
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.conv2d(&self.weight.tensor, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => y.add_channel_bias(&b.tensor),
            None => Ok(y),
        }
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn Visitor<T>) {
        visit_param(v, format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            visit_param(v, format!("{prefix}.bias"), b);
        }
    }
}

// ── BatchNorm2d ──────────────────────────────────────────────────────

/// Per-channel batch norm with running statistics (momentum update in train
/// mode). Eval before any train step is an error: the running stats carry a
/// batches-seen counter that checkpoints with them.
pub struct BatchNorm2d<T: Element> {
    pub gain: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub batches_seen: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm2d {
            gain: Param::new(
                Tensor::leaf(&[channels], vec![T::ONE; channels]).unwrap(),
                false,
            ),
            bias: Param::new(Tensor::leaf(&[channels], vec![T::ZERO; channels]).unwrap(), false),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::ONE),
            batches_seen: Tensor::zeros(&[1]),
            momentum,
            eps,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => {
                let (y, mean, var) = x.batch_norm_train(&self.gain.tensor, &self.bias.tensor, self.eps)?;
                let m = T::from_f64(self.momentum);
                let one_m = T::ONE - m;
                self.running_mean.update_data(|rm| {
                    for (r, &b) in rm.iter_mut().zip(&mean) {
                        *r = one_m * *r + m * b;
                    }
                });
                self.running_var.update_data(|rv| {
                    for (r, &b) in rv.iter_mut().zip(&var) {
                        *r = one_m * *r + m * b;
                    }
                });
                self.batches_seen.update_data(|c| c[0] += T::ONE);
                Ok(y)
            }
            Mode::Eval => {
                if self.batches_seen.item() == T::ZERO {
                    return Err(Error::Numerics(
                        "batch norm eval with uninitialized running stats".into(),
                    ));
                }
                self.running_mean.with_data(|rm| {
                    self.running_var.with_data(|rv| {
                        x.batch_norm_eval(&self.gain.tensor, &self.bias.tensor, rm, rv, self.eps)
                    })
                })
            }
        }
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn Visitor<T>) {
        visit_param(v, format!("{prefix}.gain"), &self.gain);
        visit_param(v, format!("{prefix}.bias"), &self.bias);
        v.entry(&format!("{prefix}.running_mean"), &self.running_mean, EntryKind::Buffer);
        v.entry(&format!("{prefix}.running_var"), &self.running_var, EntryKind::Buffer);
        v.entry(&format!("{prefix}.batches_seen"), &self.batches_seen, EntryKind::Buffer);
    }
}

// ── LayerNorm ────────────────────────────────────────────────────────

pub struct LayerNorm<T: Element> {
    pub gain: Param<T>,
    pub bias: Param<T>,
    pub eps: f64,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(width: usize, eps: f64) -> Self {
        LayerNorm {
            gain: Param::new(Tensor::leaf(&[width], vec![T::ONE; width]).unwrap(), false),
            bias: Param::new(Tensor::leaf(&[width], vec![T::ZERO; width]).unwrap(), false),
            eps,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gain.tensor, &self.bias.tensor, self.eps)
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn Visitor<T>) {
        visit_param(v, format!("{prefix}.gain"), &self.gain);
        visit_param(v, format!("{prefix}.bias"), &self.bias);
    }
}

/// Collects `(name, tensor, kind)` triples from a visit closure, in visit
/// order. Names must be unique within a model.
pub struct Collector<T: Element> {
    pub entries: Vec<(String, Tensor<T>, EntryKind)>,
}

impl<T: Element> Collector<T> {
    pub fn new() -> Self {
        Collector { entries: Vec::new() }
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>, bool)> {
        self.entries.iter().filter_map(|(n, t, k)| match k {
            EntryKind::Param { decay } => Some((n.as_str(), t, *decay)),
            EntryKind::Buffer => None,
        })
    }
}

impl<T: Element> Default for Collector<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Visitor<T> for Collector<T> {
    fn entry(&mut self, name: &str, tensor: &Tensor<T>, kind: EntryKind) {
        self.entries.push((name.to_string(), tensor.clone(), kind));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_shapes_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::<f64>::new(4, 3, true, &mut rng);
        let x = Tensor::zeros(&[2, 5, 4]);
        let y = lin.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 5, 3]);
    }

    #[test]
    fn batch_norm_eval_before_train_errors() {
        let bn = BatchNorm2d::<f64>::new(2, 0.1, 1e-5);
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(bn.forward(&x, Mode::Eval).is_err());
        let _ = bn.forward(&x, Mode::Train).unwrap();
        assert!(bn.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = kaiming_uniform::<f64>(&[16, 16], 16, &mut rng);
        let bound = (6.0 / 16.0_f64).sqrt();
        assert!(w.to_vec().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn visitor_collects_named_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::<f64>::new(3, 8, 3, 1, 1, true, &mut rng);
        let bn = BatchNorm2d::<f64>::new(8, 0.1, 1e-5);
        let mut c = Collector::new();
        conv.visit("stem.conv", &mut c);
        bn.visit("stem.bn", &mut c);
        let names: Vec<&str> = c.entries.iter().map(|(n, _, _)| n.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "stem.conv.weight",
                "stem.conv.bias",
                "stem.bn.gain",
                "stem.bn.bias",
                "stem.bn.running_mean",
                "stem.bn.running_var",
                "stem.bn.batches_seen",
            ]
        );
        // norm affine params opt out of weight decay
        let decays: Vec<bool> = c.params().map(|(_, _, d)| d).collect();
        assert_eq!(decays, vec![true, true, false, false]);
    }
}
