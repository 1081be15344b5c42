//! SGD with momentum and classical weight decay, plus the cosine-annealed
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::{Collector, EntryKind};
use crate::tensor::{Element, Tensor};

/// `η(t) = eta_min + ½(lr0 − eta_min)(1 + cos(πt/T))`, for `0 ≤ t ≤ T`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, eta_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::config("cosine schedule needs a positive horizon"));
    }
    if t > total {
        return Err(Error::config(format!("step {t} beyond horizon {total}")));
    }
    let frac = t as f64 / total as f64;
    Ok(eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

struct Slot<T: Element> {
    name: String,
    tensor: Tensor<T>,
    decay: bool,
    momentum_buf: Vec<T>,
}

/// Stochastic gradient descent over a model's visited parameters:
/// `buf ← momentum·buf + (grad + wd·param)`, `param ← param − lr·buf`.
/// Weight decay skips parameters flagged `decay: false` (norm affine terms).
pub struct Sgd<T: Element> {
    slots: Vec<Slot<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Element> Sgd<T> {
    /// Builds from a parameter collection (buffers are ignored).
    pub fn new(collector: &Collector<T>, momentum: f64, weight_decay: f64) -> Self {
        let slots = collector
            .entries
            .iter()
            .filter_map(|(name, tensor, kind)| match kind {
                EntryKind::Param { decay } => Some(Slot {
                    name: name.clone(),
                    tensor: tensor.clone(),
                    decay: *decay,
                    momentum_buf: vec![T::ZERO; tensor.numel()],
                }),
                EntryKind::Buffer => None,
            })
            .collect();
        Sgd {
            slots,
            momentum,
            weight_decay,
        }
    }

    /// One update at learning rate `lr`. Parameters whose gradient is unset
    /// (not reached by the last backward pass) are left untouched.
    pub fn step(&mut self, lr: f64) {
        let m = T::from_f64(self.momentum);
        let wd = T::from_f64(self.weight_decay);
        let lr = T::from_f64(lr);
        for slot in &mut self.slots {
            let Some(grad) = slot.tensor.grad() else {
                continue;
            };
            let buf = &mut slot.momentum_buf;
            slot.tensor.update_data(|param| {
                for i in 0..param.len() {
                    let mut g = grad[i];
                    if slot.decay {
                        g += wd * param[i];
                    }
                    buf[i] = m * buf[i] + g;
                    param[i] = param[i] - lr * buf[i];
                }
            });
        }
    }

    pub fn zero_grad(&self) {
        for slot in &self.slots {
            slot.tensor.zero_grad();
        }
    }

    /// Named momentum buffers, for checkpointing.
    pub fn momentum_buffers(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.slots
            .iter()
            .map(|s| (s.name.as_str(), s.momentum_buf.as_slice()))
    }

    /// Restores a momentum buffer by parameter name.
    pub fn restore_momentum(&mut self, name: &str, buf: &[T]) -> Result<()> {
        let slot = self
            .slots
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::data(format!("unknown optimizer buffer `{name}`")))?;
        if slot.momentum_buf.len() != buf.len() {
            return Err(Error::shape(format!(
                "optimizer buffer `{name}`: {} vs {} elements",
                slot.momentum_buf.len(),
                buf.len()
            )));
        }
        slot.momentum_buf.copy_from_slice(buf);
        Ok(())
    }
}
