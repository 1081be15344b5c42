//! Inference: probability-correction strategy (PCS) and dataset evaluation.
//!
//! PCS rebalances logits by class pixel counts before the sigmoid: positives
//! (`z ≥ 0`) divide by the positive count, negatives by the negative count.
//! Scaling by a positive constant never flips a sign, so 0.5-thresholded
//! masks are unchanged; only the soft probabilities move.

use crate::data::{load_sample, Manifest};
use crate::error::{Error, Result};
use crate::metrics::{dice, f1, iou_metric, MetricsReport, PerImage};
use crate::model::TransResNet;
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Per-class logit normalization, then sigmoid. `z = 0` counts as positive.
pub fn pcs(logits: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!("pcs: expected [H,W] logits, got {:?}", s)));
    }
    let bad = logits.with_data(|d| d.iter().any(|v| !v.is_finite()));
    if bad {
        return Err(Error::Numerics("pcs: non-finite logits".into()));
    }
    let (n_pos, n_neg) = logits.with_data(|d| {
        let pos = d.iter().filter(|&&z| z >= 0.0).count();
        (pos, d.len() - pos)
    });
    let pos_div = n_pos.max(1) as f32;
    let neg_div = n_neg.max(1) as f32;
    let data = logits.with_data(|d| {
        d.iter()
            .map(|&z| {
                let scaled = if z >= 0.0 { z / pos_div } else { z / neg_div };
                1.0 / (1.0 + (-scaled).exp())
            })
            .collect::<Vec<f32>>()
    });
    Tensor::new(s, data)
}

/// Plain sigmoid probabilities for an `[H,W]` logit map.
pub fn sigmoid_probs(logits: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!("sigmoid_probs: expected [H,W], got {:?}", s)));
    }
    let data = logits.with_data(|d| {
        d.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect::<Vec<f32>>()
    });
    Tensor::new(s, data)
}

/// Anything that maps an image `[3,H,W]` to mask logits `[H,W]`.
pub trait MaskPredictor {
    fn predict_logits(&self, image: &Tensor<f32>) -> Result<Tensor<f32>>;
    fn input_hw(&self) -> (usize, usize);
}

impl MaskPredictor for TransResNet<f32> {
    fn predict_logits(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = image.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("predict: expected [3,H,W], got {:?}", s)));
        }
        let batched = image.reshape(&[1, s[0], s[1], s[2]])?;
        let out = crate::no_grad(|| self.forward(&batched, Mode::Eval))?;
        out.logits.reshape(&[s[1], s[2]])
    }

    fn input_hw(&self) -> (usize, usize) {
        self.cfg.cnn_input_hw
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub use_pcs: bool,
    /// `Some(thr)` switches dice/IoU to hard masks at that threshold;
    /// `None` keeps them soft. F1 always uses the 0.5-thresholded mask.
    pub threshold: Option<f32>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            use_pcs: true,
            threshold: None,
        }
    }
}

/// Evaluates every manifest entry; unreadable entries are skipped and
/// listed in the report. An empty manifest (or one with nothing evaluable)
/// is an error.
pub fn evaluate_dataset(
    model: &impl MaskPredictor,
    manifest: &Manifest,
    opts: EvalOptions,
) -> Result<MetricsReport> {
    if manifest.entries.is_empty() {
        return Err(Error::data("evaluation manifest is empty"));
    }
    let hw = model.input_hw();
    let mut per_image = Vec::with_capacity(manifest.entries.len());
    let mut skipped = Vec::new();
    for entry in &manifest.entries {
        let sample = match load_sample(entry, hw) {
            Ok(s) => s,
            Err(e) => {
                skipped.push(format!("{}: {e}", entry.id));
                continue;
            }
        };
        let logits = model.predict_logits(&sample.image)?;
        let probs = if opts.use_pcs {
            pcs(&logits)?
        } else {
            sigmoid_probs(&logits)?
        };
        let target = sample.mask.to_vec();
        let probs_v = probs.to_vec();
        let (d, i) = match opts.threshold {
            Some(thr) => {
                let hard: Vec<f32> =
                    probs_v.iter().map(|&p| if p >= thr { 1.0 } else { 0.0 }).collect();
                (dice(&hard, &target), iou_metric(&hard, &target))
            }
            None => (dice(&probs_v, &target), iou_metric(&probs_v, &target)),
        };
        let hard_half: Vec<f32> =
            probs_v.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
        let f = f1(&hard_half, &target);
        per_image.push(PerImage {
            id: sample.id,
            dice: d,
            iou: i,
            f1: f,
        });
    }
    if per_image.is_empty() {
        return Err(Error::data(format!(
            "no evaluable images ({} skipped)",
            skipped.len()
        )));
    }
    Ok(MetricsReport::from_per_image(per_image, skipped))
}
