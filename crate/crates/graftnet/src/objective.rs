//! Joint training objective: segmentation loss (BCE + soft IoU), attention
//! loss against a ground-truth outer-product map, and the deep-supervision
//! auxiliary loss, combined as `L = L_seg + L_att + λ·L_aux`.

use crate::error::{Error, Result};
use crate::model::ModelOutput;
use crate::tensor::{bce_with_logits, Element, Tensor};

/// Per-element weight slope for the weighted BCE of the attention loss:
/// `w = 1 + β·t` emphasizes the sparse positive entries of the target map.
pub const ATT_BETA: f64 = 4.0;

/// Scalar loss values of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_seg: f64,
    pub l_att: f64,
    pub l_aux: f64,
    pub l_total: f64,
    pub lambda_aux: f64,
}

/// Mean binary cross entropy on logits (stable logits form).
pub fn bce<T: Element>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    bce_with_logits(logits, target, None)
}

/// Soft IoU loss `1 − (Σp·t + ε)/(Σp + Σt − Σp·t + ε)` with `p = σ(z)`,
/// `ε = 1`.
pub fn iou_loss<T: Element>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape() != target.shape() {
        return Err(Error::shape(format!(
            "iou_loss: shapes {:?} and {:?} differ",
            logits.shape(),
            target.shape()
        )));
    }
    let eps = T::ONE;
    let p = logits.sigmoid();
    let inter = p.mul(target)?.sum();
    let union = p.sum().add(&target.sum())?.sub(&inter)?;
    let ratio = inter.add_scalar(eps).div(&union.add_scalar(eps))?;
    Ok(ratio.neg().add_scalar(T::ONE))
}

/// Segmentation loss: `½(φ_bce + φ_iou)`.
pub fn seg_loss<T: Element>(logits: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let half = T::from_f64(0.5);
    Ok(bce(logits, mask)?.add(&iou_loss(logits, mask)?)?.mul_scalar(half))
}

/// Ground-truth attention map for one mask `[H,W]`: average-pool to `g×g`,
/// flatten to `v ∈ [0,1]^N`, return the outer product `v·vᵀ` as `[N,N]`.
pub fn gt_attention_map<T: Element>(mask: &Tensor<T>, g: usize) -> Result<Tensor<T>> {
    let s = mask.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!("gt_attention_map: expected [H,W], got {:?}", s)));
    }
    if g > s[0].min(s[1]) {
        return Err(Error::shape(format!(
            "gt_attention_map: grid {g} exceeds mask {}×{}",
            s[0], s[1]
        )));
    }
    let n = g * g;
    let v = mask
        .reshape(&[1, 1, s[0], s[1]])?
        .adaptive_avg_pool2d(g, g)?
        .reshape(&[n, 1])?;
    v.matmul(&v.reshape(&[1, n])?)
}

/// Batched ground-truth attention maps: masks `[B,1,H,W]` → `[B,1,N,N]`.
pub fn gt_attention_maps<T: Element>(masks: &Tensor<T>, g: usize) -> Result<Tensor<T>> {
    let s = masks.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape(format!(
            "gt_attention_maps: expected [B,1,H,W], got {:?}",
            s
        )));
    }
    let (b, n) = (s[0], g * g);
    let v = masks.adaptive_avg_pool2d(g, g)?.reshape(&[b, n, 1])?;
    let vt = v.reshape(&[b, 1, n])?;
    v.bmm(&vt)?.reshape(&[b, 1, n, n])
}

/// Attention loss: weighted BCE treating the CTAM as logits against the
/// ground-truth attention map, weights `w = 1 + β·t`.
pub fn att_loss<T: Element>(ctam: &Tensor<T>, masks: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    let s = ctam.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != s[3] {
        return Err(Error::shape(format!("att_loss: expected [B,1,N,N] ctam, got {:?}", s)));
    }
    let g = (s[2] as f64).sqrt().round() as usize;
    if g * g != s[2] {
        return Err(Error::shape(format!("att_loss: N = {} is not a square", s[2])));
    }
    let target = crate::no_grad(|| gt_attention_maps(masks, g))?;
    if target.shape() != ctam.shape() {
        return Err(Error::shape(format!(
            "att_loss: target map {:?} vs ctam {:?}",
            target.shape(),
            s
        )));
    }
    let beta_t = T::from_f64(beta);
    let weights = crate::no_grad(|| target.mul_scalar(beta_t).add_scalar(T::ONE));
    bce_with_logits(ctam, &target, Some(&weights))
}

/// Deep-supervision loss: the segmentation loss summed over the two branch
/// heads (or the single present head under ablation wiring).
pub fn aux_loss<T: Element>(
    m_r_logits: Option<&Tensor<T>>,
    m_s_logits: Option<&Tensor<T>>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut total: Option<Tensor<T>> = None;
    for head in [m_r_logits, m_s_logits].into_iter().flatten() {
        let part = seg_loss(head, mask)?;
        total = Some(match total {
            Some(t) => t.add(&part)?,
            None => part,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(T::ZERO)))
}

/// Combines the three parts into `L_total = L_seg + L_att + λ·L_aux` and a
/// scalar report. The report identity holds by construction.
pub fn combine_losses<T: Element>(
    l_seg: &Tensor<T>,
    l_att: &Tensor<T>,
    l_aux: &Tensor<T>,
    lambda_aux: f64,
) -> Result<(Tensor<T>, LossReport)> {
    if lambda_aux < 0.0 {
        return Err(Error::config(format!("lambda_aux must be ≥ 0, got {lambda_aux}")));
    }
    let total = l_seg
        .add(l_att)?
        .add(&l_aux.mul_scalar(T::from_f64(lambda_aux)))?;
    let report = LossReport {
        l_seg: l_seg.item().to_f64(),
        l_att: l_att.item().to_f64(),
        l_aux: l_aux.item().to_f64(),
        l_total: total.item().to_f64(),
        lambda_aux,
    };
    Ok((total, report))
}

/// Full objective for one forward pass: masks are `[B,1,H,W]` binary.
pub fn model_loss<T: Element>(
    out: &ModelOutput<T>,
    masks: &Tensor<T>,
    lambda_aux: f64,
    beta: f64,
) -> Result<(Tensor<T>, LossReport)> {
    let l_seg = seg_loss(&out.logits, masks)?;
    let l_att = match &out.ctam {
        Some(ctam) => att_loss(ctam, masks, beta)?,
        None => Tensor::scalar(T::ZERO),
    };
    let l_aux = aux_loss(out.aux_r.as_ref(), out.aux_s.as_ref(), masks)?;
    combine_losses(&l_seg, &l_att, &l_aux, lambda_aux)
}
