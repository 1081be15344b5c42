//! The full dual-branch segmentation model: both encoders, the cross
//! grafting module, the staggered decoder, and the two deep-supervision
//! heads.
//!
//! Ablation variants rewire rather than resize: a missing branch's decoder
//! inputs (and the grafted features, when the CGM is out) are replaced by
//! learned constant tensors broadcast over the batch, keeping parameter
//! counts comparable across rows.

use rand::Rng;

use crate::backbone::{select_graft_pair, CnnBackbone, FeaturePyramid, TransformerBackbone};
use crate::cgm::CrossGraftingModule;
use crate::config::{BranchMode, ModelConfig};
use crate::decoder::{AuxHead, Decoder};
use crate::error::{Error, Result};
use crate::nn::{small_uniform, visit_param, Mode, Param, Visitor};
use crate::tensor::{concat, Element, Tensor};

/// One forward pass's outputs. Optional parts are absent under ablation
/// wiring (no CGM → no attention/CTAM; single branch → one aux head).
pub struct ModelOutput<T: Element> {
    /// Main prediction logits `[B,1,H,W]` at the CNN input resolution.
    pub logits: Tensor<T>,
    /// CNN-branch salient map logits, same resolution.
    pub aux_r: Option<Tensor<T>>,
    /// Transformer-branch salient map logits.
    pub aux_s: Option<Tensor<T>>,
    /// Cross-transposed attention map `[B,1,N,N]`.
    pub ctam: Option<Tensor<T>>,
    /// Grafting attention matrix `[B,N,N]`.
    pub attn: Option<Tensor<T>>,
}

struct LearnedConstants<T: Element> {
    trans3: Option<Param<T>>,
    trans2: Option<Param<T>>,
    z: Option<Param<T>>,
    cnn4: Option<Param<T>>,
    cnn3: Option<Param<T>>,
    cnn2: Option<Param<T>>,
}

pub struct TransResNet<T: Element> {
    pub cfg: ModelConfig,
    cnn: Option<CnnBackbone<T>>,
    trans: Option<TransformerBackbone<T>>,
    cgm: Option<CrossGraftingModule<T>>,
    decoder: Decoder<T>,
    aux_r: Option<AuxHead<T>>,
    aux_s: Option<AuxHead<T>>,
    consts: LearnedConstants<T>,
}

impl<T: Element> TransResNet<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let branch = cfg.branch;
        let has_cnn = branch != BranchMode::TransOnly;
        let has_trans = branch != BranchMode::CnnOnly;
        let has_cgm = branch == BranchMode::Full;

        let cnn = has_cnn.then(|| CnnBackbone::new(cfg, rng));
        let trans = has_trans.then(|| TransformerBackbone::new(cfg, rng));
        let cgm = if has_cgm {
            Some(CrossGraftingModule::new(
                cfg,
                cfg.cnn_channels(5),
                cfg.trans_channels(cfg.graft_pair),
                rng,
            )?)
        } else {
            None
        };
        let decoder = Decoder::new(cfg, rng);
        let aux_r = has_cnn.then(|| AuxHead::new(cfg.cnn_channels(5), rng));
        let aux_s = has_trans.then(|| AuxHead::new(cfg.trans_channels(cfg.graft_pair), rng));

        let g = cfg.graft_grid_side();
        let constant = |shape: &[usize], rng: &mut _| Param::new(small_uniform(shape, 0.02, rng), true);
        let consts = LearnedConstants {
            trans3: (!has_trans).then(|| {
                constant(&[cfg.trans_channels(3), cfg.trans_grid(3), cfg.trans_grid(3)], rng)
            }),
            trans2: (!has_trans).then(|| {
                constant(&[cfg.trans_channels(2), cfg.trans_grid(2), cfg.trans_grid(2)], rng)
            }),
            z: (!has_cgm).then(|| constant(&[cfg.d_graft, g, g], rng)),
            cnn4: (!has_cnn).then(|| constant(&[cfg.cnn_channels(4), cfg.cnn_grid(4), cfg.cnn_grid(4)], rng)),
            cnn3: (!has_cnn).then(|| constant(&[cfg.cnn_channels(3), cfg.cnn_grid(3), cfg.cnn_grid(3)], rng)),
            cnn2: (!has_cnn).then(|| constant(&[cfg.cnn_channels(2), cfg.cnn_grid(2), cfg.cnn_grid(2)], rng)),
        };

        Ok(TransResNet {
            cfg: cfg.clone(),
            cnn,
            trans,
            cgm,
            decoder,
            aux_r,
            aux_s,
            consts,
        })
    }

    /// Runs both encoders on the (high-res) input image; the transformer
    /// branch sees a bilinear downsample to its own input size.
    pub fn encode(&self, img: &Tensor<T>, mode: Mode) -> Result<FeaturePyramid<T>> {
        let s = img.shape();
        let (h, w) = self.cfg.cnn_input_hw;
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
            return Err(Error::shape(format!(
                "model input {:?}; expected [B,3,{h},{w}]",
                s
            )));
        }
        let cnn = match &self.cnn {
            Some(net) => net.forward(img, mode)?,
            None => Vec::new(),
        };
        let trans = match &self.trans {
            Some(net) => {
                let (ht, wt) = self.cfg.trans_input_hw;
                let small = img.resize_bilinear(ht, wt)?;
                net.forward(&small)?
            }
            None => Vec::new(),
        };
        Ok(FeaturePyramid { cnn, trans })
    }

    fn expand_batch(t: &Tensor<T>, b: usize) -> Result<Tensor<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        let one = t.reshape(&shape)?;
        if b == 1 {
            return Ok(one);
        }
        concat(&vec![one; b], 0)
    }

    pub fn forward(&self, img: &Tensor<T>, mode: Mode) -> Result<ModelOutput<T>> {
        let b = img.shape()[0];
        let pyr = self.encode(img, mode)?;
        let out_hw = self.cfg.cnn_input_hw;

        // Grafting (or its learned stand-in)
        let mut attn = None;
        let mut ctam = None;
        let z = match (&self.cgm, &self.consts.z) {
            (Some(cgm), _) => {
                let (r_feat, s_feat) = select_graft_pair(&pyr, self.cfg.graft_pair)?;
                let pack = cgm.forward(&r_feat, &s_feat, mode)?;
                attn = Some(pack.attn);
                ctam = Some(pack.ctam);
                pack.z
            }
            (None, Some(c)) => Self::expand_batch(&c.tensor, b)?,
            (None, None) => unreachable!("no-CGM wiring always has a constant z"),
        };

        // Decoder inputs: real features or learned constants.
        let pick = |real: Result<&Tensor<T>>, konst: &Option<Param<T>>| -> Result<Tensor<T>> {
            match konst {
                None => Ok(real?.clone()),
                Some(c) => Self::expand_batch(&c.tensor, b),
            }
        };
        let trans3 = pick(pyr.trans_stage(3), &self.consts.trans3)?;
        let trans2 = pick(pyr.trans_stage(2), &self.consts.trans2)?;
        let cnn4 = pick(pyr.cnn_stage(4), &self.consts.cnn4)?;
        let cnn3 = pick(pyr.cnn_stage(3), &self.consts.cnn3)?;
        let cnn2 = pick(pyr.cnn_stage(2), &self.consts.cnn2)?;

        let logits = self
            .decoder
            .forward(&trans3, &trans2, &z, &cnn4, &cnn3, &cnn2, mode)?;

        let aux_r = match &self.aux_r {
            Some(head) => Some(head.forward(pyr.cnn_stage(5)?, out_hw)?),
            None => None,
        };
        let aux_s = match &self.aux_s {
            Some(head) => Some(head.forward(pyr.trans_stage(self.cfg.graft_pair)?, out_hw)?),
            None => None,
        };

        Ok(ModelOutput {
            logits,
            aux_r,
            aux_s,
            ctam,
            attn,
        })
    }

    pub fn visit(&self, v: &mut dyn Visitor<T>) {
        if let Some(net) = &self.cnn {
            net.visit("cnn", v);
        }
        if let Some(net) = &self.trans {
            net.visit("trans", v);
        }
        if let Some(cgm) = &self.cgm {
            cgm.visit("cgm", v);
        }
        self.decoder.visit("dec", v);
        if let Some(h) = &self.aux_r {
            h.visit("aux_r", v);
        }
        if let Some(h) = &self.aux_s {
            h.visit("aux_s", v);
        }
        let c = &self.consts;
        for (name, p) in [
            ("const.trans3", &c.trans3),
            ("const.trans2", &c.trans2),
            ("const.z", &c.z),
            ("const.cnn4", &c.cnn4),
            ("const.cnn3", &c.cnn3),
            ("const.cnn2", &c.cnn2),
        ] {
            if let Some(p) = p {
                visit_param(v, name.to_string(), p);
            }
        }
    }
}
