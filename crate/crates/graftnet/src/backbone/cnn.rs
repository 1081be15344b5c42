//! Residual CNN branch: a stride-2 3×3 stem (standing in for the removed
//! large-kernel stage) followed by four stages of two basic blocks each.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{BatchNorm2d, Conv2d, Mode, Visitor};
use crate::tensor::{Element, Tensor};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

struct BasicBlock<T: Element> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
}

impl<T: Element> BasicBlock<T> {
    fn new(c_in: usize, c_out: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let shortcut = (stride != 1 || c_in != c_out).then(|| {
            (
                Conv2d::new(c_in, c_out, 1, stride, 0, false, rng),
                BatchNorm2d::new(c_out, BN_MOMENTUM, BN_EPS),
            )
        });
        BasicBlock {
            conv1: Conv2d::new(c_in, c_out, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(c_out, BN_MOMENTUM, BN_EPS),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(c_out, BN_MOMENTUM, BN_EPS),
            shortcut,
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, mode)?.gelu();
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok(y.add(&skip)?.gelu())
    }

    fn visit(&self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.conv1.visit(&format!("{prefix}.conv1"), v);
        self.bn1.visit(&format!("{prefix}.bn1"), v);
        self.conv2.visit(&format!("{prefix}.conv2"), v);
        self.bn2.visit(&format!("{prefix}.bn2"), v);
        if let Some((conv, bn)) = &self.shortcut {
            conv.visit(&format!("{prefix}.proj"), v);
            bn.visit(&format!("{prefix}.proj_bn"), v);
        }
    }
}

pub struct CnnBackbone<T: Element> {
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    stages: Vec<[BasicBlock<T>; 2]>,
    input_hw: (usize, usize),
}

impl<T: Element> CnnBackbone<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let c0 = cfg.cnn_channel_base;
        let stem_conv = Conv2d::new(3, c0, 3, 2, 1, false, rng);
        let stem_bn = BatchNorm2d::new(c0, BN_MOMENTUM, BN_EPS);
        let mut stages = Vec::with_capacity(4);
        let mut c_in = c0;
        for i in 2..=5usize {
            let c_out = cfg.cnn_channels(i);
            stages.push([
                BasicBlock::new(c_in, c_out, 2, rng),
                BasicBlock::new(c_out, c_out, 1, rng),
            ]);
            c_in = c_out;
        }
        CnnBackbone {
            stem_conv,
            stem_bn,
            stages,
            input_hw: cfg.cnn_input_hw,
        }
    }

    /// Four stage outputs (2..=5) for an image `[B,3,H,W]`.
    pub fn forward(&self, img: &Tensor<T>, mode: Mode) -> Result<Vec<Tensor<T>>> {
        let s = img.shape();
        if s.len() != 4 || s[1] != 3 || (s[2], s[3]) != self.input_hw {
            return Err(crate::error::Error::shape(format!(
                "cnn input {:?} does not match configured {}×{}",
                s, self.input_hw.0, self.input_hw.1
            )));
        }
        let mut x = self.stem_bn.forward(&self.stem_conv.forward(img)?, mode)?.gelu();
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage[0].forward(&x, mode)?;
            x = stage[1].forward(&x, mode)?;
            out.push(x.clone());
        }
        Ok(out)
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.stem_conv.visit(&format!("{prefix}.stem.conv"), v);
        self.stem_bn.visit(&format!("{prefix}.stem.bn"), v);
        for (si, stage) in self.stages.iter().enumerate() {
            let stage_no = si + 2;
            stage[0].visit(&format!("{prefix}.s{stage_no}.b0"), v);
            stage[1].visit(&format!("{prefix}.s{stage_no}.b1"), v);
        }
    }
}
