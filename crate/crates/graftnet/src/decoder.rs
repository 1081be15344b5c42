//! Staggered decoder: three sub-blocks consume, in order, transformer
//! features (D1), the grafted features (D2), and the CNN skips (D3), then a
//! final upsample chain brings the map to full resolution for the 1-channel
//! prediction head.
//!
//! Upsampling is bilinear-resize + conv throughout. D1/D2 run on the
//! transformer grid family; D3's first step resizes onto the CNN grid
//! family (H/16) and walks up through the stage-4/3/2 skips.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Mode, Visitor};
use crate::tensor::{concat, Element, Tensor};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

/// conv3×3-BN-GELU ×2.
struct ConvBlock<T: Element> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
}

impl<T: Element> ConvBlock<T> {
    fn new(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        ConvBlock {
            conv1: Conv2d::new(c_in, c_out, 3, 1, 1, false, rng),
            bn1: BatchNorm2d::new(c_out, BN_MOMENTUM, BN_EPS),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(c_out, BN_MOMENTUM, BN_EPS),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, mode)?.gelu();
        Ok(self.bn2.forward(&self.conv2.forward(&y)?, mode)?.gelu())
    }

    fn visit(&self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.conv1.visit(&format!("{prefix}.conv1"), v);
        self.bn1.visit(&format!("{prefix}.bn1"), v);
        self.conv2.visit(&format!("{prefix}.conv2"), v);
        self.bn2.visit(&format!("{prefix}.bn2"), v);
    }
}

/// Decoder channel widths: halving per sub-block from 2·d_graft, floor 16.
pub fn decoder_widths(d_graft: usize) -> (usize, usize, usize, usize) {
    let c1 = (2 * d_graft).max(16);
    let c2 = d_graft.max(16);
    let c3 = (d_graft / 2).max(16);
    let chain = (d_graft / 4).max(16);
    (c1, c2, c3, chain)
}

pub struct Decoder<T: Element> {
    proj_t2: Conv2d<T>,
    d1: ConvBlock<T>,
    d2: ConvBlock<T>,
    d3_s4: ConvBlock<T>,
    d3_s3: ConvBlock<T>,
    d3_s2: ConvBlock<T>,
    chain_conv: Conv2d<T>,
    chain_bn: BatchNorm2d<T>,
    head: Conv2d<T>,
    out_hw: (usize, usize),
    trans_grids: [usize; 3],
    cnn_grids: [usize; 3],
}

impl<T: Element> Decoder<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (c1, c2, c3, chain) = decoder_widths(cfg.d_graft);
        let c0 = cfg.cnn_channel_base;
        Decoder {
            proj_t2: Conv2d::new(cfg.trans_channels(2), c1, 1, 1, 0, true, rng),
            d1: ConvBlock::new(cfg.trans_channels(3) + c1, c1, rng),
            d2: ConvBlock::new(c1 + cfg.d_graft, c2, rng),
            d3_s4: ConvBlock::new(c2 + c0 * 8, c3, rng),
            d3_s3: ConvBlock::new(c3 + c0 * 4, c3, rng),
            d3_s2: ConvBlock::new(c3 + c0 * 2, c3, rng),
            chain_conv: Conv2d::new(c3, chain, 3, 1, 1, false, rng),
            chain_bn: BatchNorm2d::new(chain, BN_MOMENTUM, BN_EPS),
            head: Conv2d::new(chain, 1, 1, 1, 0, true, rng),
            out_hw: cfg.cnn_input_hw,
            trans_grids: [cfg.trans_grid(1), cfg.trans_grid(2), cfg.trans_grid(3)],
            cnn_grids: [cfg.cnn_grid(4), cfg.cnn_grid(3), cfg.cnn_grid(2)],
        }
    }

    /// Fuses (resized skip ⊕ current) and applies the block.
    fn fuse(
        &self,
        stage: &str,
        block: &ConvBlock<T>,
        current: &Tensor<T>,
        skip: &Tensor<T>,
        grid: usize,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let cur = current.resize_bilinear(grid, grid)?;
        let skip = if skip.shape()[2] == grid && skip.shape()[3] == grid {
            skip.clone()
        } else {
            skip.resize_bilinear(grid, grid)?
        };
        if cur.shape()[0] != skip.shape()[0] {
            return Err(Error::shape(format!(
                "decoder {stage}: batch mismatch {} vs {}",
                cur.shape()[0],
                skip.shape()[0]
            )));
        }
        let fused = concat(&[cur, skip], 1)
            .map_err(|e| Error::shape(format!("decoder {stage}: {e}")))?;
        block.forward(&fused, mode)
    }

    /// `trans3`-seeded staggered decode to full-resolution logits.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        trans3: &Tensor<T>,
        trans2: &Tensor<T>,
        z: &Tensor<T>,
        cnn4: &Tensor<T>,
        cnn3: &Tensor<T>,
        cnn2: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        // D1: transformer features
        let t2 = self.proj_t2.forward(trans2)?;
        let x = self.fuse("D1", &self.d1, trans3, &t2, self.trans_grids[1], mode)?;
        // D2: grafted features
        let x = self.fuse("D2", &self.d2, &x, z, self.trans_grids[0], mode)?;
        // D3: CNN skips, shallowing
        let x = self.fuse("D3/s4", &self.d3_s4, &x, cnn4, self.cnn_grids[0], mode)?;
        let x = self.fuse("D3/s3", &self.d3_s3, &x, cnn3, self.cnn_grids[1], mode)?;
        let x = self.fuse("D3/s2", &self.d3_s2, &x, cnn2, self.cnn_grids[2], mode)?;
        // Final chain to full resolution
        let (h, w) = self.out_hw;
        let x = x.resize_bilinear(h / 2, w / 2)?;
        let x = self.chain_bn.forward(&self.chain_conv.forward(&x)?, mode)?.gelu();
        let x = x.resize_bilinear(h, w)?;
        self.head.forward(&x)
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.proj_t2.visit(&format!("{prefix}.proj_t2"), v);
        self.d1.visit(&format!("{prefix}.d1"), v);
        self.d2.visit(&format!("{prefix}.d2"), v);
        self.d3_s4.visit(&format!("{prefix}.d3_s4"), v);
        self.d3_s3.visit(&format!("{prefix}.d3_s3"), v);
        self.d3_s2.visit(&format!("{prefix}.d3_s2"), v);
        self.chain_conv.visit(&format!("{prefix}.chain_conv"), v);
        self.chain_bn.visit(&format!("{prefix}.chain_bn"), v);
        self.head.visit(&format!("{prefix}.head"), v);
    }
}

/// A 1×1-conv salient-prediction head on a backbone feature map, upsampled
/// to the mask resolution; used for deep supervision.
pub struct AuxHead<T: Element> {
    conv: Conv2d<T>,
}

impl<T: Element> AuxHead<T> {
    pub fn new(c_in: usize, rng: &mut impl Rng) -> Self {
        AuxHead {
            conv: Conv2d::new(c_in, 1, 1, 1, 0, true, rng),
        }
    }

    pub fn forward(&self, feat: &Tensor<T>, out_hw: (usize, usize)) -> Result<Tensor<T>> {
        self.conv.forward(feat)?.resize_bilinear(out_hw.0, out_hw.1)
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.conv.visit(&format!("{prefix}.conv"), v);
    }
}
