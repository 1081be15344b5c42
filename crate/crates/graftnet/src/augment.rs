//! Geometric and photometric augmentation. Flips and rotation apply
//! identically to image and mask; the mask resamples nearest-neighbor so it
//! stays binary, and brightness touches the image only.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::Sample;
use crate::tensor::Tensor;

fn dims(sample: &Sample) -> (usize, usize) {
    let s = sample.mask.shape();
    (s[0], s[1])
}

pub fn flip_h(sample: &Sample) -> Sample {
    let (h, w) = dims(sample);
    let img = sample.image.to_vec();
    let mut out = vec![0.0f32; img.len()];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[c * h * w + y * w + x] = img[c * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    let m = sample.mask.to_vec();
    let mut mout = vec![0.0f32; m.len()];
    for y in 0..h {
        for x in 0..w {
            mout[y * w + x] = m[y * w + (w - 1 - x)];
        }
    }
    Sample {
        id: sample.id.clone(),
        image: Tensor::new(&[3, h, w], out).unwrap(),
        mask: Tensor::new(&[h, w], mout).unwrap(),
    }
}

pub fn flip_v(sample: &Sample) -> Sample {
    let (h, w) = dims(sample);
    let img = sample.image.to_vec();
    let mut out = vec![0.0f32; img.len()];
    for c in 0..3 {
        for y in 0..h {
            let src = (h - 1 - y) * w;
            out[c * h * w + y * w..c * h * w + y * w + w]
                .copy_from_slice(&img[c * h * w + src..c * h * w + src + w]);
        }
    }
    let m = sample.mask.to_vec();
    let mut mout = vec![0.0f32; m.len()];
    for y in 0..h {
        mout[y * w..y * w + w].copy_from_slice(&m[(h - 1 - y) * w..(h - 1 - y) * w + w]);
    }
    Sample {
        id: sample.id.clone(),
        image: Tensor::new(&[3, h, w], out).unwrap(),
        mask: Tensor::new(&[h, w], mout).unwrap(),
    }
}

/// Rotates image (bilinear) and mask (nearest) by `deg` around the center;
/// out-of-frame samples are zero.
pub fn rotate(sample: &Sample, deg: f64) -> Sample {
    let (h, w) = dims(sample);
    let theta = deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let img = sample.image.to_vec();
    let m = sample.mask.to_vec();
    let mut out = vec![0.0f32; img.len()];
    let mut mout = vec![0.0f32; m.len()];
    for y in 0..h {
        for x in 0..w {
            // inverse mapping: rotate output coords by −θ
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cy + dy * cos - dx * sin;
            let sx = cx + dy * sin + dx * cos;
            // image: bilinear
            if sy >= 0.0 && sy <= (h - 1) as f64 && sx >= 0.0 && sx <= (w - 1) as f64 {
                let y0 = sy.floor() as usize;
                let x0 = sx.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
                for c in 0..3 {
                    let at = |yy: usize, xx: usize| img[c * h * w + yy * w + xx] as f64;
                    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                    let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                    out[c * h * w + y * w + x] = (top * (1.0 - ty) + bot * ty) as f32;
                }
                // mask: nearest
                let ny = sy.round() as usize;
                let nx = sx.round() as usize;
                mout[y * w + x] = m[ny.min(h - 1) * w + nx.min(w - 1)];
            }
        }
    }
    Sample {
        id: sample.id.clone(),
        image: Tensor::new(&[3, h, w], out).unwrap(),
        mask: Tensor::new(&[h, w], mout).unwrap(),
    }
}

/// Adds `delta` to every image channel, clamped to `[0,1]`; the mask is
/// untouched.
pub fn brightness(sample: &Sample, delta: f64) -> Sample {
    let image = sample.image.to_vec();
    let data: Vec<f32> = image.iter().map(|&v| (v + delta as f32).clamp(0.0, 1.0)).collect();
    Sample {
        id: sample.id.clone(),
        image: Tensor::new(sample.image.shape(), data).unwrap(),
        mask: sample.mask.clone(),
    }
}

/// Randomized composition per the config flags. With everything off this is
/// the identity.
pub fn augment(sample: &Sample, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Sample {
    let mut out = sample.clone();
    if cfg.hflip && rng.gen_bool(0.5) {
        out = flip_h(&out);
    }
    if cfg.vflip && rng.gen_bool(0.5) {
        out = flip_v(&out);
    }
    if cfg.rotate_deg > 0.0 {
        let deg = rng.gen_range(-cfg.rotate_deg..cfg.rotate_deg);
        out = rotate(&out, deg);
    }
    if cfg.brightness_delta > 0.0 {
        let delta = rng.gen_range(-cfg.brightness_delta..cfg.brightness_delta);
        out = brightness(&out, delta);
    }
    out
}
