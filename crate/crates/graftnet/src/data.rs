//! Dataset ingestion: image/mask samples, CSV manifests, PNG I/O, and a
//! deterministic synthetic dataset of bright ellipses on textured noise.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image/mask pair: image `[3,H,W]` in `[0,1]`, mask `[H,W]` in `{0,1}`.
#[derive(Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// An ordered list of image/mask path pairs, loaded from a two-column CSV
/// with an `image,mask` header. Paths are relative to the manifest's
/// directory.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
}

impl Manifest {
    pub fn load(path: &Path, split: Split) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read manifest {}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == "image,mask" => {}
            _ => {
                return Err(Error::data(format!(
                    "manifest {} must start with an `image,mask` header",
                    path.display()
                )))
            }
        }
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (img, mask) = line.split_once(',').ok_or_else(|| {
                Error::data(format!("manifest line {}: expected `image,mask`", lineno + 1))
            })?;
            let image_path = dir.join(img.trim());
            let mask_path = dir.join(mask.trim());
            let id = image_path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::data(format!("manifest line {}: bad image path", lineno + 1)))?
                .to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::data(format!(
                    "manifest line {}: duplicate id `{id}`",
                    lineno + 1
                )));
            }
            for p in [&image_path, &mask_path] {
                if !p.exists() {
                    return Err(Error::data(format!(
                        "manifest line {}: path {} does not resolve",
                        lineno + 1,
                        p.display()
                    )));
                }
            }
            entries.push(ManifestEntry {
                id,
                image_path,
                mask_path,
            });
        }
        Ok(Manifest { entries, split })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let mut text = String::from("image,mask\n");
        for e in &self.entries {
            let rel = |p: &Path| {
                p.strip_prefix(dir)
                    .map(|r| r.to_path_buf())
                    .unwrap_or_else(|_| p.to_path_buf())
            };
            text.push_str(&format!(
                "{},{}\n",
                rel(&e.image_path).display(),
                rel(&e.mask_path).display()
            ));
        }
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn decode_image(path: &Path) -> Result<DynamicImage> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot decode {}: {e}", path.display())))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::data(format!("{} has a zero dimension", path.display())));
    }
    Ok(img)
}

/// Image tensor `[3,H,W]` scaled to `[0,1]` from an RGB(ish) file.
pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("consistent by construction")
}

/// Nearest-neighbor resize over a `u8` mask image.
fn resize_mask_nearest(mask: &GrayImage, out_h: usize, out_w: usize) -> GrayImage {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let mut out = GrayImage::new(out_w as u32, out_h as u32);
    for oy in 0..out_h {
        // pixel-center mapping, clamped
        let sy = (((oy as f64 + 0.5) * h as f64 / out_h as f64) - 0.5).round().max(0.0) as usize;
        let sy = sy.min(h - 1);
        for ox in 0..out_w {
            let sx = (((ox as f64 + 0.5) * w as f64 / out_w as f64) - 0.5).round().max(0.0) as usize;
            let sx = sx.min(w - 1);
            out.put_pixel(ox as u32, oy as u32, *mask.get_pixel(sx as u32, sy as u32));
        }
    }
    out
}

/// Loads one manifest entry: the image is bilinear-resized to `target_hw`
/// and scaled to `[0,1]`; the mask is nearest-neighbor-resized and
/// binarized at 128/255.
pub fn load_sample(entry: &ManifestEntry, target_hw: (usize, usize)) -> Result<Sample> {
    let rgb = decode_image(&entry.image_path)?.to_rgb8();
    let image = image_to_tensor(&rgb);
    let (h, w) = target_hw;
    let image = if image.shape() == [3, h, w] {
        image
    } else {
        let s = image.shape().to_vec();
        image
            .reshape(&[1, 3, s[1], s[2]])?
            .resize_bilinear(h, w)?
            .reshape(&[3, h, w])?
    };

    let gray = decode_image(&entry.mask_path)?.to_luma8();
    let gray = if (gray.height() as usize, gray.width() as usize) == (h, w) {
        gray
    } else {
        resize_mask_nearest(&gray, h, w)
    };
    let mask_data: Vec<f32> = gray.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::new(&[h, w], mask_data)?;
    Ok(Sample {
        id: entry.id.clone(),
        image,
        mask,
    })
}

/// Writes a probability map `[H,W]` in `[0,1]` as an 8-bit grayscale PNG.
pub fn save_mask_png(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let s = mask.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!("save_mask_png: expected [H,W], got {:?}", s)));
    }
    let (h, w) = (s[0], s[1]);
    let mut img = GrayImage::new(w as u32, h as u32);
    mask.with_data(|d| {
        for y in 0..h {
            for x in 0..w {
                let v = (d[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel(x as u32, y as u32, image::Luma([v]));
            }
        }
    });
    img.save(path)?;
    Ok(())
}

/// Stacks samples into batched tensors: `([B,3,H,W], [B,1,H,W])`.
pub fn stack_samples(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if samples.is_empty() {
        return Err(Error::data("cannot stack an empty batch"));
    }
    let s = samples[0].image.shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let b = samples.len();
    let mut images = Vec::with_capacity(b * 3 * h * w);
    let mut masks = Vec::with_capacity(b * h * w);
    for sample in samples {
        if sample.image.shape() != [3, h, w] || sample.mask.shape() != [h, w] {
            return Err(Error::shape("stack_samples: inconsistent sample shapes".to_string()));
        }
        sample.image.with_data(|d| images.extend_from_slice(d));
        sample.mask.with_data(|d| masks.extend_from_slice(d));
    }
    Ok((
        Tensor::new(&[b, 3, h, w], images)?,
        Tensor::new(&[b, 1, h, w], masks)?,
    ))
}

/// An axis-aligned bright ellipse for the synthetic scenes.
#[derive(Debug, Clone, Copy)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub brightness: f64,
}

/// Renders ellipses over a textured noise background. The mask is the exact
/// pixel-center inside test; the image gets 2×2 supersampled coverage for
/// soft edges.
///
/// The background texture mixes low-frequency noise with dim elliptical
/// smudges, and the whole frame takes a random global gain, so foreground
/// cannot be read off absolute intensity alone.
pub fn render_scene(hw: usize, shapes: &[Ellipse], rng: &mut ChaCha8Rng) -> (RgbImage, GrayImage) {
    let n = hw;
    // Low-frequency background: coarse grid, bilinearly upsampled.
    let coarse = 4usize;
    let grid: Vec<f64> = (0..coarse * coarse).map(|_| rng.gen_range(0.08..0.32)).collect();
    // Dim smudges: background texture, never in the mask.
    let smudges: Vec<Ellipse> = (0..rng.gen_range(2..=4usize))
        .map(|_| Ellipse {
            cy: rng.gen_range(0.1..0.9) * n as f64,
            cx: rng.gen_range(0.1..0.9) * n as f64,
            ry: rng.gen_range(0.08..0.22) * n as f64,
            rx: rng.gen_range(0.08..0.22) * n as f64,
            brightness: rng.gen_range(0.30..0.48),
        })
        .collect();
    let gain: f64 = rng.gen_range(0.65..1.0);
    let bg_at = |y: usize, x: usize| -> f64 {
        let fy = (y as f64 + 0.5) * coarse as f64 / n as f64 - 0.5;
        let fx = (x as f64 + 0.5) * coarse as f64 / n as f64 - 0.5;
        let fy = fy.clamp(0.0, (coarse - 1) as f64);
        let fx = fx.clamp(0.0, (coarse - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(coarse - 1), (x0 + 1).min(coarse - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = grid[y0 * coarse + x0] * (1.0 - tx) + grid[y0 * coarse + x1] * tx;
        let bot = grid[y1 * coarse + x0] * (1.0 - tx) + grid[y1 * coarse + x1] * tx;
        top * (1.0 - ty) + bot * ty
    };
    let inside_of = |set: &[Ellipse], y: f64, x: f64| -> Option<f64> {
        for e in set {
            let dy = (y - e.cy) / e.ry;
            let dx = (x - e.cx) / e.rx;
            if dy * dy + dx * dx <= 1.0 {
                return Some(e.brightness);
            }
        }
        None
    };
    let mut img = RgbImage::new(n as u32, n as u32);
    let mut mask = GrayImage::new(n as u32, n as u32);
    for y in 0..n {
        for x in 0..n {
            let noise: f64 = rng.gen_range(0.0..0.06);
            let mut bg = (bg_at(y, x) + noise).min(0.5);
            if let Some(sv) = inside_of(&smudges, y as f64 + 0.5, x as f64 + 0.5) {
                bg = (0.5 * bg + sv + noise).min(0.55);
            }
            // 2×2 supersampled coverage for the image
            let mut cover = 0.0;
            let mut bright = 0.0;
            for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                if let Some(bv) = inside_of(shapes, y as f64 + sy, x as f64 + sx) {
                    cover += 0.25;
                    bright = bv;
                }
            }
            let v = gain * (bg * (1.0 - cover) + bright * cover);
            let px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px, px, px]));
            // exact binary mask from the pixel-center test
            let m = if inside_of(shapes, y as f64 + 0.5, x as f64 + 0.5).is_some() {
                255
            } else {
                0
            };
            mask.put_pixel(x as u32, y as u32, image::Luma([m]));
        }
    }
    (img, mask)
}

/// Samples 1–3 ellipses whose total area stays under half the frame and
/// whose centers keep the mask nonempty.
pub fn sample_scene(hw: usize, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let n = hw as f64;
    let count = rng.gen_range(1..=3usize);
    (0..count)
        .map(|_| Ellipse {
            cy: rng.gen_range(0.3..0.7) * n,
            cx: rng.gen_range(0.3..0.7) * n,
            ry: rng.gen_range(0.10..0.20) * n,
            rx: rng.gen_range(0.10..0.20) * n,
            brightness: rng.gen_range(0.62..0.92),
        })
        .collect()
}

/// Writes `n` synthetic image/mask pairs plus a `manifest.csv` into
/// `out_dir`; deterministic for a given seed.
pub fn synth_dataset(n: usize, hw: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n < 1 {
        return Err(Error::data("synth_dataset: n must be ≥ 1"));
    }
    if hw < 16 {
        return Err(Error::data("synth_dataset: size must be ≥ 16"));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let shapes = sample_scene(hw, &mut rng);
        let (img, mask) = render_scene(hw, &shapes, &mut rng);
        let image_path = out_dir.join(format!("img_{i:04}.png"));
        let mask_path = out_dir.join(format!("mask_{i:04}.png"));
        img.save(&image_path)?;
        mask.save(&mask_path)?;
        entries.push(ManifestEntry {
            id: format!("img_{i:04}"),
            image_path,
            mask_path,
        });
    }
    let manifest = Manifest {
        entries,
        split: Split::Train,
    };
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
