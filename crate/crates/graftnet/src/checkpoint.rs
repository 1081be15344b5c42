//! Binary checkpoint format.
//!
//! Layout: magic `TRNC`, u32 version, u32 entry count; each entry is a
//! u32 name length + UTF-8 name, u8 rank, rank × u64 extents, then a
//! little-endian f32 payload. The run config, epoch counter, RNG state, and
//! optimizer momentum buffers ride along under reserved names (`__config__`,
//! `__epoch__`, `__rng__`, `opt/<param>`); everything else is a model
//! parameter or buffer under its visited name.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::TransResNet;
use crate::nn::Collector;
use crate::optim::Sgd;

const MAGIC: &[u8; 4] = b"TRNC";
const VERSION: u32 = 1;

const KEY_CONFIG: &str = "__config__";
const KEY_EPOCH: &str = "__epoch__";
const KEY_RNG: &str = "__rng__";
const OPT_PREFIX: &str = "opt/";

/// A parsed checkpoint: named f32 blobs plus the decoded reserved entries.
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub epoch: usize,
    pub rng: Option<ChaCha8Rng>,
    entries: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| b as f32).collect()
}

fn f32s_to_bytes(vals: &[f32]) -> Result<Vec<u8>> {
    vals.iter()
        .map(|&v| {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::data(format!("corrupt byte payload value {v}")));
            }
            Ok(v as u8)
        })
        .collect()
}

fn encode_rng(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 16 + 8);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out
}

fn decode_rng(bytes: &[u8]) -> Result<ChaCha8Rng> {
    if bytes.len() != 56 {
        return Err(Error::data(format!("rng state has {} bytes, expected 56", bytes.len())));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&bytes[..32]);
    let word_pos = u128::from_le_bytes(bytes[32..48].try_into().unwrap());
    let stream = u64::from_le_bytes(bytes[48..56].try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

/// Serializes model parameters/buffers, optimizer state, config, epoch, and
/// RNG state.
pub fn save(
    path: &Path,
    model: &TransResNet<f32>,
    optimizer: Option<&Sgd<f32>>,
    config: &RunConfig,
    epoch: usize,
    rng: Option<&ChaCha8Rng>,
) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    let cfg_bytes = config.to_text().into_bytes();
    entries.push((KEY_CONFIG.into(), vec![cfg_bytes.len()], bytes_to_f32s(&cfg_bytes)));
    entries.push((KEY_EPOCH.into(), vec![1], vec![epoch as f32]));
    if let Some(rng) = rng {
        let bytes = encode_rng(rng);
        entries.push((KEY_RNG.into(), vec![bytes.len()], bytes_to_f32s(&bytes)));
    }
    let mut collector = Collector::new();
    model.visit(&mut collector);
    for (name, tensor, _) in &collector.entries {
        entries.push((name.clone(), tensor.shape().to_vec(), tensor.to_vec()));
    }
    if let Some(opt) = optimizer {
        for (name, buf) in opt.momentum_buffers() {
            entries.push((format!("{OPT_PREFIX}{name}"), vec![buf.len()], buf.to_vec()));
        }
    }

    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, shape, payload) in &entries {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[shape.len() as u8])?;
        for &ext in shape {
            w.write_all(&(ext as u64).to_le_bytes())?;
        }
        let numel: usize = shape.iter().product();
        if numel != payload.len() {
            return Err(Error::shape(format!("entry {name}: shape/payload mismatch")));
        }
        for &v in payload {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a checkpoint file.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open checkpoint {}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::data("checkpoint truncated before magic"))?;
    if &magic != MAGIC {
        return Err(Error::data("not a checkpoint file (bad magic)"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;

    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::data("checkpoint entry name is not UTF-8"))?;
        let mut rank_buf = [0u8; 1];
        r.read_exact(&mut rank_buf)?;
        let rank = rank_buf[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut u64buf = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0f32; numel];
        let mut f32buf = [0u8; 4];
        for v in payload.iter_mut() {
            r.read_exact(&mut f32buf)?;
            *v = f32::from_le_bytes(f32buf);
        }
        entries.push((name, shape, payload));
    }

    let find = |key: &str| entries.iter().find(|(n, _, _)| n == key);
    let config_entry = find(KEY_CONFIG)
        .ok_or_else(|| Error::data("checkpoint missing __config__"))?;
    let cfg_text = String::from_utf8(f32s_to_bytes(&config_entry.2)?)
        .map_err(|_| Error::data("checkpoint config is not UTF-8"))?;
    let config = RunConfig::from_text(&cfg_text)?;
    let epoch = find(KEY_EPOCH).map(|(_, _, v)| v[0] as usize).unwrap_or(0);
    let rng = match find(KEY_RNG) {
        Some((_, _, v)) => Some(decode_rng(&f32s_to_bytes(v)?)?),
        None => None,
    };
    Ok(Checkpoint {
        version,
        config,
        epoch,
        rng,
        entries,
    })
}

impl Checkpoint {
    /// Rebuilds the model recorded in this checkpoint: constructs from the
    /// stored config, then restores every parameter and buffer.
    pub fn build_model(&self) -> Result<TransResNet<f32>> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(0);
        let model = TransResNet::new(&self.config.model, &mut init_rng)?;
        self.restore_into(&model)?;
        Ok(model)
    }

    /// Copies stored values into an existing model's tensors by name.
    pub fn restore_into(&self, model: &TransResNet<f32>) -> Result<()> {
        let mut collector = Collector::new();
        model.visit(&mut collector);
        for (name, tensor, _) in &collector.entries {
            let (_, shape, payload) = self
                .entries
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| Error::data(format!("checkpoint missing entry `{name}`")))?;
            if shape != tensor.shape() {
                return Err(Error::shape(format!(
                    "checkpoint entry `{name}`: shape {:?} vs model {:?}",
                    shape,
                    tensor.shape()
                )));
            }
            tensor.set_data(payload);
        }
        Ok(())
    }

    /// Restores optimizer momentum buffers recorded under `opt/` names.
    pub fn restore_optimizer(&self, opt: &mut Sgd<f32>) -> Result<()> {
        for (name, _, payload) in &self.entries {
            if let Some(param) = name.strip_prefix(OPT_PREFIX) {
                opt.restore_momentum(param, payload)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::Tensor;

    #[test]
    fn roundtrip_preserves_eval_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = TransResNet::new(&cfg.model, &mut rng).unwrap();
        let img = Tensor::new(
            &[1, 3, 64, 64],
            (0..3 * 64 * 64).map(|i| 0.5 + 0.3 * (i as f32 * 0.01).sin()).collect(),
        )
        .unwrap();
        // a train pass to populate batch-norm stats, then the reference output
        let _ = model.forward(&img, Mode::Train).unwrap();
        let reference = crate::no_grad(|| model.forward(&img, Mode::Eval)).unwrap();

        let path = dir.path().join("model.ckpt");
        let train_rng = ChaCha8Rng::seed_from_u64(7);
        save(&path, &model, None, &cfg, 13, Some(&train_rng)).unwrap();

        let ckpt = load(&path).unwrap();
        assert_eq!(ckpt.epoch, 13);
        assert_eq!(ckpt.config, cfg);
        let restored = ckpt.build_model().unwrap();
        let out = crate::no_grad(|| restored.forward(&img, Mode::Eval)).unwrap();
        assert_eq!(out.logits.to_vec(), reference.logits.to_vec()); // bitwise
    }

    #[test]
    fn rng_state_roundtrips_mid_stream() {
        use rand::RngCore;
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = TransResNet::new(&cfg.model, &mut rng).unwrap();
        let mut train_rng = ChaCha8Rng::seed_from_u64(11);
        let _ = train_rng.next_u64(); // advance off the origin
        let _ = train_rng.next_u64();
        let path = dir.path().join("m.ckpt");
        save(&path, &model, None, &cfg, 1, Some(&train_rng)).unwrap();
        let mut restored = load(&path).unwrap().rng.unwrap();
        let mut original = train_rng;
        for _ in 0..16 {
            assert_eq!(original.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(load(&path).is_err());
    }
}
