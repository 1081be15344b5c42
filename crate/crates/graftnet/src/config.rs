//! Model and training configuration, plus the `key = value` config file
//! format with `[model]` and `[train]` sections.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Which pieces of the architecture are wired in. Single-branch and no-CGM
/// variants replace the missing inputs with learned constant tensors so
/// parameter counts stay comparable across ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchMode {
    Full,
    NoCgm,
    CnnOnly,
    TransOnly,
}

impl BranchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BranchMode::Full => "full",
            BranchMode::NoCgm => "no_cgm",
            BranchMode::CnnOnly => "cnn_only",
            BranchMode::TransOnly => "trans_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(BranchMode::Full),
            "no_cgm" => Ok(BranchMode::NoCgm),
            "cnn_only" => Ok(BranchMode::CnnOnly),
            "trans_only" => Ok(BranchMode::TransOnly),
            other => Err(Error::config(format!("unknown branch mode `{other}`"))),
        }
    }
}

/// Architecture-scale knobs. The reference scale (1024²/224² inputs,
/// channel bases 32/64) is [`ModelConfig::paper`]; [`ModelConfig::toy`]
/// is the desk-scale instance used by tests and smoke training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// CNN-branch input resolution; must be divisible by 2^5.
    pub cnn_input_hw: (usize, usize),
    /// Transformer-branch input resolution; must be divisible by patch·2^3.
    pub trans_input_hw: (usize, usize),
    /// CNN stage-width base c0: stage i has c0·2^(i−1) channels.
    pub cnn_channel_base: usize,
    /// Transformer embed base e0: stage i has e0·2^i channels.
    pub trans_embed_base: usize,
    pub patch_size: usize,
    pub window_size: usize,
    /// Attention heads for transformer stages 1..3.
    pub heads_per_stage: Vec<usize>,
    /// Windowed attention + MLP blocks per transformer stage.
    pub trans_depth: usize,
    /// Graft token embedding width d.
    pub d_graft: usize,
    /// Attention scale α; `None` means √d_graft.
    pub alpha: Option<f64>,
    /// Weight λ on the auxiliary loss.
    pub lambda_aux: f64,
    /// Token grid side g for grafting; `None` means the transformer graft
    /// feature's own grid.
    pub graft_grid: Option<usize>,
    /// Transformer stage paired with cnn[5] for grafting (1..=4).
    pub graft_pair: usize,
    /// Share one QKV weight set across both branches instead of six maps.
    pub shared_qkv: bool,
    /// Cyclic-shift alternate transformer blocks (no attention masking).
    pub shifted_windows: bool,
    pub branch: BranchMode,
}

impl ModelConfig {
    /// The reference scale from the architecture definition.
    pub fn paper() -> Self {
        ModelConfig {
            cnn_input_hw: (1024, 1024),
            trans_input_hw: (224, 224),
            cnn_channel_base: 32,
            trans_embed_base: 64,
            patch_size: 4,
            window_size: 7,
            heads_per_stage: vec![2, 4, 8],
            trans_depth: 2,
            d_graft: 128,
            alpha: None,
            lambda_aux: 0.25,
            graft_grid: None,
            graft_pair: 2,
            shared_qkv: false,
            shifted_windows: false,
            branch: BranchMode::Full,
        }
    }

    /// Desk-scale instance: small enough for f64 gradient checks and
    /// CPU smoke training, same shape laws.
    pub fn toy() -> Self {
        ModelConfig {
            cnn_input_hw: (64, 64),
            trans_input_hw: (32, 32),
            cnn_channel_base: 8,
            trans_embed_base: 8,
            patch_size: 4,
            window_size: 2,
            heads_per_stage: vec![2, 2, 2],
            trans_depth: 1,
            d_graft: 16,
            alpha: None,
            lambda_aux: 0.25,
            graft_grid: None,
            graft_pair: 2,
            shared_qkv: false,
            shifted_windows: false,
            branch: BranchMode::Full,
        }
    }

    /// Effective attention scale.
    pub fn alpha_value(&self) -> f64 {
        self.alpha.unwrap_or_else(|| (self.d_graft as f64).sqrt())
    }

    /// Transformer token grid side at stage i (1..=3): (Ht/patch)/2^(i−1).
    pub fn trans_grid(&self, stage: usize) -> usize {
        (self.trans_input_hw.0 / self.patch_size) >> (stage - 1)
    }

    /// Transformer channels at stage i: e0·2^i (stage 4 matches stage 3).
    pub fn trans_channels(&self, stage: usize) -> usize {
        let s = stage.min(3);
        self.trans_embed_base << s
    }

    /// CNN spatial side at stage i (2..=5): H/2^i.
    pub fn cnn_grid(&self, stage: usize) -> usize {
        self.cnn_input_hw.0 >> stage
    }

    /// CNN channels at stage i: c0·2^(i−1).
    pub fn cnn_channels(&self, stage: usize) -> usize {
        self.cnn_channel_base << (stage - 1)
    }

    /// Token grid side used for grafting.
    pub fn graft_grid_side(&self) -> usize {
        self.graft_grid.unwrap_or_else(|| {
            let s = if self.graft_pair == 4 { 3 } else { self.graft_pair };
            self.trans_grid(s)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.cnn_input_hw;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!(
                "cnn_input_hw {h}×{w} must be divisible by 32"
            )));
        }
        let (ht, wt) = self.trans_input_hw;
        let div = self.patch_size * 8;
        if ht == 0 || wt == 0 || ht % div != 0 || wt % div != 0 {
            return Err(Error::config(format!(
                "trans_input_hw {ht}×{wt} must be divisible by patch·8 = {div}"
            )));
        }
        if ht != wt || h != w {
            return Err(Error::config("inputs must be square".to_string()));
        }
        if self.cnn_channel_base == 0 || self.trans_embed_base == 0 {
            return Err(Error::config("channel bases must be ≥ 1".to_string()));
        }
        if self.heads_per_stage.len() != 3 {
            return Err(Error::config("heads_per_stage needs exactly 3 entries".to_string()));
        }
        for stage in 1..=3 {
            let grid = self.trans_grid(stage);
            if grid == 0 || !grid.is_multiple_of(self.window_size) {
                return Err(Error::config(format!(
                    "window_size {} does not divide stage-{stage} grid {grid}",
                    self.window_size
                )));
            }
            let ch = self.trans_channels(stage);
            let heads = self.heads_per_stage[stage - 1];
            if heads == 0 || !ch.is_multiple_of(heads) {
                return Err(Error::config(format!(
                    "stage-{stage} channels {ch} not divisible by {heads} heads"
                )));
            }
        }
        if self.trans_depth == 0 {
            return Err(Error::config("trans_depth must be ≥ 1".to_string()));
        }
        if self.d_graft == 0 {
            return Err(Error::config("d_graft must be ≥ 1".to_string()));
        }
        if let Some(a) = self.alpha {
            // negated form also rejects NaN
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(a > 0.0) {
                return Err(Error::config(format!("alpha must be > 0, got {a}")));
            }
        }
        if self.lambda_aux < 0.0 {
            return Err(Error::config(format!(
                "lambda_aux must be ≥ 0, got {}",
                self.lambda_aux
            )));
        }
        if !(1..=4).contains(&self.graft_pair) {
            return Err(Error::config(format!(
                "graft_pair must be in 1..=4, got {}",
                self.graft_pair
            )));
        }
        if let Some(g) = self.graft_grid {
            if g == 0 {
                return Err(Error::config("graft_grid must be ≥ 1".to_string()));
            }
        }
        Ok(())
    }
}

/// Optimization recipe and augmentation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eta_min: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub rotate_deg: f64,
    pub brightness_delta: f64,
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// The light end of the stated recipe ranges, suited to CPU desk scale.
    pub fn toy() -> Self {
        TrainConfig {
            lr0: 0.03,
            momentum: 0.9,
            weight_decay: 7e-5,
            epochs: 200,
            batch_size: 4,
            seed: 7,
            eta_min: 0.0,
            hflip: false,
            vflip: false,
            rotate_deg: 0.0,
            brightness_delta: 0.0,
            checkpoint_every: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.lr0 >= 0.0) {
            return Err(Error::config(format!("lr0 must be ≥ 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs must be ≥ 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be ≥ 1".to_string()));
        }
        if self.weight_decay < 0.0 || self.eta_min < 0.0 || self.rotate_deg < 0.0 {
            return Err(Error::config("negative hyperparameter".to_string()));
        }
        Ok(())
    }
}

/// A full run configuration: `[model]` + `[train]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn toy() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Serializes to the canonical `key = value` text form.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "cnn_input_hw = {}x{}", m.cnn_input_hw.0, m.cnn_input_hw.1);
        let _ = writeln!(s, "trans_input_hw = {}x{}", m.trans_input_hw.0, m.trans_input_hw.1);
        let _ = writeln!(s, "cnn_channel_base = {}", m.cnn_channel_base);
        let _ = writeln!(s, "trans_embed_base = {}", m.trans_embed_base);
        let _ = writeln!(s, "patch_size = {}", m.patch_size);
        let _ = writeln!(s, "window_size = {}", m.window_size);
        let heads: Vec<String> = m.heads_per_stage.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(s, "heads_per_stage = {}", heads.join(","));
        let _ = writeln!(s, "trans_depth = {}", m.trans_depth);
        let _ = writeln!(s, "d_graft = {}", m.d_graft);
        match m.alpha {
            Some(a) => {
                let _ = writeln!(s, "alpha = {a}");
            }
            None => {
                let _ = writeln!(s, "alpha = auto");
            }
        }
        let _ = writeln!(s, "lambda_aux = {}", m.lambda_aux);
        match m.graft_grid {
            Some(g) => {
                let _ = writeln!(s, "graft_grid = {g}");
            }
            None => {
                let _ = writeln!(s, "graft_grid = auto");
            }
        }
        let _ = writeln!(s, "graft_pair = {}", m.graft_pair);
        let _ = writeln!(s, "shared_qkv = {}", m.shared_qkv);
        let _ = writeln!(s, "shifted_windows = {}", m.shifted_windows);
        let _ = writeln!(s, "branch = {}", m.branch.as_str());
        let _ = writeln!(s);
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "lr0 = {}", t.lr0);
        let _ = writeln!(s, "momentum = {}", t.momentum);
        let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "eta_min = {}", t.eta_min);
        let _ = writeln!(s, "hflip = {}", t.hflip);
        let _ = writeln!(s, "vflip = {}", t.vflip);
        let _ = writeln!(s, "rotate_deg = {}", t.rotate_deg);
        let _ = writeln!(s, "brightness_delta = {}", t.brightness_delta);
        let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
        s
    }

    /// Parses the `key = value` text form. Unknown keys and malformed lines
    /// are errors with their line number; missing keys fall back to the toy
    /// defaults so partial configs stay usable.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::toy();
        #[derive(PartialEq)]
        enum Section {
            None,
            Model,
            Train,
        }
        let mut section = Section::None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "[model]" {
                section = Section::Model;
                continue;
            }
            if line == "[train]" {
                section = Section::Train;
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let ctx = |e: String| Error::config(format!("line {}: {e}", lineno + 1));
            match section {
                Section::Model => {
                    let m = &mut cfg.model;
                    match key {
                        "cnn_input_hw" => m.cnn_input_hw = parse_hw(value).map_err(&ctx)?,
                        "trans_input_hw" => m.trans_input_hw = parse_hw(value).map_err(&ctx)?,
                        "cnn_channel_base" => m.cnn_channel_base = parse_num(value).map_err(&ctx)?,
                        "trans_embed_base" => m.trans_embed_base = parse_num(value).map_err(&ctx)?,
                        "patch_size" => m.patch_size = parse_num(value).map_err(&ctx)?,
                        "window_size" => m.window_size = parse_num(value).map_err(&ctx)?,
                        "heads_per_stage" => {
                            m.heads_per_stage = value
                                .split(',')
                                .map(|p| parse_num(p.trim()))
                                .collect::<std::result::Result<_, _>>()
                                .map_err(&ctx)?
                        }
                        "trans_depth" => m.trans_depth = parse_num(value).map_err(&ctx)?,
                        "d_graft" => m.d_graft = parse_num(value).map_err(&ctx)?,
                        "alpha" => {
                            m.alpha = if value == "auto" {
                                None
                            } else {
                                Some(parse_float(value).map_err(&ctx)?)
                            }
                        }
                        "lambda_aux" => m.lambda_aux = parse_float(value).map_err(&ctx)?,
                        "graft_grid" => {
                            m.graft_grid = if value == "auto" {
                                None
                            } else {
                                Some(parse_num(value).map_err(&ctx)?)
                            }
                        }
                        "graft_pair" => m.graft_pair = parse_num(value).map_err(&ctx)?,
                        "shared_qkv" => m.shared_qkv = parse_bool(value).map_err(&ctx)?,
                        "shifted_windows" => m.shifted_windows = parse_bool(value).map_err(&ctx)?,
                        "branch" => m.branch = BranchMode::parse(value)?,
                        other => return Err(ctx(format!("unknown [model] key `{other}`"))),
                    }
                }
                Section::Train => {
                    let t = &mut cfg.train;
                    match key {
                        "lr0" => t.lr0 = parse_float(value).map_err(&ctx)?,
                        "momentum" => t.momentum = parse_float(value).map_err(&ctx)?,
                        "weight_decay" => t.weight_decay = parse_float(value).map_err(&ctx)?,
                        "epochs" => t.epochs = parse_num(value).map_err(&ctx)?,
                        "batch_size" => t.batch_size = parse_num(value).map_err(&ctx)?,
                        "seed" => {
                            t.seed = value
                                .parse::<u64>()
                                .map_err(|_| ctx(format!("bad integer `{value}`")))?
                        }
                        "eta_min" => t.eta_min = parse_float(value).map_err(&ctx)?,
                        "hflip" => t.hflip = parse_bool(value).map_err(&ctx)?,
                        "vflip" => t.vflip = parse_bool(value).map_err(&ctx)?,
                        "rotate_deg" => t.rotate_deg = parse_float(value).map_err(&ctx)?,
                        "brightness_delta" => {
                            t.brightness_delta = parse_float(value).map_err(&ctx)?
                        }
                        "checkpoint_every" => t.checkpoint_every = parse_num(value).map_err(&ctx)?,
                        other => return Err(ctx(format!("unknown [train] key `{other}`"))),
                    }
                }
                Section::None => {
                    return Err(ctx("key outside a [model] or [train] section".to_string()))
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn parse_num(s: &str) -> std::result::Result<usize, String> {
    s.parse::<usize>().map_err(|_| format!("bad integer `{s}`"))
}

fn parse_float(s: &str) -> std::result::Result<f64, String> {
    s.parse::<f64>().map_err(|_| format!("bad float `{s}`"))
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("bad bool `{s}` (expected true/false)")),
    }
}

fn parse_hw(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("bad size `{s}` (expected HxW)"))?;
    Ok((parse_num(h.trim())?, parse_num(w.trim())?))
}
