//! Flat `key = value` configuration with dotted section names.
//!
//! Every key has a default; files and command-line overrides are applied on
//! top in that order. Unknown keys are errors naming the key.

use std::path::{Path, PathBuf};

use crate::augment::AugmentationPolicy;
use crate::error::{io_err, Error, Result};
use crate::model::ModelConfig;

/// Which augmentation each branch sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchPolicy {
    /// Rotating weak/strong assignment.
    WeakStrong,
    AllWeak,
    AllStrong,
}

impl BranchPolicy {
    pub fn name(self) -> &'static str {
        match self {
            BranchPolicy::WeakStrong => "weak_strong",
            BranchPolicy::AllWeak => "all_weak",
            BranchPolicy::AllStrong => "all_strong",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Unlabeled samples per labeled sample in each iteration.
    pub unlabeled_ratio: usize,
    pub lr_warmup: f64,
    pub lr_cross: f64,
    pub lambda: f64,
    pub seed: u64,
    pub branch_policy: BranchPolicy,
    /// Cross pseudo-supervision after warmup.
    pub cross: bool,
    pub rho: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub max_len: usize,
    /// Decoder (1 or 2) used for evaluation.
    pub eval_branch: usize,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub augment: AugmentationPolicy,
    pub model: ModelConfig,
    pub data_train: Option<PathBuf>,
    pub data_unlabeled: Option<PathBuf>,
    pub data_test: Option<PathBuf>,
    pub data_vocab: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            warmup_epochs: 60,
            batch_size: 8,
            unlabeled_ratio: 1,
            lr_warmup: 1.0,
            lr_cross: 0.1,
            lambda: 1e-3,
            seed: 0,
            branch_policy: BranchPolicy::WeakStrong,
            cross: true,
            rho: 0.9,
            eps: 1e-6,
            weight_decay: 1e-4,
            clip: 100.0,
            max_len: 24,
            eval_branch: 1,
            checkpoint: None,
            metrics: None,
            augment: AugmentationPolicy::strong(),
            model: ModelConfig::default(),
            data_train: None,
            data_unlabeled: None,
            data_test: None,
            data_vocab: None,
        }
    }
}

/// `(key, description)` for every recognised key.
pub const KEYS: &[(&str, &str)] = &[
    ("train.epochs", "total epochs"),
    ("train.warmup_epochs", "supervised-only epochs before cross-training"),
    ("train.batch_size", "labeled samples per iteration"),
    ("train.unlabeled_ratio", "unlabeled samples per labeled sample"),
    ("train.lr_warmup", "peak learning rate of the warmup phase"),
    ("train.lr_cross", "peak learning rate of the cross-training phase"),
    ("train.lambda", "weight of both cross pseudo-supervision terms"),
    ("train.seed", "seed for initialisation, shuffling and augmentation"),
    ("train.branch_policy", "weak_strong | all_weak | all_strong"),
    ("train.cross", "enable cross pseudo-supervision after warmup"),
    ("train.rho", "Adadelta decay"),
    ("train.eps", "Adadelta epsilon"),
    ("train.weight_decay", "L2 weight decay"),
    ("train.clip", "global gradient-norm clip (0 = off)"),
    ("train.max_len", "maximum decoded length"),
    ("train.eval_branch", "decoder used for evaluation (1 or 2)"),
    ("train.checkpoint", "checkpoint path, rewritten every epoch"),
    ("train.metrics", "per-iteration metrics log path"),
    ("aug.p_distort", "probability of mesh distortion"),
    ("aug.p_stretch", "probability of stretching"),
    ("aug.p_perspective", "probability of perspective warp"),
    ("aug.grid", "distortion control points per side"),
    ("aug.max_disp_frac", "largest distortion displacement / height"),
    ("aug.stretch_lo", "smallest stretch factor"),
    ("aug.stretch_hi", "largest stretch factor"),
    ("aug.persp_frac", "largest perspective corner offset / side"),
    ("enc.growth", "dense-block growth rate"),
    ("enc.blocks", "comma-separated dense-block depths"),
    ("enc.init_ch", "stem output channels"),
    ("dec.hidden", "decoder hidden size"),
    ("dec.embed", "token embedding size"),
    ("dec.attn", "attention size"),
    ("dec.coverage_kernel", "coverage convolution size (odd)"),
    ("dec.count_hidden", "counting-head hidden channels"),
    ("gdcm.enabled", "dynamic counting refinement"),
    ("gdcm.clamp", "clamp the residual count at zero"),
    ("data.train", "labeled corpus (directory or manifest)"),
    ("data.unlabeled", "unlabeled corpus; labels there are ignored"),
    ("data.test", "evaluation corpus"),
    ("data.vocab", "vocabulary file (default: the training corpus's)"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config { key: key.to_string(), message: format!("cannot parse {value:?}") })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config { key: key.to_string(), message: format!("expected a boolean, got {value:?}") }),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let a = &mut self.augment;
        let enc = &mut self.model.encoder;
        let dec = &mut self.model.decoder;
        match key {
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.unlabeled_ratio" => self.unlabeled_ratio = parse(key, v)?,
            "train.lr_warmup" => self.lr_warmup = parse(key, v)?,
            "train.lr_cross" => self.lr_cross = parse(key, v)?,
            "train.lambda" => self.lambda = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.branch_policy" => {
                self.branch_policy = match v {
                    "weak_strong" => BranchPolicy::WeakStrong,
                    "all_weak" => BranchPolicy::AllWeak,
                    "all_strong" => BranchPolicy::AllStrong,
                    _ => {
                        return Err(Error::Config {
                            key: key.into(),
                            message: format!("expected weak_strong, all_weak or all_strong, got {v:?}"),
                        })
                    }
                }
            }
            "train.cross" => self.cross = parse_bool(key, v)?,
            "train.rho" => self.rho = parse(key, v)?,
            "train.eps" => self.eps = parse(key, v)?,
            "train.weight_decay" => self.weight_decay = parse(key, v)?,
            "train.clip" => self.clip = parse(key, v)?,
            "train.max_len" => self.max_len = parse(key, v)?,
            "train.eval_branch" => self.eval_branch = parse(key, v)?,
            "train.checkpoint" => self.checkpoint = opt_path(v),
            "train.metrics" => self.metrics = opt_path(v),
            "aug.p_distort" => a.p_distort = parse(key, v)?,
            "aug.p_stretch" => a.p_stretch = parse(key, v)?,
            "aug.p_perspective" => a.p_perspective = parse(key, v)?,
            "aug.grid" => a.grid = parse(key, v)?,
            "aug.max_disp_frac" => a.max_disp_frac = parse(key, v)?,
            "aug.stretch_lo" => a.stretch_lo = parse(key, v)?,
            "aug.stretch_hi" => a.stretch_hi = parse(key, v)?,
            "aug.persp_frac" => a.persp_frac = parse(key, v)?,
            "enc.growth" => enc.growth_rate = parse(key, v)?,
            "enc.blocks" => {
                enc.block_depths = v.split(',').map(|d| parse(key, d.trim())).collect::<Result<_>>()?;
            }
            "enc.init_ch" => enc.initial_channels = parse(key, v)?,
            "dec.hidden" => dec.hidden = parse(key, v)?,
            "dec.embed" => dec.embed = parse(key, v)?,
            "dec.attn" => dec.attn = parse(key, v)?,
            "dec.coverage_kernel" => dec.coverage_kernel = parse(key, v)?,
            "dec.count_hidden" => self.model.count_hidden = parse(key, v)?,
            "gdcm.enabled" => dec.gdcm = parse_bool(key, v)?,
            "gdcm.clamp" => dec.clamp = parse_bool(key, v)?,
            "data.train" => self.data_train = opt_path(v),
            "data.unlabeled" => self.data_unlabeled = opt_path(v),
            "data.test" => self.data_test = opt_path(v),
            "data.vocab" => self.data_vocab = opt_path(v),
            _ => return Err(Error::Config { key: key.to_string(), message: "unknown key".into() }),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (a, enc, dec) = (&self.augment, &self.model.encoder, &self.model.decoder);
        Some(match key {
            "train.epochs" => self.epochs.to_string(),
            "train.warmup_epochs" => self.warmup_epochs.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.unlabeled_ratio" => self.unlabeled_ratio.to_string(),
            "train.lr_warmup" => self.lr_warmup.to_string(),
            "train.lr_cross" => self.lr_cross.to_string(),
            "train.lambda" => self.lambda.to_string(),
            "train.seed" => self.seed.to_string(),
            "train.branch_policy" => self.branch_policy.name().to_string(),
            "train.cross" => self.cross.to_string(),
            "train.rho" => self.rho.to_string(),
            "train.eps" => self.eps.to_string(),
            "train.weight_decay" => self.weight_decay.to_string(),
            "train.clip" => self.clip.to_string(),
            "train.max_len" => self.max_len.to_string(),
            "train.eval_branch" => self.eval_branch.to_string(),
            "train.checkpoint" => show_path(&self.checkpoint),
            "train.metrics" => show_path(&self.metrics),
            "aug.p_distort" => a.p_distort.to_string(),
            "aug.p_stretch" => a.p_stretch.to_string(),
            "aug.p_perspective" => a.p_perspective.to_string(),
            "aug.grid" => a.grid.to_string(),
            "aug.max_disp_frac" => a.max_disp_frac.to_string(),
            "aug.stretch_lo" => a.stretch_lo.to_string(),
            "aug.stretch_hi" => a.stretch_hi.to_string(),
            "aug.persp_frac" => a.persp_frac.to_string(),
            "enc.growth" => enc.growth_rate.to_string(),
            "enc.blocks" => enc.block_depths.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "enc.init_ch" => enc.initial_channels.to_string(),
            "dec.hidden" => dec.hidden.to_string(),
            "dec.embed" => dec.embed.to_string(),
            "dec.attn" => dec.attn.to_string(),
            "dec.coverage_kernel" => dec.coverage_kernel.to_string(),
            "dec.count_hidden" => self.model.count_hidden.to_string(),
            "gdcm.enabled" => dec.gdcm.to_string(),
            "gdcm.clamp" => dec.clamp.to_string(),
            "data.train" => show_path(&self.data_train),
            "data.unlabeled" => show_path(&self.data_unlabeled),
            "data.test" => show_path(&self.data_test),
            "data.vocab" => show_path(&self.data_vocab),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                message: format!("line {}: expected key = value", n + 1),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        self.apply_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|(k, _)| format!("{k} = {}\n", self.get(k).unwrap_or_default())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, m: String| Err(Error::Config { key: key.into(), message: m });
        if self.warmup_epochs > self.epochs {
            return bad("train.warmup_epochs", format!("{} exceeds train.epochs = {}", self.warmup_epochs, self.epochs));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size", "must be at least 1".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("train.lambda", "must be positive".into());
        }
        for (k, v) in [("train.lr_warmup", self.lr_warmup), ("train.lr_cross", self.lr_cross)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(k, "must be nonnegative".into());
            }
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("train.rho", "must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("train.eps", "must be positive".into());
        }
        if self.max_len == 0 {
            return bad("train.max_len", "must be at least 1".into());
        }
        if !(1..=2).contains(&self.eval_branch) {
            return bad("train.eval_branch", "must be 1 or 2".into());
        }
        let a = &self.augment;
        for (k, p) in [("aug.p_distort", a.p_distort), ("aug.p_stretch", a.p_stretch), ("aug.p_perspective", a.p_perspective)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(k, "probability must lie in [0, 1]".into());
            }
        }
        if a.grid < 2 {
            return bad("aug.grid", "must be at least 2".into());
        }
        if !(a.stretch_lo > 0.0 && a.stretch_lo <= a.stretch_hi) {
            return bad("aug.stretch_lo", "need 0 < stretch_lo <= stretch_hi".into());
        }
        if a.max_disp_frac < 0.0 || a.persp_frac < 0.0 || a.persp_frac >= 0.5 {
            return bad("aug.persp_frac", "magnitudes must be nonnegative (perspective below 0.5)".into());
        }
        self.model.encoder.validate()?;
        self.model.decoder.validate()?;
        if self.model.count_hidden == 0 {
            return bad("dec.count_hidden", "must be positive".into());
        }
        Ok(())
    }
}
