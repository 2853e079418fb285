//! Run configuration: a flat key=value file plus programmatic overrides,
//! resolved into one validated struct that pins every knob of a run.

use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::train::MixMode;
use crate::transformer::ModelConfig;

/// Augmentation policy selected for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Htm,
    Vtm,
    HtmVtm,
    RandomSample,
    RandomToken,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Htm => "htm",
            Mode::Vtm => "vtm",
            Mode::HtmVtm => "htm_vtm",
            Mode::RandomSample => "random_sample",
            Mode::RandomToken => "random_token",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "htm" => Ok(Mode::Htm),
            "vtm" => Ok(Mode::Vtm),
            "htm_vtm" => Ok(Mode::HtmVtm),
            "random_sample" => Ok(Mode::RandomSample),
            "random_token" => Ok(Mode::RandomToken),
            other => Err(Error::config(format!(
                "unknown mode {other:?}, expected one of baseline, htm, vtm, htm_vtm, random_sample, random_token"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Shape and noise level of the synthetic image task. Classes, image size
/// and channels mirror the model settings and are kept in lockstep by the
/// key parser.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub noise_std: f64,
}

/// Everything one run depends on. The seed pins dataset, initialization,
/// shuffling and the random baselines bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm bound per step; 0 disables clipping.
    pub clip_norm: f64,
    pub dataset: DatasetConfig,
    pub mode: Mode,
    pub out_dir: PathBuf,
    /// Expected selection size for the random-sample ablation.
    pub random_k: f64,
    /// Tokens replaced per pair in the random-token ablation.
    pub random_tokens_per_pair: usize,
    /// Record wall-clock times in metrics. Off by default so repeated runs
    /// produce byte-identical output.
    pub timings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let dataset = DatasetConfig {
            classes: model.num_classes,
            samples_per_class: 160,
            image_size: model.image_size,
            in_channels: model.in_channels,
            noise_std: 0.3,
        };
        RunConfig {
            model,
            seed: 0,
            epochs: 30,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.5,
            clip_norm: 1.0,
            dataset,
            mode: Mode::Baseline,
            out_dir: PathBuf::from("out"),
            random_k: 8.0,
            random_tokens_per_pair: 4,
            timings: false,
        }
    }
}

impl RunConfig {
    /// The trainer-facing mode value, with ablation knobs filled in.
    pub fn mix_mode(&self) -> MixMode {
        match self.mode {
            Mode::Baseline => MixMode::None,
            Mode::Htm => MixMode::Htm,
            Mode::Vtm => MixMode::Vtm,
            Mode::HtmVtm => MixMode::HtmVtm,
            Mode::RandomSample => MixMode::RandomSample {
                expected_k: self.random_k,
            },
            Mode::RandomToken => MixMode::RandomToken {
                count: self.random_tokens_per_pair,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.dataset.classes != self.model.num_classes
            || self.dataset.image_size != self.model.image_size
            || self.dataset.in_channels != self.model.in_channels
        {
            return Err(Error::config(
                "dataset shape keys must match the model (set classes/image_size/in_channels once)",
            ));
        }
        if self.dataset.classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.dataset.samples_per_class < 5 {
            return Err(Error::config(
                "need at least 5 samples per class for a validation split",
            ));
        }
        if !self.dataset.noise_std.is_finite() || self.dataset.noise_std < 0.0 {
            return Err(Error::config(format!(
                "noise_std must be finite and non-negative, got {}",
                self.dataset.noise_std
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !self.clip_norm.is_finite() || self.clip_norm < 0.0 {
            return Err(Error::config(format!(
                "clip_norm must be finite and non-negative, got {}",
                self.clip_norm
            )));
        }
        if !self.random_k.is_finite() || self.random_k < 0.0 {
            return Err(Error::config(format!(
                "random_k must be finite and non-negative, got {}",
                self.random_k
            )));
        }
        if self.random_tokens_per_pair > self.model.n_tokens() {
            return Err(Error::config(format!(
                "random_tokens_per_pair {} exceeds the {} tokens per image",
                self.random_tokens_per_pair,
                self.model.n_tokens()
            )));
        }
        let needs_token_hook = matches!(
            self.mode,
            Mode::Htm | Mode::HtmVtm | Mode::RandomSample | Mode::RandomToken
        );
        if needs_token_hook && self.model.htm_layer.is_none() {
            return Err(Error::config(format!(
                "mode {} needs htm_layer set",
                self.mode
            )));
        }
        if matches!(self.mode, Mode::Vtm | Mode::HtmVtm) && self.model.vtm_layer.is_none() {
            return Err(Error::config(format!(
                "mode {} needs vtm_layer set",
                self.mode
            )));
        }
        Ok(())
    }

    /// Applies one key=value setting. Shared by the config file parser and
    /// command-line overrides so both spell keys identically.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::config(format!("invalid value {value:?} for key {key:?}"))
            })
        }
        fn layer(key: &str, value: &str) -> Result<Option<usize>> {
            if value == "none" {
                Ok(None)
            } else {
                num::<usize>(key, value).map(Some)
            }
        }
        match key {
            "image_size" => {
                let v = num(key, value)?;
                self.model.image_size = v;
                self.dataset.image_size = v;
            }
            "in_channels" => {
                let v = num(key, value)?;
                self.model.in_channels = v;
                self.dataset.in_channels = v;
            }
            "classes" => {
                let v = num(key, value)?;
                self.model.num_classes = v;
                self.dataset.classes = v;
            }
            "patch_size" => self.model.patch_size = num(key, value)?,
            "depth" => self.model.depth = num(key, value)?,
            "heads" => self.model.heads = num(key, value)?,
            "dim" => self.model.dim = num(key, value)?,
            "mlp_ratio" => self.model.mlp_ratio = num(key, value)?,
            "htm_layer" => self.model.htm_layer = layer(key, value)?,
            "vtm_layer" => self.model.vtm_layer = layer(key, value)?,
            "tau" => self.model.tau = num(key, value)?,
            "rho" => self.model.rho = num(key, value)?,
            "kappa" => self.model.kappa = num(key, value)?,
            "ell" => self.model.ell = num(key, value)?,
            "score_loss_weight" => self.model.score_loss_weight = num(key, value)?,
            "vtm_pooled_grad" => self.model.vtm_pooled_grad = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "samples_per_class" => self.dataset.samples_per_class = num(key, value)?,
            "noise_std" => self.dataset.noise_std = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "random_k" => self.random_k = num(key, value)?,
            "random_tokens_per_pair" => self.random_tokens_per_pair = num(key, value)?,
            "timings" => self.timings = num(key, value)?,
            other => {
                return Err(Error::config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }
}

/// Parses the flat `key = value` format: one setting per line, `#` comments,
/// blank lines ignored, unknown keys rejected.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
        })?;
        cfg.apply_key(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

/// Reads and parses a config file.
pub fn parse_config_file(path: impl AsRef<std::path::Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
