//! Run configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::crop_size;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::{Direction, StageSpec};

/// Which loss terms a step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Joint,
    TranslationOnly,
    ClassificationOnly,
}

impl TrainMode {
    pub fn uses_content(self) -> bool {
        self != TrainMode::ClassificationOnly
    }

    pub fn uses_labels(self) -> bool {
        self != TrainMode::TranslationOnly
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "translation_only" => Ok(TrainMode::TranslationOnly),
            "classification_only" => Ok(TrainMode::ClassificationOnly),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected joint, translation_only or classification_only)"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Joint => "joint",
            TrainMode::TranslationOnly => "translation_only",
            TrainMode::ClassificationOnly => "classification_only",
        })
    }
}

/// Where the trainable networks start from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    Random,
    FromCheckpoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TRecgConfig {
    pub direction: Direction,
    pub mode: TrainMode,
    pub stages: StageSpec,
    /// Decoder noise width; the direction's default when `None`.
    pub noise_dim: Option<usize>,
    pub loss: LossWeights,
    /// Side length images are resized to before cropping.
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub warm_epochs: usize,
    pub decay_epochs: usize,
    pub base_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub mix_ratio: f64,
    pub init_mode: InitMode,
    pub init_ckpt: Option<PathBuf>,
    pub mix_from: Option<PathBuf>,
    /// Checkpoint whose encoder becomes the content net; seeded random
    /// weights with calibrated batch-norm statistics otherwise.
    pub content_ckpt: Option<PathBuf>,
    /// Keep a numbered checkpoint per epoch besides the rolling latest one.
    pub keep_epoch_checkpoints: bool,
}

impl Default for TRecgConfig {
    fn default() -> Self {
        TRecgConfig::new(Direction::AToB)
    }
}

impl TRecgConfig {
    /// Toy defaults: 12 epochs (4 constant + 8 decaying), batch 16.
    pub fn new(direction: Direction) -> Self {
        TRecgConfig {
            direction,
            mode: TrainMode::Joint,
            stages: StageSpec::default(),
            noise_dim: None,
            loss: LossWeights::default(),
            image_size: 64,
            batch_size: 16,
            epochs: 12,
            warm_epochs: 4,
            decay_epochs: 8,
            base_lr: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            mix_ratio: 0.0,
            init_mode: InitMode::Random,
            init_ckpt: None,
            mix_from: None,
            content_ckpt: None,
            keep_epoch_checkpoints: false,
        }
    }

    /// The full-length schedule: 70 epochs, 20 constant then 50 decaying,
    /// batch 40.
    pub fn full_schedule(direction: Direction) -> Self {
        TRecgConfig {
            batch_size: 40,
            epochs: 70,
            warm_epochs: 20,
            decay_epochs: 50,
            ..TRecgConfig::new(direction)
        }
    }

    /// Sets `epochs`, keeping one third of them at the base rate.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.set_epochs(epochs);
        self
    }

    pub fn set_epochs(&mut self, epochs: usize) {
        self.epochs = epochs;
        self.warm_epochs = epochs / 3;
        self.decay_epochs = epochs - self.warm_epochs;
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim.unwrap_or(self.direction.default_noise_dim())
    }

    pub fn crop(&self) -> usize {
        crop_size(self.image_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.stages.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 || self.warm_epochs + self.decay_epochs != self.epochs {
            return Err(Error::Config(format!(
                "warm_epochs ({}) + decay_epochs ({}) must equal epochs ({}) > 0",
                self.warm_epochs, self.decay_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::Config(format!("mix_ratio must be in [0, 1], got {}", self.mix_ratio)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 (batch norm)".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must be in [0, 1) and eps > 0".into()));
        }
        let crop = self.crop();
        if crop % 8 != 0 {
            return Err(Error::Config(format!(
                "image_size {} crops to {crop}, which the decoder cannot mirror (needs a multiple of 8)",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
        }
        fn path(v: &str) -> Option<PathBuf> {
            (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
        }
        match key {
            "direction" => {
                self.direction = value.parse()?;
            }
            "mode" => self.mode = value.parse()?,
            "stage_channels" => {
                let v: Vec<usize> = value.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?;
                self.stages.channels = v
                    .try_into()
                    .map_err(|_| Error::Config("stage_channels needs four comma-separated values".into()))?;
            }
            "stage_blocks" => self.stages.blocks = num(key, value)?,
            "noise_dim" => self.noise_dim = if value == "auto" { None } else { Some(num(key, value)?) },
            "alpha" => self.loss.alpha = num(key, value)?,
            "beta" => self.loss.beta = num(key, value)?,
            "delta" => self.loss.delta = num(key, value)?,
            "content_layers" => {
                self.loss.content_layers = value.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?;
            }
            "image_size" => self.image_size = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "warm_epochs" => self.warm_epochs = num(key, value)?,
            "decay_epochs" => self.decay_epochs = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "mix_ratio" => self.mix_ratio = num(key, value)?,
            "init_mode" => {
                self.init_mode = match value {
                    "random" => InitMode::Random,
                    "from_checkpoint" => InitMode::FromCheckpoint,
                    v => return Err(Error::Config(format!("init_mode: expected random or from_checkpoint, got `{v}`"))),
                }
            }
            "init_ckpt" => self.init_ckpt = path(value),
            "mix_from" => self.mix_from = path(value),
            "content_ckpt" => self.content_ckpt = path(value),
            "keep_epoch_checkpoints" => self.keep_epoch_checkpoints = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every setting in `text`: UTF-8 lines `key = value`, blank
    /// lines and `#` comments ignored. Unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TRecgConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every setting, in a form [`TRecgConfig::parse`] reads back exactly.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("direction", self.direction.to_string());
        kv("mode", self.mode.to_string());
        kv("stage_channels", join(&self.stages.channels));
        kv("stage_blocks", self.stages.blocks.to_string());
        kv("noise_dim", self.noise_dim.map_or("auto".into(), |z| z.to_string()));
        kv("alpha", format!("{:?}", self.loss.alpha));
        kv("beta", format!("{:?}", self.loss.beta));
        kv("delta", format!("{:?}", self.loss.delta));
        kv("content_layers", join(&self.loss.content_layers));
        kv("image_size", self.image_size.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("warm_epochs", self.warm_epochs.to_string());
        kv("decay_epochs", self.decay_epochs.to_string());
        kv("base_lr", format!("{:?}", self.base_lr));
        kv("adam_beta1", format!("{:?}", self.adam_beta1));
        kv("adam_beta2", format!("{:?}", self.adam_beta2));
        kv("adam_eps", format!("{:?}", self.adam_eps));
        kv("seed", self.seed.to_string());
        kv("mix_ratio", format!("{:?}", self.mix_ratio));
        kv(
            "init_mode",
            match self.init_mode {
                InitMode::Random => "random",
                InitMode::FromCheckpoint => "from_checkpoint",
            }
            .into(),
        );
        kv("init_ckpt", path(&self.init_ckpt));
        kv("mix_from", path(&self.mix_from));
        kv("content_ckpt", path(&self.content_ckpt));
        kv("keep_epoch_checkpoints", self.keep_epoch_checkpoints.to_string());
        s
    }
}
