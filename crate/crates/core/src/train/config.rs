use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{caption, SceneSpec, Vocab, RNG_ALGORITHM, TEMPLATES};
use crate::encoders::{validate_keep_rate, TextConfig, ViTConfig};
use crate::error::{Error, Result};
use crate::losses::DistillVariant;
use crate::momentum::EmaConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.1,
            warmup_steps: 500,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub train_size: usize,
    pub eval_size: usize,
    /// Fraction of training pairs whose captions are swapped.
    pub misalignment: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_size: 10_000,
            eval_size: 1_000,
            misalignment: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub variant: DistillVariant,
    /// Mixing weight λ for variants without a fixed schedule.
    pub lambda: f64,
    /// Run the momentum teacher. Disabled, training reduces to a plain
    /// symmetric contrastive loss on `T·Iᵀ` and requires `hard_only`.
    pub teacher: bool,
    pub epochs: usize,
    pub batch_size: usize,
    /// Save a checkpoint every this many epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub rng: String,
    pub vit: ViTConfig,
    pub text: TextConfig,
    pub ema: EmaConfig,
    pub optim: OptimConfig,
    pub corpus: CorpusConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: DistillVariant::Eclipse,
            lambda: 0.5,
            teacher: true,
            epochs: 20,
            batch_size: 128,
            checkpoint_every: 0,
            rng: RNG_ALGORITHM.to_string(),
            vit: ViTConfig::default(),
            text: TextConfig::default(),
            ema: EmaConfig::default(),
            optim: OptimConfig::default(),
            corpus: CorpusConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.text.validate(&self.vit)?;
        self.ema.validate()?;
        validate_keep_rate(self.vit.keep_rate, "vit.keep_rate")?;
        self.variant.lambda_schedule(self.lambda).validate()?;
        if self.rng != RNG_ALGORITHM {
            return Err(Error::config("rng", format!("only {RNG_ALGORITHM:?} is available")));
        }
        let vocab = Vocab::new();
        if self.text.vocab_size < vocab.len() {
            return Err(Error::config(
                "text.vocab_size",
                format!("{} is smaller than the {}-word caption vocabulary", self.text.vocab_size, vocab.len()),
            ));
        }
        let longest = SceneSpec::all()
            .flat_map(|s| (0..TEMPLATES).map(move |t| caption(&s, t).len()))
            .max()
            .unwrap_or(0);
        if self.text.max_len <= longest {
            return Err(Error::config(
                "text.max_len",
                format!("captions need {} tokens including end-of-text", longest + 1),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "contrastive training needs at least 2 pairs"));
        }
        if self.corpus.train_size < self.batch_size {
            return Err(Error::config(
                "corpus.train_size",
                format!("{} pairs cannot fill one batch of {}", self.corpus.train_size, self.batch_size),
            ));
        }
        if self.corpus.eval_size < 10 {
            return Err(Error::config("corpus.eval_size", "R@10 needs at least 10 eval pairs"));
        }
        if !(0.0..=1.0).contains(&self.corpus.misalignment) {
            return Err(Error::config("corpus.misalignment", "must lie in [0, 1]"));
        }
        if self.variant.needs_text_ema() && !self.ema.text_ema {
            return Err(Error::config(
                "ema.text_ema",
                format!("variant {} needs the momentum text encoder; set ema.text_ema = true", self.variant),
            ));
        }
        if !self.teacher && self.variant != DistillVariant::HardOnly {
            return Err(Error::config(
                "teacher",
                format!("variant {} needs the teacher branch; only hard_only runs without it", self.variant),
            ));
        }
        let o = &self.optim;
        if !(o.learning_rate > 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0)
        {
            return Err(Error::config("optim", format!("{o:?} is not a valid optimizer setting")));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.corpus.train_size / self.batch_size
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch()) as u64
    }
}

/// A config file: training settings plus where outputs go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Write the training corpus as PNG + JSONL under `out_dir/corpus`.
    #[serde(default)]
    pub dump_corpus: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            train: TrainConfig::default(),
            out_dir: None,
            dump_corpus: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("found {}, this build reads version {CONFIG_VERSION}", cfg.version),
            ));
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::config("--config", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config { field, message } => Error::config(field, format!("{message} (in {})", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
