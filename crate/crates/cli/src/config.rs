//! Flat `key = value` run configuration.
//!
//! Sources are applied in order, later ones winning: built-in defaults, the
//! `DIFFGAP_SEED` environment variable, the config file, `--set` overrides
//! and finally the dedicated flags (`--seed`, `--steps`, ...).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use diffgap::contrastive::{ConceptSpec, ContrastiveConfig};
use diffgap::denoiser::DenoiserConfig;
use diffgap::trainer::{direction_configs, Direction, TrainConfig};

use crate::error::CliError;

pub const SEED_ENV: &str = "DIFFGAP_SEED";
pub const RESOLVED_FILE: &str = "resolved.cfg";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusSource {
    /// Embeddings straight from the concept generator.
    Direct,
    /// Embeddings from contrastively trained linear encoders.
    Contrastive,
}

impl CorpusSource {
    fn as_str(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Contrastive => "contrastive",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus_source: CorpusSource,
    /// `seed` is overwritten by the run seed.
    pub concept: ConceptSpec,
    pub contrastive: ContrastiveConfig,
    /// Embedding dims are taken from the corpus; only the network shape
    /// fields are read.
    pub denoiser: DenoiserConfig,
    /// `seed` is overwritten by the run seed.
    pub train: TrainConfig,
    /// Items held out at the tail of the corpus for evaluation.
    pub eval_count: usize,
    pub steps: usize,
    pub eta: f64,
    pub sample_direction: Direction,
    /// Coordinates sampled per parameter tensor by `grad-check`.
    pub grad_check_coords: usize,
    pub grad_check_step: f64,
    pub grad_check_tol: f64,
    pub out: PathBuf,
    pub corpus: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus_source: CorpusSource::Direct,
            concept: ConceptSpec::default(),
            contrastive: ContrastiveConfig::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
            eval_count: 500,
            steps: 50,
            eta: 0.0,
            sample_direction: Direction::CondVDenoiseA,
            grad_check_coords: 16,
            grad_check_step: 1e-5,
            grad_check_tol: 1e-6,
            out: PathBuf::from("out"),
            corpus: None,
            ckpt: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::Value {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_opt<T: FromStr>(key: &str, value: &str, none: &str) -> Result<Option<T>, CliError> {
    if value == none {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

fn path_opt(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Sets one key. `m` is accepted as an alias of `interval`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "corpus_source" => {
                self.corpus_source = match v {
                    "direct" => CorpusSource::Direct,
                    "contrastive" => CorpusSource::Contrastive,
                    _ => return Err(CliError::Value { key: key.into(), value: v.into() }),
                }
            }
            "concept_dim" => self.concept.concept_dim = parse(key, v)?,
            "raw_dim" => self.concept.raw_dim = parse(key, v)?,
            "dim_a" => self.concept.dim_a = parse(key, v)?,
            "dim_v" => self.concept.dim_v = parse(key, v)?,
            "map_correlation" => self.concept.map_correlation = parse(key, v)?,
            "sigma_a" => self.concept.sigma_a = parse(key, v)?,
            "sigma_v" => self.concept.sigma_v = parse(key, v)?,
            "count" => self.concept.count = parse(key, v)?,
            "temperature" => self.contrastive.temperature = parse(key, v)?,
            "contrastive_batch_size" => self.contrastive.batch_size = parse(key, v)?,
            "contrastive_epochs" => self.contrastive.epochs = parse(key, v)?,
            "contrastive_learning_rate" => self.contrastive.learning_rate = parse(key, v)?,
            "time_embed_dim" => self.denoiser.time_embed_dim = parse(key, v)?,
            "hidden_dim" => self.denoiser.hidden_dim = parse(key, v)?,
            "hidden_layers" => self.denoiser.hidden_layers = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "interval" | "m" => self.train.interval = parse_opt(key, v, "none")?,
            "adam_beta1" => self.train.beta1 = parse(key, v)?,
            "adam_beta2" => self.train.beta2 = parse(key, v)?,
            "adam_eps" => self.train.eps = parse(key, v)?,
            "diffusion_steps" => self.train.schedule.steps = parse(key, v)?,
            "beta_start" => self.train.schedule.beta_start = parse(key, v)?,
            "beta_end" => self.train.schedule.beta_end = parse(key, v)?,
            "data_scale" => self.train.data_scale = parse_opt(key, v, "auto")?,
            "eval_count" => self.eval_count = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "eta" => self.eta = parse(key, v)?,
            "sample_direction" => {
                self.sample_direction =
                    Direction::parse(v).ok_or_else(|| CliError::Value { key: key.into(), value: v.into() })?
            }
            "grad_check_coords" => self.grad_check_coords = parse(key, v)?,
            "grad_check_step" => self.grad_check_step = parse(key, v)?,
            "grad_check_tol" => self.grad_check_tol = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "corpus" => self.corpus = path_opt(v),
            "ckpt" => self.ckpt = path_opt(v),
            other => return Err(CliError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Every key with its current value, in `resolved.cfg` order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("corpus_source", self.corpus_source.as_str().to_string()),
            ("concept_dim", self.concept.concept_dim.to_string()),
            ("raw_dim", self.concept.raw_dim.to_string()),
            ("dim_a", self.concept.dim_a.to_string()),
            ("dim_v", self.concept.dim_v.to_string()),
            ("map_correlation", self.concept.map_correlation.to_string()),
            ("sigma_a", self.concept.sigma_a.to_string()),
            ("sigma_v", self.concept.sigma_v.to_string()),
            ("count", self.concept.count.to_string()),
            ("temperature", self.contrastive.temperature.to_string()),
            ("contrastive_batch_size", self.contrastive.batch_size.to_string()),
            ("contrastive_epochs", self.contrastive.epochs.to_string()),
            ("contrastive_learning_rate", self.contrastive.learning_rate.to_string()),
            ("time_embed_dim", self.denoiser.time_embed_dim.to_string()),
            ("hidden_dim", self.denoiser.hidden_dim.to_string()),
            ("hidden_layers", self.denoiser.hidden_layers.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("learning_rate", self.train.learning_rate.to_string()),
            ("epochs", self.train.epochs.to_string()),
            ("interval", show_opt(&self.train.interval, "none")),
            ("adam_beta1", self.train.beta1.to_string()),
            ("adam_beta2", self.train.beta2.to_string()),
            ("adam_eps", self.train.eps.to_string()),
            ("diffusion_steps", self.train.schedule.steps.to_string()),
            ("beta_start", self.train.schedule.beta_start.to_string()),
            ("beta_end", self.train.schedule.beta_end.to_string()),
            ("data_scale", show_opt(&self.train.data_scale, "auto")),
            ("eval_count", self.eval_count.to_string()),
            ("steps", self.steps.to_string()),
            ("eta", self.eta.to_string()),
            ("sample_direction", self.sample_direction.label().to_string()),
            ("grad_check_coords", self.grad_check_coords.to_string()),
            ("grad_check_step", self.grad_check_step.to_string()),
            ("grad_check_tol", self.grad_check_tol.to_string()),
            ("out", self.out.display().to_string()),
            ("corpus", self.corpus_path().display().to_string()),
            ("ckpt", self.ckpt_path().display().to_string()),
        ]
    }

    /// Applies a config file's text. Blank lines are skipped and `#`
    /// starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Syntax {
                line: i + 1,
                text: line.to_string(),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Corpus file: the `corpus` key, else `<out>/corpus.dgc`.
    pub fn corpus_path(&self) -> PathBuf {
        self.corpus.clone().unwrap_or_else(|| self.out.join("corpus.dgc"))
    }

    /// Checkpoint file: the `ckpt` key, else `<out>/model.dgck`.
    pub fn ckpt_path(&self) -> PathBuf {
        self.ckpt.clone().unwrap_or_else(|| self.out.join("model.dgck"))
    }

    /// Concept spec carrying the run seed.
    pub fn concept_spec(&self) -> ConceptSpec {
        ConceptSpec { seed: self.seed, ..self.concept }
    }

    /// Training config carrying the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train }
    }

    /// The denoiser config for one direction at the configured dims.
    pub fn denoiser_config(&self, direction: Direction) -> DenoiserConfig {
        let (va, av) = direction_configs(&self.denoiser, self.concept.dim_a, self.concept.dim_v);
        match direction {
            Direction::CondVDenoiseA => va,
            Direction::CondADenoiseV => av,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.concept_spec().validate()?;
        self.contrastive.validate()?;
        self.train_config().validate()?;
        self.denoiser_config(Direction::CondVDenoiseA).validate()?;
        self.denoiser_config(Direction::CondADenoiseV).validate()?;
        if self.eval_count == 0 || self.eval_count >= self.concept.count {
            return Err(CliError::Conflict(format!(
                "eval_count {} must be between 1 and count - 1 ({})",
                self.eval_count,
                self.concept.count.saturating_sub(1)
            )));
        }
        if self.steps == 0 || self.steps > self.train.schedule.steps {
            return Err(CliError::Conflict(format!(
                "steps {} must be between 1 and diffusion_steps {}",
                self.steps, self.train.schedule.steps
            )));
        }
        if !(self.eta >= 0.0) {
            return Err(CliError::Conflict(format!("eta must be non-negative, got {}", self.eta)));
        }
        Ok(())
    }

    /// The `resolved.cfg` text.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("write to string");
        }
        s
    }
}

/// Everything that feeds [`resolve`], lowest precedence first.
#[derive(Debug, Clone, Default)]
pub struct Sources {
    pub env_seed: Option<String>,
    pub file: Option<PathBuf>,
    pub sets: Vec<String>,
    pub flags: Vec<(&'static str, String)>,
}

impl Sources {
    /// Reads `DIFFGAP_SEED` from the process environment.
    pub fn with_env(mut self) -> Self {
        self.env_seed = std::env::var(SEED_ENV).ok();
        self
    }
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Merges all sources over the defaults and validates the result.
pub fn resolve(src: &Sources) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(seed) = &src.env_seed {
        cfg.seed = parse(SEED_ENV, seed.trim())?;
    }
    if let Some(path) = &src.file {
        cfg.apply_text(&read_file(path)?)?;
    }
    for s in &src.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| CliError::Syntax {
            line: 0,
            text: s.clone(),
        })?;
        cfg.set(k, v)?;
    }
    for (k, v) in &src.flags {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
