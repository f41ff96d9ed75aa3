//! TOML run configuration shared by every CLI subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::absorption::AbsorptionConfig;
use crate::corpus::{PretrainOptions, RecallCorpusConfig};
use crate::error::{Error, Result};
use crate::eval::{GridSpec, DEFAULT_K_GEN};
use crate::model::ModelConfig;
use crate::streaming::CostMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds for multi-seed subcommands; empty means `[seed]`.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Model to load; a fresh initialization from `model` when absent.
    pub checkpoint: Option<PathBuf>,
    /// Text mixed into the pretraining corpus; built-in prose when absent.
    pub corpus_path: Option<PathBuf>,
    pub train_steps: usize,
    pub model: ModelConfig,
    pub absorption: AbsorptionConfig,
    pub pretrain: PretrainOptions,
    pub corpus: RecallCorpusConfig,
    pub task: TaskConfig,
    pub stream: StreamConfig,
    pub bench: BenchConfig,
    pub ablation: GridSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            seeds: Vec::new(),
            output_dir: PathBuf::from("out"),
            checkpoint: None,
            corpus_path: None,
            train_steps: 5000,
            model: ModelConfig::default(),
            absorption: AbsorptionConfig::default(),
            pretrain: PretrainOptions::default(),
            corpus: RecallCorpusConfig::default(),
            task: TaskConfig::default(),
            stream: StreamConfig::default(),
            bench: BenchConfig::default(),
            ablation: GridSpec::default(),
        }
    }
}

/// Recall episodes used by `absorb` and `ablate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub num_pairs: usize,
    pub holdout_len: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { num_pairs: 4, holdout_len: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub max_new_tokens: usize,
    /// Prompt text file; `--prompt` overrides it.
    pub prompt_path: Option<PathBuf>,
    pub stop_at_eos: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig { max_new_tokens: 256, prompt_path: None, stop_at_eos: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub modes: Vec<CostMode>,
    pub prefix_lengths: Vec<usize>,
    pub k_gen: usize,
    pub trials: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            modes: vec![CostMode::Standard, CostMode::Absorber],
            prefix_lengths: vec![256, 512, 1024, 2048],
            k_gen: DEFAULT_K_GEN,
            trials: 5,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        precheck(&raw)?;
        let cfg: RunConfig = toml::Value::Table(raw)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data")
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(prefixed("model"))?;
        self.absorption.validate().map_err(prefixed("absorption"))?;
        self.pretrain.optimizer.validate().map_err(prefixed("pretrain.optimizer"))?;
        let a = &self.absorption;
        if a.n + a.m > self.model.max_positions {
            return Err(Error::Config(format!(
                "absorption.n + absorption.m = {} exceeds model.max_positions = {}",
                a.n + a.m,
                self.model.max_positions
            )));
        }
        if !(self.pretrain.learning_rate.is_finite() && self.pretrain.learning_rate > 0.0) {
            return Err(Error::Config("pretrain.learning_rate must be > 0".into()));
        }
        if self.pretrain.context_window < 2 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain.context_window must be ≥ 2 and pretrain.batch_size ≥ 1".into()));
        }
        if self.corpus.min_pairs == 0 || self.corpus.min_pairs > self.corpus.max_pairs {
            return Err(Error::Config("corpus.min_pairs must be in [1, corpus.max_pairs]".into()));
        }
        if self.task.num_pairs == 0 || self.task.holdout_len == 0 {
            return Err(Error::Config("task.num_pairs and task.holdout_len must be ≥ 1".into()));
        }
        let b = &self.bench;
        if b.modes.is_empty() || b.prefix_lengths.is_empty() || b.prefix_lengths.contains(&0) {
            return Err(Error::Config("bench.modes and bench.prefix_lengths must be nonempty, lengths ≥ 1".into()));
        }
        if b.k_gen == 0 || b.trials == 0 {
            return Err(Error::Config("bench.k_gen and bench.trials must be ≥ 1".into()));
        }
        if self.ablation.combinations() == 0 {
            return Err(Error::Config("every ablation axis needs at least one value".into()));
        }
        Ok(())
    }
}

fn prefixed(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config(msg) => Error::Config(format!("{section}: {msg}")),
        other => other,
    }
}

/// Sign and range checks that typed parsing would blur into one message.
fn precheck(raw: &toml::Table) -> Result<()> {
    let Some(abs) = raw.get("absorption").and_then(|v| v.as_table()) else { return Ok(()) };
    if let Some(n) = abs.get("n").and_then(|v| v.as_integer()) {
        if n < 0 {
            return Err(Error::Config(format!("absorption.n must be ≥ 0, got {n}")));
        }
    }
    if let Some(m) = abs.get("m").and_then(|v| v.as_integer()) {
        if m < 1 {
            return Err(Error::Config(format!("absorption.m must be ≥ 1, got {m}")));
        }
    }
    let lr = abs.get("learning_rate").and_then(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)));
    if let Some(lr) = lr {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("absorption.learning_rate must be > 0, got {lr}")));
        }
    }
    Ok(())
}
