//! Experiment configuration, read from a single TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::MaskingConfig;
use crate::model::{EncoderConfig, TrainConfig};
use crate::objectives::{ObjectiveKind, ObjectiveSpec};
use crate::tasks::{FinetuneConfig, Sizes, Task};
use crate::transform::TransformSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// Where pre-training text comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Text corpus; when absent, sentences are sampled from the task grammar.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// `plain` or `jsonl`.
    #[serde(default = "default_format")]
    pub corpus_format: String,
    /// Dependency parses (tab-separated, one word per line) aligned with the
    /// corpus sentences. Required by syntax steps for file corpora.
    #[serde(default)]
    pub parses: Option<PathBuf>,
    #[serde(default = "default_sentences")]
    pub synthetic_sentences: usize,
    #[serde(default)]
    pub grammar_seed: u64,
    pub task_sizes: Sizes,
    /// BPE vocabulary size over both languages.
    pub vocab_size: usize,
    /// Instance length H.
    pub instance_len: usize,
}

fn default_format() -> String {
    "plain".into()
}

fn default_sentences() -> usize {
    4000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub tasks: Vec<Task>,
    pub transform: OneOrMany<TransformSpec>,
    pub objective: OneOrMany<ObjectiveSpec>,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub masking: MaskingConfig,
    pub finetune: FinetuneConfig,
    pub data: DataConfig,
    /// Log loss and alignment every this many pre-training steps.
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

fn default_log_every() -> u64 {
    100
}

impl ExperimentConfig {
    /// The CPU-sized profile: d_model 64, 2 layers, 2 heads, H 128,
    /// vocabulary 2,000, 2,000 steps, all four objectives and the three
    /// transformations of the main grid.
    pub fn desk(output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            output_dir: output_dir.into(),
            seeds: vec![0, 1, 2],
            tasks: vec![Task::Nli, Task::Ner, Task::Pos],
            transform: OneOrMany::Many(vec![TransformSpec::trans(), TransformSpec::trans_inv(), TransformSpec::trans_syn(0)]),
            objective: OneOrMany::Many(ObjectiveKind::ALL.iter().map(|&k| ObjectiveSpec::new(k)).collect()),
            encoder: EncoderConfig::desk(2000),
            train: TrainConfig {
                learning_rate: 1e-3,
                warmup_steps: 200,
                batch_size: 16,
                total_steps: 2000,
                decay_to_zero: false,
                weight_decay: 0.0,
            },
            masking: MaskingConfig::default(),
            finetune: FinetuneConfig::desk(Task::Ner),
            data: DataConfig {
                corpus: None,
                corpus_format: default_format(),
                parses: None,
                synthetic_sentences: default_sentences(),
                grammar_seed: 0,
                task_sizes: Sizes { train: 400, dev: 100, test: 200 },
                vocab_size: 2000,
                instance_len: 128,
            },
            log_every: default_log_every(),
        }
    }

    /// A seconds-long profile for smoke tests: one small layer, a few hundred
    /// sentences, 40 steps, NER only.
    pub fn tiny(output_dir: impl Into<PathBuf>) -> Self {
        let mut cfg = ExperimentConfig::desk(output_dir);
        cfg.seeds = vec![0];
        cfg.tasks = vec![Task::Ner];
        cfg.transform = OneOrMany::One(TransformSpec::trans_inv());
        cfg.encoder = EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_positions: 32,
            vocab_size: 400,
            n_languages: 0,
            dropout: 0.0,
        };
        cfg.train = TrainConfig {
            learning_rate: 3e-3,
            warmup_steps: 5,
            batch_size: 4,
            total_steps: 40,
            decay_to_zero: false,
            weight_decay: 0.0,
        };
        cfg.finetune = FinetuneConfig {
            epochs: 1,
            batch_size: 8,
            max_seq_len: 32,
            ..FinetuneConfig::desk(Task::Ner)
        };
        cfg.data.synthetic_sentences = 300;
        cfg.data.task_sizes = Sizes { train: 40, dev: 10, test: 20 };
        cfg.data.vocab_size = 400;
        cfg.data.instance_len = 32;
        cfg.log_every = 10;
        cfg
    }

    /// The full-scale architecture and schedule. Running it needs far more
    /// compute than a desk provides; it exists for reference and export.
    pub fn full(output_dir: impl Into<PathBuf>) -> Self {
        let mut cfg = ExperimentConfig::desk(output_dir);
        cfg.encoder = EncoderConfig::full(40_000);
        cfg.train = TrainConfig::full();
        cfg.finetune = FinetuneConfig::full(Task::Nli);
        cfg.data.vocab_size = 40_000;
        cfg.data.instance_len = 512;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.output_dir);
        if let Some(p) = cfg.data.corpus.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.data.parses.as_mut() {
            fix(p);
        }
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn transforms(&self) -> Vec<TransformSpec> {
        self.transform.to_vec()
    }

    pub fn objectives(&self) -> Vec<ObjectiveSpec> {
        self.objective.to_vec()
    }

    /// Encoder config with the vocabulary size the tokenizer actually has.
    pub fn encoder_for(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            ..self.encoder.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.transforms().is_empty() || self.objectives().is_empty() {
            return Err(Error::Config("at least one transform and one objective are required".into()));
        }
        for t in self.transforms() {
            t.validate()?;
        }
        for o in self.objectives() {
            o.validate()?;
        }
        let names: std::collections::BTreeSet<String> = self.transforms().iter().map(|t| t.to_string()).collect();
        let labels: std::collections::BTreeSet<String> = self.objectives().iter().map(super::pretrain::objective_label).collect();
        if names.len() != self.transforms().len() || labels.len() != self.objectives().len() {
            return Err(Error::Config("transforms and objectives must have distinct names; their outputs would collide".into()));
        }
        let mut enc = self.encoder.clone();
        enc.vocab_size = enc.vocab_size.max(1);
        enc.validate()?;
        self.train.validate()?;
        self.masking.validate()?;
        self.finetune.validate()?;
        if self.data.instance_len < 2 || self.data.instance_len % 2 != 0 {
            return Err(Error::Config(format!("instance_len {} must be even and at least 2", self.data.instance_len)));
        }
        if self.encoder.max_positions < self.data.instance_len {
            return Err(Error::Config(format!(
                "max_positions {} is below instance_len {}",
                self.encoder.max_positions, self.data.instance_len
            )));
        }
        if !matches!(self.data.corpus_format.as_str(), "plain" | "jsonl") {
            return Err(Error::Config(format!("corpus_format must be plain or jsonl, got {:?}", self.data.corpus_format)));
        }
        if self.data.corpus.is_none() && self.data.synthetic_sentences == 0 {
            return Err(Error::Config("synthetic_sentences must be positive without a corpus file".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }

    /// Referenced files must exist, and syntax steps over a file corpus
    /// need a parse file.
    pub fn check_files(&self) -> Result<()> {
        for p in [&self.data.corpus, &self.data.parses].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if self.data.corpus.is_some() && self.data.parses.is_none() && self.transforms().iter().any(TransformSpec::needs_parses) {
            return Err(Error::Config("a syntax transform over a corpus file needs `data.parses`".into()));
        }
        Ok(())
    }
}
