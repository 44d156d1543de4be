//! Run configuration: a TOML document whose every field can be overridden by
//! a command-line flag. Precedence is flag, then file, then built-in default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use seqdistill::corpus::{load_corpus, CorpusFormat, MarkovSpec, TokenCorpus};
use seqdistill::distill::DistillConfig;
use seqdistill::gradcheck::GradcheckConfig;
use seqdistill::metrics::StudentTraining;
use seqdistill::models::{Arch, ModelConfig};
use seqdistill::optim::AdamHyper;
use seqdistill::trajectory::PretrainConfig;
use seqdistill::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Relative output paths are resolved against this directory.
    pub out_dir: Option<PathBuf>,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub markov: MarkovSection,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
    pub student: StudentSection,
    pub gradcheck: GradcheckConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub path: Option<PathBuf>,
    /// Inferred from the extension when absent.
    pub format: Option<CorpusFormat>,
    pub vocab_size: Option<usize>,
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    pub embed_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: Arch::EmbedSoftmax,
            embed_dim: 8,
            max_seq_len: 8,
            dropout: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkovSection {
    pub seed: u64,
    pub vocab_size: usize,
    pub order: usize,
    pub n_sequences: usize,
    pub length: usize,
    pub concentration: f64,
}

impl Default for MarkovSection {
    fn default() -> Self {
        MarkovSection {
            seed: 0,
            vocab_size: 16,
            order: 1,
            n_sequences: 2500,
            length: 9,
            concentration: 0.3,
        }
    }
}

impl MarkovSection {
    pub fn spec(&self) -> MarkovSpec {
        MarkovSpec {
            seed: self.seed,
            vocab_size: self.vocab_size,
            order: self.order,
            n_sequences: self.n_sequences,
            length: self.length,
            concentration: self.concentration,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    /// Falls back to the model section.
    pub arch: Option<Arch>,
    pub embed_dim: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub select_every: usize,
    pub ks: Vec<usize>,
}

impl Default for StudentSection {
    fn default() -> Self {
        let t = StudentTraining::default();
        StudentSection {
            arch: None,
            embed_dim: None,
            max_seq_len: None,
            lr: t.hyper.lr,
            steps: t.steps,
            batch_size: t.batch_size,
            seed: t.seed,
            select_every: t.select_every,
            ks: vec![10, 100],
        }
    }
}

impl StudentSection {
    pub fn training(&self) -> StudentTraining {
        StudentTraining {
            hyper: AdamHyper::with_lr(self.lr),
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            select_every: self.select_every,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::from_file)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// `path` under `out_dir` unless it is absolute.
    pub fn output(&self, path: &Path) -> PathBuf {
        match &self.out_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn load_corpus(&self) -> Result<TokenCorpus> {
        let path = self
            .corpus
            .path
            .as_deref()
            .ok_or_else(|| Error::Config("no corpus given; pass --corpus or set corpus.path".into()))?;
        if !path.exists() {
            return Err(Error::Config(format!("corpus {} does not exist", path.display())));
        }
        let format = self.corpus.format.unwrap_or_else(|| CorpusFormat::from_path(path));
        load_corpus(path, format, self.corpus.vocab_size, self.corpus.split_seed)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size,
            embed_dim: m.embed_dim,
            arch: m.arch,
            max_seq_len: m.max_seq_len,
            dropout: m.dropout,
            seed: m.seed,
        }
    }

    pub fn student_config(&self, vocab_size: usize) -> ModelConfig {
        let s = &self.student;
        let mut cfg = self.model_config(vocab_size);
        cfg.arch = s.arch.unwrap_or(cfg.arch);
        cfg.embed_dim = s.embed_dim.unwrap_or(cfg.embed_dim);
        cfg.max_seq_len = s.max_seq_len.unwrap_or(cfg.max_seq_len);
        cfg
    }
}
