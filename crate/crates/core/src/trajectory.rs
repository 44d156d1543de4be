//! Pretraining trajectories on real data and their on-disk format.
//!
//! Layout: 8-byte magic `FARZITRJ`, `u32` version, `u64` header length, a JSON
//! header, then for each trajectory its per-checkpoint losses followed by its
//! checkpoints, all little-endian `f64` in the model's segment order.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{batch_iter, Split, TokenCorpus};
use crate::error::{Error, Result};
use crate::models::{HardBatch, ModelConfig, SeqModel};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::par::Parallelism;
use crate::rng::mix;
use crate::tensor::ParamVector;

pub const TRAJECTORY_MAGIC: &[u8; 8] = b"FARZITRJ";
pub const TRAJECTORY_VERSION: u32 = 1;

/// Training sequences used to score each checkpoint.
const PROBE_ROWS: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub model_config: ModelConfig,
    pub checkpoints: Vec<ParamVector>,
    /// Optimizer step of each checkpoint, strictly increasing from 0.
    pub steps: Vec<usize>,
    /// Training loss at each checkpoint on a fixed probe batch.
    pub train_losses: Vec<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStore {
    pub trajectories: Vec<Trajectory>,
    pub corpus_fingerprint: u64,
}

impl TrajectoryStore {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn model_config(&self) -> Option<&ModelConfig> {
        self.trajectories.first().map(|t| &t.model_config)
    }

    /// Keeps the first `n` trajectories.
    pub fn truncated(&self, n: usize) -> TrajectoryStore {
        TrajectoryStore {
            trajectories: self.trajectories.iter().take(n).cloned().collect(),
            corpus_fingerprint: self.corpus_fingerprint,
        }
    }

    pub fn ensure_conformal(&self, config: &ModelConfig) -> Result<()> {
        match self.model_config() {
            Some(c) if !c.conformal(config) => Err(Error::Conformality(format!(
                "trajectories were trained with {:?} V={} d={} L={}, but {:?} V={} d={} L={} was requested",
                c.arch, c.vocab_size, c.embed_dim, c.max_seq_len,
                config.arch, config.vocab_size, config.embed_dim, config.max_seq_len
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub n_runs: usize,
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub batch_size: usize,
    pub hyper: AdamHyper,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            n_runs: 20,
            epochs: 5,
            checkpoint_every: 10,
            batch_size: 64,
            hyper: AdamHyper::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn steps_per_epoch(&self, corpus: &TokenCorpus) -> usize {
        corpus.splits.train.len().div_ceil(self.batch_size).max(1)
    }
}

fn probe_batch(corpus: &TokenCorpus, max_len: usize) -> HardBatch {
    let seqs: Vec<&[u32]> = corpus.split(Split::Train).take(PROBE_ROWS).collect();
    let len = seqs.iter().map(|s| s.len()).max().unwrap_or(2).min(max_len);
    HardBatch::from_sequences(&seqs, len)
}

fn run_one(
    corpus: &TokenCorpus,
    model: &SeqModel,
    cfg: &PretrainConfig,
    run: usize,
    probe: &HardBatch,
) -> Result<Trajectory> {
    let seed = mix(cfg.seed, run as u64);
    let total = cfg.epochs * cfg.steps_per_epoch(corpus);
    let max_len = model.config().max_seq_len + 1;
    let mut batches = batch_iter(corpus, Split::Train, cfg.batch_size, max_len, mix(seed, 1))?;
    let mut state = AdamState::new(model.init_params_with_seed(seed));
    let mut traj = Trajectory {
        model_config: model.config().clone(),
        checkpoints: Vec::new(),
        steps: Vec::new(),
        train_losses: Vec::new(),
        seed,
    };
    let fail = |step: usize, e: Error| Error::NumericFailure {
        step,
        message: format!("pretraining run {run}: {e}"),
    };
    for step in 0..=total {
        if step % cfg.checkpoint_every == 0 || step == total {
            let loss = model.hard_nll(&state.w, probe).map_err(|e| fail(step, e))?;
            traj.checkpoints.push(state.w.clone());
            traj.steps.push(step);
            traj.train_losses.push(loss);
        }
        if step == total {
            break;
        }
        let batch = batches.next().expect("endless stream");
        let grad = crate::models::hard_nll_grad(model, &state.w, &batch, Some(mix(seed, 2 + step as u64)))
            .map_err(|e| fail(step, e))?;
        state = adam_step(&state, &grad, &cfg.hyper).map_err(|e| fail(step, e))?;
    }
    Ok(traj)
}

/// Independent seeded training runs on the train split, snapshotting every
/// `checkpoint_every` steps. Runs that hit non-finite values are dropped with a
/// warning; the call fails only if every run fails.
pub fn pretrain_trajectories(
    corpus: &TokenCorpus,
    model_config: &ModelConfig,
    cfg: &PretrainConfig,
    par: Parallelism,
) -> Result<TrajectoryStore> {
    if cfg.n_runs == 0 || cfg.checkpoint_every == 0 || cfg.batch_size == 0 {
        return Err(Error::config("pretraining needs runs, a checkpoint interval and a batch size"));
    }
    if model_config.vocab_size != corpus.vocab_size {
        return Err(Error::Conformality(format!(
            "model vocabulary {} does not match corpus vocabulary {}",
            model_config.vocab_size, corpus.vocab_size
        )));
    }
    cfg.hyper.validate()?;
    let model = SeqModel::new(model_config.clone())?;
    let probe = probe_batch(corpus, model_config.max_seq_len + 1);
    let runs = par.map_range(cfg.n_runs, |r| run_one(corpus, &model, cfg, r, &probe));
    let mut trajectories = Vec::with_capacity(runs.len());
    let mut last_err = None;
    for r in runs {
        match r {
            Ok(t) => trajectories.push(t),
            Err(e) => {
                warn!("{e}");
                last_err = Some(e);
            }
        }
    }
    if trajectories.is_empty() {
        return Err(last_err.unwrap_or_else(|| Error::Empty("no trajectories".into())));
    }
    Ok(TrajectoryStore {
        trajectories,
        corpus_fingerprint: corpus.fingerprint(),
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    corpus_fingerprint: u64,
    param_count: usize,
    trajectories: Vec<TrajectoryHeader>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryHeader {
    seed: u64,
    steps: Vec<usize>,
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_store(store: &TrajectoryStore, path: &Path) -> Result<()> {
    let config = store
        .model_config()
        .ok_or_else(|| Error::Empty("trajectory store is empty".into()))?;
    if store.trajectories.iter().any(|t| &t.model_config != config) {
        return Err(Error::Conformality("trajectories disagree on model config".into()));
    }
    let header = Header {
        model_config: config.clone(),
        corpus_fingerprint: store.corpus_fingerprint,
        param_count: store.trajectories[0].checkpoints[0].len(),
        trajectories: store
            .trajectories
            .iter()
            .map(|t| TrajectoryHeader {
                seed: t.seed,
                steps: t.steps.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(TRAJECTORY_MAGIC)?;
    w.write_all(&TRAJECTORY_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in &store.trajectories {
        write_f64s(&mut w, &t.train_losses)?;
        for c in &t.checkpoints {
            write_f64s(&mut w, c.as_slice())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Byte cursor that reports truncation with context.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got = self.take(8, "magic")?;
        if let Some(i) = got.iter().zip(expected).position(|(a, b)| a != b) {
            return Err(Error::Format {
                offset: i as u64,
                message: format!(
                    "bad magic byte 0x{:02x}, expected {:?}",
                    got[i],
                    std::str::from_utf8(expected).unwrap_or("?")
                ),
            });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Truncated(what.into()))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Reads a store. A fingerprint that differs from `expected_fingerprint` is
/// logged, not rejected.
pub fn load_store(path: &Path, expected_fingerprint: Option<u64>) -> Result<TrajectoryStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader::new(&bytes);
    r.magic(TRAJECTORY_MAGIC)?;
    let version = r.u32("version")?;
    if version != TRAJECTORY_VERSION {
        return Err(Error::Version {
            found: version,
            expected: TRAJECTORY_VERSION,
        });
    }
    let hlen = r.u64("header length")? as usize;
    let header_offset = r.pos as u64;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| Error::Format {
        offset: header_offset,
        message: format!("invalid header: {e}"),
    })?;
    let model = SeqModel::new(header.model_config.clone())?;
    if model.layout().len() != header.param_count {
        return Err(Error::Format {
            offset: header_offset,
            message: format!(
                "header declares {} parameters but the model has {}",
                header.param_count,
                model.layout().len()
            ),
        });
    }
    let mut trajectories = Vec::with_capacity(header.trajectories.len());
    for (i, th) in header.trajectories.into_iter().enumerate() {
        let n = th.steps.len();
        if n < 2 || th.steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format {
                offset: header_offset,
                message: format!("trajectory {i} needs >= 2 strictly increasing checkpoints"),
            });
        }
        let train_losses = r.f64s(n, "losses")?;
        let checkpoints = (0..n)
            .map(|_| {
                let flat = r.f64s(header.param_count, "checkpoint")?;
                ParamVector::unflatten(model.layout().clone(), flat)
            })
            .collect::<Result<Vec<_>>>()?;
        trajectories.push(Trajectory {
            model_config: header.model_config.clone(),
            checkpoints,
            steps: th.steps,
            train_losses,
            seed: th.seed,
        });
    }
    r.finish()?;
    if let Some(fp) = expected_fingerprint {
        if fp != header.corpus_fingerprint {
            warn!(
                "trajectory store fingerprint {:016x} does not match corpus {:016x}",
                header.corpus_fingerprint, fp
            );
        }
    }
    Ok(TrajectoryStore {
        trajectories,
        corpus_fingerprint: header.corpus_fingerprint,
    })
}
