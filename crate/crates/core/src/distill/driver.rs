use std::str::FromStr;
use std::time::Instant;

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SyntheticDataset;
use crate::autodiff::{hvp_data, value_and_grad};
use crate::corpus::{batch_iter, BatchIter, Split, TokenCorpus};
use crate::error::{Error, Result};
use crate::memory;
use crate::metrics::{eval_student_on_synthetic, MetricReport, StudentTraining};
use crate::models::{hard_nll_value_grad, ModelConfig, SeqModel, SoftNll};
use crate::optim::{
    adam_reverse, adam_step, adam_unroll, sgd_reverse, sgd_step, sgd_unroll, AdamHyper,
    AdamState, BatchSchedule, CheckpointPolicy, ReverseOptions, ReverseResult, SgdHyper,
    SgdState,
};
use crate::rng::{mix, sub_rng};
use crate::tensor::{cosine, ParamVector, Tensor};
use crate::trajectory::TrajectoryStore;

/// Which outer objective drives the synthetic data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Meta-matching from pretrained checkpoints.
    Farzi,
    /// Meta-matching from fresh initializations.
    Mm,
    /// Per-step gradient matching.
    Dc,
    /// Parameter trajectory matching.
    Mtt,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "farzi" | "farzi_mm" => Ok(Objective::Farzi),
            "mm" => Ok(Objective::Mm),
            "dc" => Ok(Objective::Dc),
            "mtt" => Ok(Objective::Mtt),
            other => Err(Error::config(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerOptimizer {
    Adam,
    Sgd,
}

impl FromStr for InnerOptimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(InnerOptimizer::Adam),
            "sgd" => Ok(InnerOptimizer::Sgd),
            other => Err(Error::config(format!("unknown inner optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub objective: Objective,
    pub inner: InnerOptimizer,
    pub inner_steps: usize,
    pub outer_steps: usize,
    /// Real sequences per outer step.
    pub real_batch: usize,
    /// Synthetic rows per inner step.
    pub syn_batch: usize,
    pub outer_lr: f64,
    pub outer_weight_decay: f64,
    /// Rescale the outer gradient to at most this norm; 0 disables.
    pub outer_clip_norm: f64,
    pub adam: AdamHyper,
    pub sgd: SgdHyper,
    pub seed: u64,
    pub checkpoint: CheckpointPolicy,
    /// Stored checkpoints between the start and target of a matched segment.
    pub mtt_real_steps: usize,
    pub mtt_syn_steps: usize,
    pub n_rows: usize,
    pub seq_len: usize,
    pub latent_dim: usize,
    pub tau: f64,
    /// Evaluate a fresh student every this many outer steps; 0 disables.
    pub eval_every: usize,
    pub eval_training: StudentTraining,
    pub eval_ks: Vec<usize>,
    /// Record wall time and peak memory in the reports.
    pub record_timings: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            objective: Objective::Farzi,
            inner: InnerOptimizer::Adam,
            inner_steps: 50,
            outer_steps: 500,
            real_batch: 256,
            syn_batch: 8,
            outer_lr: 0.01,
            outer_weight_decay: 0.0,
            outer_clip_norm: 0.5,
            adam: AdamHyper::default(),
            sgd: SgdHyper::default(),
            seed: 0,
            checkpoint: CheckpointPolicy::default(),
            mtt_real_steps: 2,
            mtt_syn_steps: 10,
            n_rows: 8,
            seq_len: 8,
            latent_dim: 4,
            tau: 0.5,
            eval_every: 0,
            eval_training: StudentTraining::default(),
            eval_ks: vec![10, 100],
            record_timings: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.inner_steps == 0 && self.objective != Objective::Mtt {
            return Err(Error::config("inner_steps must be >= 1"));
        }
        if self.real_batch == 0 || self.syn_batch == 0 {
            return Err(Error::config("batch sizes must be >= 1"));
        }
        if self.syn_batch > self.n_rows {
            return Err(Error::config(format!(
                "syn_batch {} exceeds the {} synthetic rows",
                self.syn_batch, self.n_rows
            )));
        }
        if self.n_rows == 0 || self.latent_dim == 0 {
            return Err(Error::config("synthetic rows and latent dim must be >= 1"));
        }
        if self.seq_len < 2 || self.seq_len > model.max_seq_len + 1 {
            return Err(Error::config(format!(
                "synthetic length {} must lie in [2, {}]",
                self.seq_len,
                model.max_seq_len + 1
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau must be positive"));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite())
            || self.outer_weight_decay < 0.0
            || !(self.outer_clip_norm >= 0.0)
        {
            return Err(Error::config(
                "outer lr must be positive, weight decay and clip norm non-negative",
            ));
        }
        self.adam.validate()?;
        self.sgd.validate()?;
        model.validate()
    }

    fn outer_hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.outer_lr,
            ..AdamHyper::default()
        }
    }
}

/// One line of the report stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaStepReport {
    pub step: usize,
    pub meta_loss: f64,
    pub latent_grad_norm: f64,
    pub decoder_grad_norm: f64,
    /// Inner training loss at the last inner step, if any ran.
    pub inner_final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub drift_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub peak_bytes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<MetricReport>,
}

struct MetaGradient {
    meta_loss: f64,
    dx: Tensor,
    inner_final_loss: Option<f64>,
    drift_max: Option<f64>,
}

/// Stateful outer loop over one synthetic dataset.
pub struct Distiller<'a> {
    config: DistillConfig,
    model: SeqModel,
    corpus: &'a TokenCorpus,
    omega: Option<&'a TrajectoryStore>,
    real: BatchIter<'a>,
    syn: SyntheticDataset,
    outer: AdamState,
    step: usize,
}

impl<'a> Distiller<'a> {
    pub fn new(
        config: DistillConfig,
        model_config: ModelConfig,
        corpus: &'a TokenCorpus,
        omega: Option<&'a TrajectoryStore>,
    ) -> Result<Self> {
        config.validate(&model_config)?;
        let omega = omega.filter(|s| !s.is_empty());
        if let Some(store) = omega {
            store.ensure_conformal(&model_config)?;
        }
        if corpus.vocab_size != model_config.vocab_size {
            return Err(Error::Conformality(format!(
                "corpus vocabulary {} does not match model vocabulary {}",
                corpus.vocab_size, model_config.vocab_size
            )));
        }
        match (config.objective, omega) {
            (Objective::Farzi | Objective::Mtt, None) => {
                return Err(Error::config(format!(
                    "{:?} needs at least one pretrained trajectory",
                    config.objective
                )))
            }
            (Objective::Mtt, Some(store))
                if !store
                    .trajectories
                    .iter()
                    .any(|t| t.checkpoints.len() > config.mtt_real_steps)
                => {
                    return Err(Error::config(format!(
                        "no trajectory has more than {} checkpoints",
                        config.mtt_real_steps
                    )));
                }
            _ => {}
        }
        let model = SeqModel::new(model_config.clone())?;
        let embeddings = omega.and_then(|s| {
            let t = s.trajectories.first()?;
            t.checkpoints.last()?.get("embed")
        });
        let syn = SyntheticDataset::init(
            config.n_rows,
            config.seq_len,
            config.latent_dim,
            model_config.vocab_size,
            config.tau,
            mix(config.seed, 0),
            embeddings.as_ref(),
        )?;
        let real = batch_iter(
            corpus,
            Split::Train,
            config.real_batch,
            model_config.max_seq_len + 1,
            mix(config.seed, 3),
        )?;
        let outer = AdamState::new(syn.to_params());
        Ok(Distiller {
            config,
            model,
            corpus,
            omega,
            real,
            syn,
            outer,
            step: 0,
        })
    }

    pub fn syn(&self) -> &SyntheticDataset {
        &self.syn
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn model(&self) -> &SeqModel {
        &self.model
    }

    /// Runs one outer step and returns its report.
    pub fn step(&mut self) -> Result<MetaStepReport> {
        let started = Instant::now();
        if self.config.record_timings {
            memory::reset_peak();
        }
        let k = self.step;
        let seed_k = mix(mix(self.config.seed, 4), k as u64);
        let data = self.syn.materialize_all()?;
        let schedule = BatchSchedule::new(self.syn.n_rows(), self.config.syn_batch, mix(seed_k, 2))?;
        let g = match self.config.objective {
            Objective::Farzi | Objective::Mm => {
                let w0 = self.initial_params(seed_k);
                self.meta_match(&w0, &data, &schedule)?
            }
            Objective::Dc => {
                let w0 = self.model.init_params_with_seed(mix(seed_k, 1));
                self.gradient_match(&w0, &data, &schedule)?
            }
            Objective::Mtt => self.trajectory_match(seed_k, &data, &schedule)?,
        };
        let (dl, dm) = self.syn.backprop(&g.dx)?;
        let (latent_grad_norm, decoder_grad_norm) = (norm(dl.data()), norm(dm.data()));
        let mut flat = dl.into_data();
        flat.extend_from_slice(dm.data());
        let mut grad = ParamVector::unflatten(self.syn.param_layout(), flat)?;
        if self.config.outer_weight_decay > 0.0 {
            grad.axpy(self.config.outer_weight_decay, &self.outer.w);
        }
        grad.ensure_finite("outer meta-gradient").map_err(|e| Error::NumericFailure {
            step: k,
            message: e.to_string(),
        })?;
        let gn = grad.norm();
        if self.config.outer_clip_norm > 0.0 && gn > self.config.outer_clip_norm {
            debug!("outer step {k}: clipping gradient norm {gn:.3e}");
            grad.scale(self.config.outer_clip_norm / gn);
        }
        self.outer = adam_step(&self.outer, &grad, &self.config.outer_hyper())?;
        self.syn = self.syn.with_params(&self.outer.w)?;
        self.step += 1;
        let eval = if self.config.eval_every > 0 && self.step.is_multiple_of(self.config.eval_every) {
            Some(self.evaluate()?)
        } else {
            None
        };
        let (wall_ms, peak_bytes) = if self.config.record_timings {
            (Some(started.elapsed().as_secs_f64() * 1e3), Some(memory::peak()))
        } else {
            (None, None)
        };
        debug!("outer step {k}: meta loss {:.6}", g.meta_loss);
        Ok(MetaStepReport {
            step: k,
            meta_loss: g.meta_loss,
            latent_grad_norm,
            decoder_grad_norm,
            inner_final_loss: g.inner_final_loss,
            drift_max: g.drift_max,
            wall_ms,
            peak_bytes,
            eval,
        })
    }

    /// Trains a fresh student on the current synthetic data and scores it on the test split.
    pub fn evaluate(&self) -> Result<MetricReport> {
        let ks: Vec<usize> = self
            .config
            .eval_ks
            .iter()
            .copied()
            .filter(|&k| k <= self.model.vocab())
            .collect();
        eval_student_on_synthetic(
            &self.syn,
            self.model.config(),
            &self.config.eval_training,
            self.corpus,
            &ks,
        )
    }

    fn initial_params(&self, seed_k: u64) -> ParamVector {
        match (self.config.objective, self.omega) {
            (Objective::Farzi, Some(store)) => {
                let mut r = sub_rng(seed_k, 0);
                let traj = &store.trajectories[r.random_range(0..store.len())];
                traj.checkpoints[r.random_range(0..traj.checkpoints.len())].clone()
            }
            _ => self.model.init_params_with_seed(mix(seed_k, 1)),
        }
    }

    /// Meta-loss and its gradient with respect to the final inner parameters.
    fn real_loss(&self, w: &ParamVector) -> Result<(f64, ParamVector)> {
        let batch = self.real.batch_at(self.step as u64);
        hard_nll_value_grad(&self.model, w, &batch, None)
    }

    fn inner_reverse<F>(
        &self,
        w0: &ParamVector,
        data: &Tensor,
        steps: usize,
        schedule: &BatchSchedule,
        outer: F,
    ) -> Result<MetaGradient>
    where
        F: FnOnce(&ParamVector) -> Result<(f64, ParamVector)>,
    {
        let loss = SoftNll::new(&self.model);
        match self.config.inner {
            InnerOptimizer::Adam => {
                let init = AdamState::new(w0.clone());
                let h = &self.config.adam;
                let run = adam_unroll(&init, &loss, data, steps, h, self.config.checkpoint, schedule)?;
                let (meta_loss, dl) = outer(&run.state.w)?;
                let (res, drift) = adam_reverse(
                    &run.state,
                    &dl,
                    &loss,
                    data,
                    steps,
                    h,
                    &run.checkpoints,
                    schedule,
                    &ReverseOptions::default(),
                )?;
                Ok(MetaGradient {
                    meta_loss,
                    dx: res.dx,
                    inner_final_loss: run.losses.last().copied(),
                    drift_max: (!drift.entries.is_empty()).then(|| drift.max()),
                })
            }
            InnerOptimizer::Sgd => {
                let init = SgdState::new(w0.clone());
                let h = &self.config.sgd;
                let run = sgd_unroll(&init, &loss, data, steps, h, self.config.checkpoint, schedule)?;
                let (meta_loss, dl) = outer(&run.state.w)?;
                let ReverseResult { dx, .. } = sgd_reverse(&run, &dl, &loss, data, steps, h, schedule)?;
                Ok(MetaGradient {
                    meta_loss,
                    dx,
                    inner_final_loss: run.losses.last().copied(),
                    drift_max: None,
                })
            }
        }
    }

    fn meta_match(&self, w0: &ParamVector, data: &Tensor, schedule: &BatchSchedule) -> Result<MetaGradient> {
        self.inner_reverse(w0, data, self.config.inner_steps, schedule, |w| self.real_loss(w))
    }

    /// Sum over inner steps of the segment-wise `1 − cos` distance between real
    /// and synthetic gradients. The inner parameters are not differentiated
    /// through: each step contributes only its direct dependence on the data.
    fn gradient_match(&self, w0: &ParamVector, data: &Tensor, schedule: &BatchSchedule) -> Result<MetaGradient> {
        let loss = SoftNll::new(&self.model);
        let real = self.real.batch_at(self.step as u64);
        let mut adam = AdamState::new(w0.clone());
        let mut sgd = SgdState::new(w0.clone());
        let mut dx = Tensor::zeros(data.shape());
        let mut distance = 0.0;
        let mut last = None;
        for t in 1..=self.config.inner_steps {
            let w = match self.config.inner {
                InnerOptimizer::Adam => &adam.w,
                InnerOptimizer::Sgd => &sgd.w,
            };
            let rows = schedule.rows(t);
            let (_, g_real) = hard_nll_value_grad(&self.model, w, &real, None)?;
            let (value, g_syn) = value_and_grad(&loss, w, data, &rows)?;
            let (d, dd) = segment_cosine_distance(&g_real, &g_syn);
            distance += d;
            let hx = hvp_data(&loss, w, data, &rows, &dd)?;
            for (o, h) in dx.data_mut().iter_mut().zip(hx.data()) {
                *o += h;
            }
            last = Some(value);
            match self.config.inner {
                InnerOptimizer::Adam => adam = adam_step(&adam, &g_syn, &self.config.adam)?,
                InnerOptimizer::Sgd => sgd = sgd_step(&sgd, &g_syn, &self.config.sgd)?,
            }
        }
        Ok(MetaGradient {
            meta_loss: distance,
            dx,
            inner_final_loss: last,
            drift_max: None,
        })
    }

    fn trajectory_match(&self, seed_k: u64, data: &Tensor, schedule: &BatchSchedule) -> Result<MetaGradient> {
        let store = self.omega.ok_or_else(|| Error::config("trajectory matching needs trajectories"))?;
        let m = self.config.mtt_real_steps;
        let eligible: Vec<_> = store
            .trajectories
            .iter()
            .filter(|t| t.checkpoints.len() > m)
            .collect();
        let mut r = sub_rng(seed_k, 0);
        let traj = eligible[r.random_range(0..eligible.len())];
        let start = r.random_range(0..traj.checkpoints.len() - m);
        let (from, target) = (&traj.checkpoints[start], &traj.checkpoints[start + m]);
        let outer = |w: &ParamVector| {
            matching_loss(w, from, target).map_err(|e| match e {
                Error::DegenerateTrajectory(msg) => Error::DegenerateTrajectory(format!(
                    "checkpoints {start} and {} of trajectory seed {}: {msg}",
                    start + m,
                    traj.seed
                )),
                other => other,
            })
        };
        if self.config.mtt_syn_steps == 0 {
            let (meta_loss, _) = outer(from)?;
            return Ok(MetaGradient {
                meta_loss,
                dx: Tensor::zeros(data.shape()),
                inner_final_loss: None,
                drift_max: None,
            });
        }
        self.inner_reverse(from, data, self.config.mtt_syn_steps, schedule, outer)
    }
}

/// `‖w − target‖² / ‖target − from‖²` and its gradient in `w`.
pub fn matching_loss(
    w: &ParamVector,
    from: &ParamVector,
    target: &ParamVector,
) -> Result<(f64, ParamVector)> {
    let span = target.sub(from).norm().powi(2);
    if span < 1e-12 {
        return Err(Error::DegenerateTrajectory(format!(
            "matched segment has squared length {span:.3e}"
        )));
    }
    let diff = w.sub(target);
    Ok((diff.norm().powi(2) / span, diff.scaled(2.0 / span)))
}

fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `Σ_s (1 − cos(a_s, b_s))` over parameter segments and its gradient in `b`.
/// Segments where either side is zero contribute nothing.
pub fn segment_cosine_distance(a: &ParamVector, b: &ParamVector) -> (f64, ParamVector) {
    let mut grad = b.zeros_like();
    let mut total = 0.0;
    for i in 0..a.layout().n_segments() {
        let (sa, sb) = (a.segment(i), b.segment(i));
        let (na, nb) = (norm(sa), norm(sb));
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        let c = cosine(sa, sb);
        total += 1.0 - c;
        for ((o, &x), &y) in grad.segment_mut(i).iter_mut().zip(sa).zip(sb) {
            *o = -(x / (na * nb) - c * y / (nb * nb));
        }
    }
    (total, grad)
}

/// Runs every outer step and returns the final synthetic data with the report series.
pub fn distill(
    config: DistillConfig,
    model_config: ModelConfig,
    corpus: &TokenCorpus,
    omega: Option<&TrajectoryStore>,
) -> Result<(SyntheticDataset, Vec<MetaStepReport>)> {
    let n = config.outer_steps;
    let mut d = Distiller::new(config, model_config, corpus, omega)?;
    let mut reports = Vec::with_capacity(n);
    for _ in 0..n {
        reports.push(d.step()?);
    }
    if let Some(last) = reports.last() {
        info!("distillation finished: meta loss {:.6}", last.meta_loss);
    }
    Ok((d.syn, reports))
}
