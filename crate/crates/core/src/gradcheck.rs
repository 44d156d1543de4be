//! Oracle battery for the reverse Adam pass.
//!
//! Every check compares [`adam_reverse`] against an independent reference on
//! small random sequence-model instances and reports its worst discrepancy.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::value_and_grad;
use crate::error::{Error, Result};
use crate::memory;
use crate::models::{Arch, HardBatch, HardNll, ModelConfig, SeqModel, SoftNll};
use crate::optim::{
    adam_reverse, adam_unroll, AdamHyper, AdamState, BatchSchedule, CheckpointPolicy,
    ReverseOptions, ReverseResult,
};
use crate::oracle::{central_differences, exact_adam_meta_gradient};
use crate::par::Parallelism;
use crate::rng::mix;
use crate::tensor::{cosine, relative_error, ParamVector, Tensor};
use crate::toy::{random_params, random_soft_data, LinearRegression};

const VOCAB: usize = 6;
const WIDTH: usize = 4;
const MAX_LEN: usize = 8;
const ROWS: usize = 4;
const LEN: usize = 6;

/// Per-instance minimum cosine when the moments start warm.
pub const WARM_MIN_COSINE: f64 = 0.98;

/// Mean cosine over instances when the moments start at zero, by unroll length.
pub fn fresh_mean_cosine(steps: usize) -> f64 {
    match steps {
        0..=2 => 0.65,
        3..=5 => 0.77,
        _ => 0.80,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Longest unroll checked against the exact oracle; 1 runs only finite differences.
    pub steps: usize,
    pub tol: f64,
    pub instances: usize,
    pub seed: u64,
    pub fd_step: f64,
    pub drift_steps: usize,
    pub drift_interval: usize,
    pub drift_tol: f64,
    pub memory_short: usize,
    pub memory_long: usize,
    pub memory_ratio: f64,
    #[doc(hidden)]
    #[serde(skip)]
    pub flip_moment_adjoint: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            steps: 10,
            tol: 1e-4,
            instances: 20,
            seed: 1000,
            fd_step: 1e-5,
            drift_steps: 100,
            drift_interval: 25,
            drift_tol: 1e-6,
            memory_short: 20,
            memory_long: 200,
            memory_ratio: 1.5,
            flip_moment_adjoint: false,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.instances == 0 {
            return Err(Error::config("gradcheck needs at least one step and one instance"));
        }
        if !(self.tol > 0.0 && self.fd_step > 0.0 && self.drift_tol > 0.0) {
            return Err(Error::config("gradcheck tolerances must be positive"));
        }
        if self.drift_interval == 0 || self.memory_short == 0 || self.memory_long <= self.memory_short {
            return Err(Error::config("memory probe needs 0 < short < long and a positive interval"));
        }
        Ok(())
    }

    fn reverse_options(&self) -> ReverseOptions {
        ReverseOptions {
            flip_moment_adjoint: self.flip_moment_adjoint,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// A random sequence-model instance: model, starting state, synthetic data and
/// the real batch scored by the outer objective.
pub struct Instance {
    pub model: SeqModel,
    pub init: AdamState,
    pub data: Tensor,
    pub real: HardBatch,
    pub schedule: BatchSchedule,
}

impl Instance {
    /// Architectures rotate with the seed. Warm instances carry random moments.
    pub fn random(seed: u64, warm: bool) -> Result<Self> {
        let arch = match seed % 3 {
            0 => Arch::EmbedSoftmax,
            1 => Arch::CausalAttention1L,
            _ => Arch::RecurrentGate,
        };
        Self::with_arch(seed, arch, warm)
    }

    pub fn with_arch(seed: u64, arch: Arch, warm: bool) -> Result<Self> {
        let model = SeqModel::new(ModelConfig::new(arch, VOCAB, WIDTH, MAX_LEN).with_seed(seed))?;
        let mut w = model.init_params();
        w.axpy(1.0, &random_params(&w, 0.3, mix(seed, 1)));
        let mut init = AdamState::new(w.clone());
        if warm {
            init.m = random_params(&w, 0.05, mix(seed, 2));
            init.v = random_params(&w, 0.01, mix(seed, 3)).map(|x| x.abs() + 1e-4);
        }
        let data = random_soft_data(ROWS, LEN, VOCAB, 1.0, mix(seed, 4));
        let seqs: Vec<Vec<u32>> = (0..ROWS)
            .map(|i| {
                (0..LEN)
                    .map(|j| ((i * 7 + j * 3 + seed as usize) % VOCAB) as u32)
                    .collect()
            })
            .collect();
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        let real = HardBatch::from_sequences(&refs, LEN);
        let schedule = BatchSchedule::new(ROWS, 2, mix(seed, 5))?;
        Ok(Instance {
            model,
            init,
            data,
            real,
            schedule,
        })
    }

    pub fn hyper() -> AdamHyper {
        AdamHyper::with_lr(0.01)
    }

    pub fn n_params(&self) -> usize {
        self.init.w.len()
    }

    /// Outer loss: hard next-token NLL of the real batch at `w`.
    pub fn meta(&self, w: &ParamVector) -> Result<(f64, ParamVector)> {
        value_and_grad(&HardNll::new(&self.model), w, &Tensor::zeros(&[0]), &self.real)
    }

    fn unrolled_meta(&self, init: &AdamState, data: &Tensor, steps: usize) -> Result<f64> {
        let loss = SoftNll::new(&self.model);
        let u = adam_unroll(
            init,
            &loss,
            data,
            steps,
            &Self::hyper(),
            CheckpointPolicy::NONE,
            &self.schedule,
        )?;
        Ok(self.meta(&u.state.w)?.0)
    }

    /// Meta-gradients from the reverse pass over `steps` updates.
    pub fn reverse(&self, steps: usize, opts: &ReverseOptions) -> Result<ReverseResult> {
        let loss = SoftNll::new(&self.model);
        let h = Self::hyper();
        let u = adam_unroll(
            &self.init,
            &loss,
            &self.data,
            steps,
            &h,
            CheckpointPolicy::NONE,
            &self.schedule,
        )?;
        let (_, dl) = self.meta(&u.state.w)?;
        let (r, _) = adam_reverse(&u.state, &dl, &loss, &self.data, steps, &h, &[], &self.schedule, opts)?;
        Ok(r)
    }

    /// Central differences of the unrolled outer loss in `(w0, m0, x)`.
    pub fn finite_differences(
        &self,
        steps: usize,
        h: f64,
        par: Parallelism,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let w0 = self.init.w.as_slice().to_vec();
        let dw = central_differences(
            |x| {
                let mut s = self.init.clone();
                s.w.as_mut_slice().copy_from_slice(x);
                self.unrolled_meta(&s, &self.data, steps)
            },
            &w0,
            h,
            par,
        )?;
        let m0 = self.init.m.as_slice().to_vec();
        let dm = central_differences(
            |x| {
                let mut s = self.init.clone();
                s.m.as_mut_slice().copy_from_slice(x);
                self.unrolled_meta(&s, &self.data, steps)
            },
            &m0,
            h,
            par,
        )?;
        let dx = central_differences(
            |x| {
                let d = Tensor::new(self.data.shape().to_vec(), x.to_vec())?;
                self.unrolled_meta(&self.init, &d, steps)
            },
            self.data.data(),
            h,
            par,
        )?;
        Ok((dw, dm, dx))
    }
}

/// Worst relative error of `(dw0, dm0, dx)` against central differences at T=1.
pub fn check_finite_differences(cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut worst_seed = cfg.seed;
    for i in 0..cfg.instances {
        let seed = cfg.seed + i as u64;
        let inst = Instance::random(seed, true)?;
        let r = inst.reverse(1, &cfg.reverse_options())?;
        let (dw, dm, dx) = inst.finite_differences(1, cfg.fd_step, Parallelism::Rayon)?;
        let e = relative_error(r.dw0.as_slice(), &dw, 1e-12)
            .max(relative_error(r.dm0.as_slice(), &dm, 1e-12))
            .max(relative_error(r.dx.data(), &dx, 1e-12));
        if !(e <= worst) {
            worst = e;
            worst_seed = seed;
        }
    }
    Ok(CheckResult {
        name: "finite differences, T=1".into(),
        passed: worst <= cfg.tol,
        worst,
        threshold: cfg.tol,
        detail: format!("max relative error over {} instances at seed {worst_seed}", cfg.instances),
    })
}

/// Cosine between the reverse-pass `dx` and the exact unrolled meta-gradient.
///
/// Returns per-instance cosines for warm and fresh moments.
pub fn oracle_cosines(steps: usize, instances: usize, seed: u64, opts: &ReverseOptions) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = Instance::hyper();
    let mut out = (Vec::with_capacity(instances), Vec::with_capacity(instances));
    for warm in [true, false] {
        for i in 0..instances {
            let inst = Instance::random(seed + i as u64, warm)?;
            let loss = SoftNll::new(&inst.model);
            let exact = exact_adam_meta_gradient(&inst.init, &loss, &inst.data, steps, &h, &inst.schedule, |w| {
                inst.meta(w)
            })?;
            let r = inst.reverse(steps, opts)?;
            let c = cosine(r.dx.data(), exact.dx.data());
            if warm {
                out.0.push(c);
            } else {
                out.1.push(c);
            }
        }
    }
    Ok(out)
}

pub fn check_oracle_cosine(cfg: &GradcheckConfig, steps: usize) -> Result<Vec<CheckResult>> {
    let (warm, fresh) = oracle_cosines(steps, cfg.instances, cfg.seed, &cfg.reverse_options())?;
    let min = warm.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = fresh.iter().sum::<f64>() / fresh.len() as f64;
    let fresh_floor = fresh_mean_cosine(steps);
    Ok(vec![
        CheckResult {
            name: format!("oracle cosine, warm moments, T={steps}"),
            passed: min >= WARM_MIN_COSINE,
            worst: min,
            threshold: WARM_MIN_COSINE,
            detail: "minimum over instances".into(),
        },
        CheckResult {
            name: format!("oracle cosine, zero moments, T={steps}"),
            passed: mean >= fresh_floor,
            worst: mean,
            threshold: fresh_floor,
            detail: "mean over instances".into(),
        },
    ])
}

/// Drift of the reconstructed trajectory, with and without snapshot replacement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReversalFidelity {
    /// Max-abs drift at each snapshot when reversing with replacement.
    pub checkpointed: Vec<(usize, f64)>,
    /// Max-abs drift at each snapshot when never correcting.
    pub uncorrected: Vec<(usize, f64)>,
}

pub fn reversal_fidelity(steps: usize, interval: usize, seed: u64) -> Result<ReversalFidelity> {
    let inst = Instance::with_arch(seed, Arch::CausalAttention1L, false)?;
    let loss = SoftNll::new(&inst.model);
    let h = AdamHyper {
        beta2: 0.999,
        ..Instance::hyper()
    };
    let u = adam_unroll(
        &inst.init,
        &loss,
        &inst.data,
        steps,
        &h,
        CheckpointPolicy::every(interval),
        &inst.schedule,
    )?;
    let (_, dl) = inst.meta(&u.state.w)?;
    let run = |opts: ReverseOptions| -> Result<Vec<(usize, f64)>> {
        let (_, report) = adam_reverse(&u.state, &dl, &loss, &inst.data, steps, &h, &u.checkpoints, &inst.schedule, &opts)?;
        Ok(report.entries.iter().map(|e| (e.step, e.max())).collect())
    };
    let checkpointed = run(ReverseOptions {
        warn_tol: f64::INFINITY,
        ..Default::default()
    })?;
    let uncorrected = run(ReverseOptions::observe())?;
    Ok(ReversalFidelity {
        checkpointed,
        uncorrected,
    })
}

pub fn check_reversal(cfg: &GradcheckConfig) -> Result<CheckResult> {
    let f = reversal_fidelity(cfg.drift_steps, cfg.drift_interval, cfg.seed)?;
    let worst = f.checkpointed.iter().map(|e| e.1).fold(0.0, f64::max);
    let free = f.uncorrected.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(CheckResult {
        name: format!("reversal fidelity, {} steps every {}", cfg.drift_steps, cfg.drift_interval),
        passed: worst <= cfg.drift_tol && f.checkpointed.len() == cfg.drift_steps.div_ceil(cfg.drift_interval),
        worst,
        threshold: cfg.drift_tol,
        detail: format!("max-abs drift at snapshots; {free:.3e} without correction"),
    })
}

/// Heap high-water mark and wall time of one reverse pass and one exact oracle pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryProbe {
    pub steps: usize,
    pub reverse_bytes: usize,
    pub oracle_bytes: usize,
    pub reverse_secs: f64,
}

pub fn memory_probe(steps: usize, seed: u64) -> Result<MemoryProbe> {
    let inst = Instance::with_arch(seed, Arch::CausalAttention1L, true)?;
    let loss = SoftNll::new(&inst.model);
    let h = Instance::hyper();
    let u = adam_unroll(&inst.init, &loss, &inst.data, steps, &h, CheckpointPolicy::NONE, &inst.schedule)?;
    let (_, dl) = inst.meta(&u.state.w)?;
    let opts = ReverseOptions::default();
    let start = Instant::now();
    let (r, reverse_bytes) = memory::measure(|| {
        adam_reverse(&u.state, &dl, &loss, &inst.data, steps, &h, &[], &inst.schedule, &opts)
    });
    let reverse_secs = start.elapsed().as_secs_f64();
    r?;
    let (e, oracle_bytes) = memory::measure(|| {
        exact_adam_meta_gradient(&inst.init, &loss, &inst.data, steps, &h, &inst.schedule, |w| inst.meta(w))
    });
    e?;
    Ok(MemoryProbe {
        steps,
        reverse_bytes,
        oracle_bytes,
        reverse_secs,
    })
}

pub fn check_memory(cfg: &GradcheckConfig) -> Result<CheckResult> {
    if !memory::is_installed() {
        return Ok(CheckResult {
            name: "memory probe".into(),
            passed: true,
            worst: 0.0,
            threshold: cfg.memory_ratio,
            detail: "skipped: no counting allocator in this process".into(),
        });
    }
    let short = memory_probe(cfg.memory_short, cfg.seed)?;
    let long = memory_probe(cfg.memory_long, cfg.seed)?;
    let ratio = long.reverse_bytes as f64 / short.reverse_bytes.max(1) as f64;
    let oracle = long.oracle_bytes as f64 / short.oracle_bytes.max(1) as f64;
    Ok(CheckResult {
        name: format!("memory, T={} vs T={}", cfg.memory_long, cfg.memory_short),
        passed: ratio <= cfg.memory_ratio,
        worst: ratio,
        threshold: cfg.memory_ratio,
        detail: format!(
            "reverse {} -> {} bytes; stored-trajectory oracle grows {oracle:.1}x",
            short.reverse_bytes, long.reverse_bytes
        ),
    })
}

/// The full battery. With `steps == 1` only the finite-difference check runs.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut checks = vec![check_finite_differences(cfg)?];
    if cfg.steps > 1 {
        for t in [2, 5, 10].into_iter().filter(|&t| t <= cfg.steps) {
            checks.extend(check_oracle_cosine(cfg, t)?);
        }
        checks.push(check_reversal(cfg)?);
        checks.push(check_memory(cfg)?);
    }
    Ok(GradcheckReport { checks })
}

/// Outer descent on a least-squares bilevel problem using reverse-pass `dx`.
///
/// The inner loop fits `w` to synthetic regression rows with Adam; the outer
/// loss is the fit on held-out real rows. Returns the outer loss before each step.
pub fn regression_outer_descent(outer_steps: usize, inner_steps: usize, outer_lr: f64, seed: u64) -> Result<Vec<f64>> {
    let lr = LinearRegression {
        features: 4,
        ridge: 0.0,
    };
    let planted = random_params(&lr.params(vec![0.0; 4])?, 1.0, mix(seed, 0));
    let real = lr.sample_data(64, planted.as_slice(), 0.1, mix(seed, 1));
    let mut syn = lr.sample_data(8, &[0.0; 4], 1.0, mix(seed, 2));
    let init = AdamState::new(lr.params(vec![0.0; 4])?);
    let h = AdamHyper::with_lr(0.05);
    let schedule = BatchSchedule::full(8);
    let mut history = Vec::with_capacity(outer_steps);
    for _ in 0..outer_steps {
        let u = adam_unroll(&init, &lr, &syn, inner_steps, &h, CheckpointPolicy::NONE, &schedule)?;
        let (value, dl) = lr.value_and_grad(&u.state.w, &real)?;
        history.push(value);
        let (r, _) = adam_reverse(&u.state, &dl, &lr, &syn, inner_steps, &h, &[], &schedule, &ReverseOptions::default())?;
        for (x, g) in syn.data_mut().iter_mut().zip(r.dx.data()) {
            *x -= outer_lr * g;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GradcheckConfig {
        GradcheckConfig {
            instances: 3,
            drift_steps: 20,
            drift_interval: 5,
            memory_short: 4,
            memory_long: 8,
            ..Default::default()
        }
    }

    #[test]
    fn finite_difference_check_passes() {
        let r = check_finite_differences(&small()).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn flipped_moment_adjoint_is_caught() {
        let cfg = GradcheckConfig {
            flip_moment_adjoint: true,
            ..small()
        };
        let r = check_finite_differences(&cfg).unwrap();
        assert!(!r.passed);
        assert!(r.worst > 0.5);
    }

    #[test]
    fn single_step_runs_one_check() {
        let cfg = GradcheckConfig { steps: 1, ..small() };
        assert_eq!(run_gradcheck(&cfg).unwrap().checks.len(), 1);
    }

    #[test]
    fn reversal_with_snapshots_is_tight() {
        let f = reversal_fidelity(20, 5, 3).unwrap();
        assert_eq!(f.checkpointed.len(), 4);
        assert!(f.checkpointed.iter().all(|e| e.1 <= 1e-6));
        assert_eq!(f.uncorrected.len(), 4);
    }

    #[test]
    fn outer_descent_reduces_loss() {
        let h = regression_outer_descent(10, 5, 0.05, 1).unwrap();
        assert!(h.last().unwrap() < h.first().unwrap());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = GradcheckConfig { memory_long: 4, ..small() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
