use log::warn;
use serde::{Deserialize, Serialize};

use super::{BatchSchedule, CheckpointPolicy, DriftEntry, DriftReport, ReverseResult};
use crate::autodiff::{hvp_both, value_and_grad, Differentiable};
use crate::error::{Error, Result};
use crate::tensor::{ParamVector, Tensor};

/// Below this a reconstructed second moment is treated as an error rather than rounding.
const V_NEGATIVE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("adam lr must be positive"));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::config("adam betas must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("adam eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub w: ParamVector,
    pub m: ParamVector,
    pub v: ParamVector,
    pub t: usize,
}

impl AdamState {
    /// Fresh moments at step zero.
    pub fn new(w: ParamVector) -> Self {
        let z = w.zeros_like();
        AdamState {
            m: z.clone(),
            v: z,
            w,
            t: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.w.ensure_conformal(&self.m, "adam first moment")?;
        self.w.ensure_conformal(&self.v, "adam second moment")?;
        if self.v.as_slice().iter().any(|&x| x < 0.0) {
            return Err(Error::config("adam second moment has negative entries"));
        }
        Ok(())
    }

    fn drift_from(&self, other: &AdamState, step: usize) -> DriftEntry {
        DriftEntry {
            step,
            w: self.w.max_abs_diff(&other.w),
            m: self.m.max_abs_diff(&other.m),
            v: self.v.max_abs_diff(&other.v),
        }
    }
}

fn apply_step(state: &mut AdamState, g: &[f64], h: &AdamHyper) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let w = state.w.as_mut_slice();
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for i in 0..g.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

/// One bias-corrected Adam update in square-root form.
pub fn adam_step(state: &AdamState, grad: &ParamVector, hyper: &AdamHyper) -> Result<AdamState> {
    state.w.ensure_conformal(grad, "adam gradient")?;
    grad.ensure_finite("adam gradient")?;
    let mut next = state.clone();
    apply_step(&mut next, grad.as_slice(), hyper);
    Ok(next)
}

#[derive(Clone, Debug)]
pub struct Unrolled {
    pub state: AdamState,
    /// Snapshots taken before local steps `0, C, 2C, …` (local step `k` has `t = t0 + k`).
    pub checkpoints: Vec<AdamState>,
    /// Inner loss at each step, evaluated before the update.
    pub losses: Vec<f64>,
}

fn at_step(step: usize, e: Error) -> Error {
    if e.is_numeric() {
        Error::NumericFailure {
            step,
            message: e.to_string(),
        }
    } else {
        e
    }
}

/// `steps` Adam updates on the batches named by `schedule`.
pub fn adam_unroll<L>(
    init: &AdamState,
    loss: &L,
    data: &Tensor,
    steps: usize,
    hyper: &AdamHyper,
    ckpt: CheckpointPolicy,
    schedule: &BatchSchedule,
) -> Result<Unrolled>
where
    L: Differentiable<Batch = [usize]>,
{
    hyper.validate()?;
    init.validate()?;
    let mut state = init.clone();
    let mut checkpoints = Vec::new();
    let mut losses = Vec::with_capacity(steps);
    for k in 0..steps {
        if ckpt.stores(k) {
            checkpoints.push(state.clone());
        }
        let t = state.t + 1;
        let rows = schedule.rows(t);
        let (value, g) = value_and_grad(loss, &state.w, data, &rows).map_err(|e| at_step(t, e))?;
        apply_step(&mut state, g.as_slice(), hyper);
        state
            .w
            .ensure_finite("adam parameters")
            .map_err(|e| at_step(t, e))?;
        losses.push(value);
    }
    Ok(Unrolled {
        state,
        checkpoints,
        losses,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverseOptions {
    /// Drift beyond this at a checkpoint aborts the reversal.
    pub drift_tol: f64,
    /// Drift beyond this is logged.
    pub warn_tol: f64,
    /// Replace reconstructed states with snapshots; when false, drift is only measured.
    pub replace: bool,
    #[doc(hidden)]
    pub flip_moment_adjoint: bool,
}

impl Default for ReverseOptions {
    fn default() -> Self {
        ReverseOptions {
            drift_tol: 1e-3,
            warn_tol: 1e-5,
            replace: true,
            flip_moment_adjoint: false,
        }
    }
}

impl ReverseOptions {
    /// Measure drift against every snapshot without correcting or failing.
    pub fn observe() -> Self {
        ReverseOptions {
            drift_tol: f64::INFINITY,
            warn_tol: f64::INFINITY,
            replace: false,
            ..Default::default()
        }
    }
}

/// Constant-memory meta-gradient of `f(w_T)` through `steps` Adam updates.
///
/// Walks the trajectory backwards from `last`, rebuilding each previous
/// `(w, m, v)` by inverting the update and recomputing the gradient on the same
/// batch. The first-moment adjoint absorbs the second-moment path of the current
/// step, which makes `dw0` and `dx` exact for a single step and an approximation
/// beyond that. `dm0` follows the first-moment chain alone.
///
/// `checkpoints` are the snapshots returned by [`adam_unroll`]; pass an empty
/// slice to reverse without them.
#[allow(clippy::too_many_arguments)]
pub fn adam_reverse<L>(
    last: &AdamState,
    dl_dw_last: &ParamVector,
    loss: &L,
    data: &Tensor,
    steps: usize,
    hyper: &AdamHyper,
    checkpoints: &[AdamState],
    schedule: &BatchSchedule,
    opts: &ReverseOptions,
) -> Result<(ReverseResult, DriftReport)>
where
    L: Differentiable<Batch = [usize]>,
{
    hyper.validate()?;
    last.validate()?;
    last.w.ensure_conformal(dl_dw_last, "meta-objective gradient")?;
    if steps > last.t {
        return Err(Error::config(format!(
            "cannot reverse {steps} steps from a state at t={}",
            last.t
        )));
    }
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let mut state = last.clone();
    let mut dw = dl_dw_last.clone();
    let mut dm = last.w.zeros_like();
    let mut dm_chain = last.w.zeros_like();
    let mut dx = Tensor::zeros(data.shape());
    let mut w_prev = last.w.clone();
    let mut report = DriftReport::default();
    let sign = if opts.flip_moment_adjoint { -1.0 } else { 1.0 };
    let t_first = last.t - steps;

    for t in (t_first + 1..=last.t).rev() {
        let ti = t as i32;
        let bc1 = 1.0 - b1.powi(ti);
        let bc2 = 1.0 - b2.powi(ti);
        {
            let w = state.w.as_slice();
            let m = state.m.as_slice();
            let v = state.v.as_slice();
            for (i, wp) in w_prev.as_mut_slice().iter_mut().enumerate() {
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *wp = w[i] + hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            }
        }
        let rows = schedule.rows(t);
        let (_, g) = value_and_grad(loss, &w_prev, data, &rows).map_err(|e| at_step(t, e))?;
        let g = g.as_slice();

        let lr_p = hyper.lr * bc2.sqrt() / bc1;
        let eps_p = hyper.eps * bc2.sqrt();
        let beta_p = (1.0 - b2) / (1.0 - b1);
        {
            let m = state.m.as_slice();
            let v = state.v.as_slice();
            let dws = dw.as_slice();
            let dms = dm.as_mut_slice();
            let chain = dm_chain.as_mut_slice();
            for i in 0..g.len() {
                let s = v[i].sqrt();
                let den = s + eps_p;
                let second = if s > 0.0 {
                    beta_p * m[i] * g[i] / (s * den * den)
                } else {
                    0.0
                };
                dms[i] += sign * lr_p * (second - 1.0 / den) * dws[i];
                chain[i] -= lr_p / den * dws[i];
            }
        }
        // a snapshot about to overwrite this state makes the sign guard moot
        let corrected = opts.replace && checkpoints.iter().any(|c| c.t == t - 1);
        {
            let m = state.m.as_mut_slice();
            let v = state.v.as_mut_slice();
            for i in 0..g.len() {
                m[i] = (m[i] - (1.0 - b1) * g[i]) / b1;
                let vp = (v[i] - (1.0 - b2) * g[i] * g[i]) / b2;
                v[i] = if vp >= 0.0 || corrected {
                    vp
                } else if vp > -V_NEGATIVE_TOL {
                    0.0
                } else {
                    return Err(Error::NumericFailure {
                        step: t,
                        message: format!("reconstructed second moment {vp:.3e} is negative"),
                    });
                };
            }
        }

        let (hw, hx) = hvp_both(loss, &w_prev, data, &rows, &dm).map_err(|e| at_step(t, e))?;
        dw.axpy(1.0 - b1, &hw);
        for (o, h) in dx.data_mut().iter_mut().zip(hx.data()) {
            *o += (1.0 - b1) * h;
        }
        dm.scale(b1);
        dm_chain.scale(b1);

        std::mem::swap(&mut state.w, &mut w_prev);
        state.t = t - 1;

        if let Some(snap) = checkpoints.iter().find(|c| c.t == t - 1) {
            let entry = state.drift_from(snap, t - 1);
            let magnitude = entry.max();
            report.entries.push(entry);
            if magnitude > opts.drift_tol {
                return Err(Error::ReversalDrift {
                    step: t - 1,
                    magnitude,
                    tolerance: opts.drift_tol,
                });
            }
            if magnitude > opts.warn_tol {
                warn!("reversal drift {magnitude:.3e} at step {}", t - 1);
            }
            if opts.replace {
                state.w.as_mut_slice().copy_from_slice(snap.w.as_slice());
                state.m.as_mut_slice().copy_from_slice(snap.m.as_slice());
                state.v.as_mut_slice().copy_from_slice(snap.v.as_slice());
            }
        }
    }
    dw.ensure_finite("meta-gradient dw0")?;
    dx.ensure_finite("meta-gradient dx")?;
    report.entries.reverse();
    Ok((
        ReverseResult {
            dw0: dw,
            dm0: dm_chain,
            dx,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Scalar, Tape, Var};
    use crate::tensor::Layout;
    use std::sync::Arc;

    /// `0.5‖w‖²`, ignoring data.
    struct HalfNorm;

    impl Differentiable for HalfNorm {
        type Batch = [usize];
        fn record<S: Scalar>(&self, t: &mut Tape<S>, p: &[Var], _d: Var, _b: &[usize]) -> Result<Var> {
            let sq = t.mul(p[0], p[0])?;
            t.weighted_row_sum(sq, vec![0.5])
        }
    }

    fn scalar_params(xs: &[f64]) -> ParamVector {
        let layout = Arc::new(Layout::new(vec![("w".into(), vec![xs.len()])]).unwrap());
        ParamVector::unflatten(layout, xs.to_vec()).unwrap()
    }

    #[test]
    fn single_step_by_hand() {
        let s = AdamState::new(scalar_params(&[1.0]));
        let h = AdamHyper {
            lr: 0.1,
            ..Default::default()
        };
        let n = adam_step(&s, &scalar_params(&[1.0]), &h).unwrap();
        assert!((n.m.as_slice()[0] - 0.1).abs() < 1e-15);
        assert!((n.v.as_slice()[0] - 0.001).abs() < 1e-15);
        assert!((n.w.as_slice()[0] - 0.9).abs() < 1e-8);
        assert_eq!(n.t, 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let s = AdamState::new(scalar_params(&[0.3, -2.0]));
        let n = adam_step(&s, &scalar_params(&[0.0, 0.0]), &AdamHyper::default()).unwrap();
        assert_eq!(n.w, s.w);
        assert_eq!(n.m, s.m);
        assert_eq!(n.v, s.v);
        assert_eq!(n.t, 1);
    }

    #[test]
    fn first_step_is_scale_free() {
        let s = AdamState::new(scalar_params(&[0.0, 0.0]));
        let h = AdamHyper::default();
        let a = adam_step(&s, &scalar_params(&[0.5, -3.0]), &h).unwrap();
        let b = adam_step(&s, &scalar_params(&[5.0, -30.0]), &h).unwrap();
        assert!(a.w.max_abs_diff(&b.w) < 1e-9);
    }

    #[test]
    fn non_finite_gradient_errors() {
        let s = AdamState::new(scalar_params(&[0.0]));
        assert!(adam_step(&s, &scalar_params(&[f64::NAN]), &AdamHyper::default()).is_err());
    }

    #[test]
    fn unroll_converges_on_quadratic() {
        let s = AdamState::new(scalar_params(&[0.8, -0.5, 0.3]));
        let data = Tensor::zeros(&[1, 1]);
        let h = AdamHyper::with_lr(0.05);
        let u = adam_unroll(&s, &HalfNorm, &data, 200, &h, CheckpointPolicy::NONE, &BatchSchedule::full(1))
            .unwrap();
        assert!(u.state.w.norm() < 1e-3, "{}", u.state.w.norm());
        let again = adam_unroll(&s, &HalfNorm, &data, 200, &h, CheckpointPolicy::NONE, &BatchSchedule::full(1))
            .unwrap();
        assert_eq!(u.state, again.state);
    }

    #[test]
    fn zero_steps_is_identity() {
        let s = AdamState::new(scalar_params(&[0.8]));
        let data = Tensor::zeros(&[1, 1]);
        let sched = BatchSchedule::full(1);
        let h = AdamHyper::default();
        let u = adam_unroll(&s, &HalfNorm, &data, 0, &h, CheckpointPolicy::default(), &sched).unwrap();
        assert_eq!(u.state, s);
        let dl = scalar_params(&[2.5]);
        let (r, _) = adam_reverse(&s, &dl, &HalfNorm, &data, 0, &h, &[], &sched, &ReverseOptions::default())
            .unwrap();
        assert_eq!(r.dw0, dl);
        assert_eq!(r.dm0.max_abs(), 0.0);
        assert_eq!(r.dx.data().iter().map(|x| x.abs()).sum::<f64>(), 0.0);
    }

    #[test]
    fn reversal_reconstructs_quadratic_trajectory() {
        let s = AdamState::new(scalar_params(&[0.8, -0.5, 0.3]));
        let data = Tensor::zeros(&[1, 1]);
        let sched = BatchSchedule::full(1);
        let h = AdamHyper::with_lr(0.01);
        let u = adam_unroll(&s, &HalfNorm, &data, 60, &h, CheckpointPolicy::every(1), &sched).unwrap();
        let dl = scalar_params(&[1.0, 1.0, 1.0]);
        let (_, report) = adam_reverse(
            &u.state, &dl, &HalfNorm, &data, 60, &h, &u.checkpoints, &sched, &ReverseOptions::observe(),
        )
        .unwrap();
        assert_eq!(report.entries.len(), 60);
        assert!(report.max() < 1e-9, "{}", report.max());
    }

    #[test]
    fn excessive_drift_is_an_error() {
        let s = AdamState::new(scalar_params(&[0.8]));
        let data = Tensor::zeros(&[1, 1]);
        let sched = BatchSchedule::full(1);
        let h = AdamHyper::default();
        let mut u = adam_unroll(&s, &HalfNorm, &data, 10, &h, CheckpointPolicy::every(5), &sched).unwrap();
        u.checkpoints[1].w.as_mut_slice()[0] += 0.5;
        let err = adam_reverse(
            &u.state, &scalar_params(&[1.0]), &HalfNorm, &data, 10, &h, &u.checkpoints, &sched,
            &ReverseOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::ReversalDrift { step: 5, .. }), "{err}");
    }
}
