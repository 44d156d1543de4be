use serde::{Deserialize, Serialize};

use super::{BatchSchedule, CheckpointPolicy, ReverseResult};
use crate::autodiff::{hvp_both, value_and_grad, Differentiable};
use crate::error::{Error, Result};
use crate::tensor::{ParamVector, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdHyper {
    fn default() -> Self {
        SgdHyper {
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

impl SgdHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("sgd lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("sgd momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Heavy-ball state: `b ← μ·b + g`, `w ← w − lr·b`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub w: ParamVector,
    pub b: ParamVector,
    pub t: usize,
}

impl SgdState {
    pub fn new(w: ParamVector) -> Self {
        SgdState {
            b: w.zeros_like(),
            w,
            t: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SgdUnrolled {
    pub state: SgdState,
    /// Always holds the starting state, then one snapshot every `C` steps.
    pub checkpoints: Vec<SgdState>,
    pub losses: Vec<f64>,
}

/// One heavy-ball update.
pub fn sgd_step(state: &SgdState, grad: &ParamVector, hyper: &SgdHyper) -> Result<SgdState> {
    state.w.ensure_conformal(grad, "sgd gradient")?;
    grad.ensure_finite("sgd gradient")?;
    let mut next = state.clone();
    next.b.scale(hyper.momentum);
    next.b.axpy(1.0, grad);
    next.w.axpy(-hyper.lr, &next.b);
    next.t += 1;
    Ok(next)
}

fn step<L: Differentiable<Batch = [usize]>>(
    state: &mut SgdState,
    loss: &L,
    data: &Tensor,
    h: &SgdHyper,
    schedule: &BatchSchedule,
) -> Result<f64> {
    let t = state.t + 1;
    let rows = schedule.rows(t);
    let (value, g) = value_and_grad(loss, &state.w, data, &rows).map_err(|e| Error::NumericFailure {
        step: t,
        message: e.to_string(),
    })?;
    state.b.scale(h.momentum);
    state.b.axpy(1.0, &g);
    state.w.axpy(-h.lr, &state.b);
    state.t = t;
    state.w.ensure_finite("sgd parameters").map_err(|e| Error::NumericFailure {
        step: t,
        message: e.to_string(),
    })?;
    Ok(value)
}

pub fn sgd_unroll<L>(
    init: &SgdState,
    loss: &L,
    data: &Tensor,
    steps: usize,
    hyper: &SgdHyper,
    ckpt: CheckpointPolicy,
    schedule: &BatchSchedule,
) -> Result<SgdUnrolled>
where
    L: Differentiable<Batch = [usize]>,
{
    hyper.validate()?;
    init.w.ensure_conformal(&init.b, "momentum buffer")?;
    let mut state = init.clone();
    let mut checkpoints = vec![init.clone()];
    let mut losses = Vec::with_capacity(steps);
    for k in 0..steps {
        if k > 0 && ckpt.stores(k) {
            checkpoints.push(state.clone());
        }
        losses.push(step(&mut state, loss, data, hyper, schedule)?);
    }
    Ok(SgdUnrolled {
        state,
        checkpoints,
        losses,
    })
}

/// Exact meta-gradient through heavy-ball SGD.
///
/// Each segment between snapshots is replayed forward once and its states kept,
/// so memory is `O(C·|w|)` and there is no reconstruction error.
#[allow(clippy::too_many_arguments)]
pub fn sgd_reverse<L>(
    unrolled: &SgdUnrolled,
    dl_dw_last: &ParamVector,
    loss: &L,
    data: &Tensor,
    steps: usize,
    hyper: &SgdHyper,
    schedule: &BatchSchedule,
) -> Result<ReverseResult>
where
    L: Differentiable<Batch = [usize]>,
{
    hyper.validate()?;
    let first = unrolled
        .checkpoints
        .first()
        .ok_or_else(|| Error::config("sgd reversal needs the starting snapshot"))?;
    if unrolled.state.t != first.t + steps {
        return Err(Error::config("sgd reversal step count does not match the unroll"));
    }
    first.w.ensure_conformal(dl_dw_last, "meta-objective gradient")?;
    let mut dw = dl_dw_last.clone();
    let mut db = first.w.zeros_like();
    let mut dx = Tensor::zeros(data.shape());
    let end = unrolled.state.t;
    for (i, snap) in unrolled.checkpoints.iter().enumerate().rev() {
        let seg_end = unrolled.checkpoints.get(i + 1).map_or(end, |c| c.t);
        let mut states = Vec::with_capacity(seg_end - snap.t);
        let mut s = snap.clone();
        while s.t < seg_end {
            states.push(s.w.clone());
            step(&mut s, loss, data, hyper, schedule)?;
        }
        for (k, w_prev) in states.iter().enumerate().rev() {
            let t = snap.t + k + 1;
            db.axpy(-hyper.lr, &dw);
            let rows = schedule.rows(t);
            let (hw, hx) = hvp_both(loss, w_prev, data, &rows, &db).map_err(|e| Error::NumericFailure {
                step: t,
                message: e.to_string(),
            })?;
            dw.axpy(1.0, &hw);
            for (o, h) in dx.data_mut().iter_mut().zip(hx.data()) {
                *o += h;
            }
            db.scale(hyper.momentum);
        }
    }
    dw.ensure_finite("meta-gradient dw0")?;
    Ok(ReverseResult { dw0: dw, dm0: db, dx })
}
