//! Independent references for meta-gradients: central finite differences, an
//! exact reverse pass over a fully stored Adam trajectory, and forward-mode
//! tangents propagated through the whole unroll.

use crate::autodiff::{dual_grad, hvp_both, value_and_grad, Differentiable};
use crate::error::Result;
use crate::optim::{AdamHyper, AdamState, BatchSchedule};
use crate::par::Parallelism;
use crate::tensor::{ParamVector, Tensor};

/// Central differences of `f` at `x`, one coordinate per task.
pub fn central_differences<F>(f: F, x: &[f64], h: f64, par: Parallelism) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    par.try_map_range(x.len(), |i| {
        let mut xp = x.to_vec();
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        Ok((fp - fm) / (2.0 * h))
    })
}

/// Exact meta-gradients through an Adam unroll, including the second moment.
#[derive(Clone, Debug)]
pub struct ExactMetaGradient {
    pub value: f64,
    pub w_last: ParamVector,
    pub dw0: ParamVector,
    pub dm0: ParamVector,
    pub dv0: ParamVector,
    pub dx: Tensor,
}

struct Stored {
    w_prev: ParamVector,
    m: ParamVector,
    v: ParamVector,
    g: ParamVector,
}

/// Reverse pass over a stored trajectory. Memory grows linearly with `steps`.
///
/// `meta` maps the final parameters to the outer value and its gradient.
#[allow(clippy::too_many_arguments)]
pub fn exact_adam_meta_gradient<L, M>(
    init: &AdamState,
    loss: &L,
    data: &Tensor,
    steps: usize,
    hyper: &AdamHyper,
    schedule: &BatchSchedule,
    meta: M,
) -> Result<ExactMetaGradient>
where
    L: Differentiable<Batch = [usize]>,
    M: Fn(&ParamVector) -> Result<(f64, ParamVector)>,
{
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let mut state = init.clone();
    let mut tape = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t = state.t + 1;
        let rows = schedule.rows(t);
        let (_, g) = value_and_grad(loss, &state.w, data, &rows)?;
        let w_prev = state.w.clone();
        state = crate::optim::adam_step(&state, &g, hyper)?;
        tape.push(Stored {
            w_prev,
            m: state.m.clone(),
            v: state.v.clone(),
            g,
        });
    }
    let (value, mut dw) = meta(&state.w)?;
    let mut dm = dw.zeros_like();
    let mut dv = dw.zeros_like();
    let mut dx = Tensor::zeros(data.shape());
    for (k, s) in tape.iter().enumerate().rev() {
        let t = init.t + k + 1;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let mut dg = dw.zeros_like();
        {
            let (m, v, g) = (s.m.as_slice(), s.v.as_slice(), s.g.as_slice());
            let (dws, dms, dvs) = (dw.as_slice(), dm.as_mut_slice(), dv.as_mut_slice());
            for (i, out) in dg.as_mut_slice().iter_mut().enumerate() {
                let u = (v[i] / bc2).sqrt();
                let den = u + hyper.eps;
                dms[i] -= dws[i] * hyper.lr / (bc1 * den);
                if u > 0.0 {
                    dvs[i] += dws[i] * hyper.lr * (m[i] / bc1) / (den * den) / (2.0 * u * bc2);
                }
                *out = (1.0 - b1) * dms[i] + 2.0 * (1.0 - b2) * g[i] * dvs[i];
            }
        }
        let rows = schedule.rows(t);
        let (hw, hx) = hvp_both(loss, &s.w_prev, data, &rows, &dg)?;
        dw.axpy(1.0, &hw);
        for (o, h) in dx.data_mut().iter_mut().zip(hx.data()) {
            *o += h;
        }
        dm.scale(b1);
        dv.scale(b2);
    }
    Ok(ExactMetaGradient {
        value,
        w_last: state.w,
        dw0: dw,
        dm0: dm,
        dv0: dv,
        dx,
    })
}

/// Tangent of the final parameters along `(ẇ0, ṁ0, ẋ)` by dual arithmetic
/// through every Adam step. Returns `(w_T, ẇ_T)`.
#[allow(clippy::too_many_arguments)]
pub fn adam_tangent<L>(
    init: &AdamState,
    w_tangent: &ParamVector,
    m_tangent: &ParamVector,
    loss: &L,
    data: &Tensor,
    x_tangent: &Tensor,
    steps: usize,
    hyper: &AdamHyper,
    schedule: &BatchSchedule,
) -> Result<(ParamVector, ParamVector)>
where
    L: Differentiable<Batch = [usize]>,
{
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let mut s = init.clone();
    let mut wd = w_tangent.clone();
    let mut md = m_tangent.clone();
    let mut vd = init.w.zeros_like();
    for _ in 0..steps {
        let t = s.t + 1;
        let rows = schedule.rows(t);
        let (g, gd) = dual_grad(loss, &s.w, &wd, data, x_tangent, &rows)?;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let (w, m, v) = (s.w.as_mut_slice(), s.m.as_mut_slice(), s.v.as_mut_slice());
        let (wd, md, vd) = (wd.as_mut_slice(), md.as_mut_slice(), vd.as_mut_slice());
        let (g, gd) = (g.as_slice(), gd.as_slice());
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            vd[i] = b2 * vd[i] + 2.0 * (1.0 - b2) * g[i] * gd[i];
            let u = (v[i] / bc2).sqrt();
            let ud = if u > 0.0 { vd[i] / (2.0 * u * bc2) } else { 0.0 };
            let den = u + hyper.eps;
            let m_hat = m[i] / bc1;
            w[i] -= hyper.lr * m_hat / den;
            wd[i] -= hyper.lr * (md[i] / bc1 / den - m_hat * ud / (den * den));
        }
        s.t = t;
    }
    Ok((s.w, wd))
}
