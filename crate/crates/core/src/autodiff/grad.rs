use super::scalar::{Dual, Scalar};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamVector, Tensor};

/// A scalar loss `L(w, x)` that can be recorded on a tape.
///
/// `params` holds one leaf per parameter segment, in layout order; `data` is a
/// leaf for the continuous data tensor (possibly empty when the loss ignores
/// it). The recording must be a pure function of its inputs.
pub trait Differentiable: Sync {
    type Batch: ?Sized + Sync;

    fn record<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &[Var],
        data: Var,
        batch: &Self::Batch,
    ) -> Result<Var>;
}

fn param_leaves<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamVector,
    tangent: Option<&ParamVector>,
) -> Result<Vec<Var>> {
    let layout = params.layout();
    (0..layout.n_segments())
        .map(|i| {
            let vals = params.segment(i);
            let value = match tangent {
                None => vals.iter().map(|&x| S::from_f64(x)).collect(),
                Some(t) => vals
                    .iter()
                    .zip(t.segment(i))
                    .map(|(&x, &dx)| S::lift(x, dx))
                    .collect(),
            };
            tape.leaf(layout.shape(i), value)
        })
        .collect()
}

fn collect_param_grad(
    params: &ParamVector,
    vars: &[Var],
    grads: &super::tape::Grads<f64>,
) -> ParamVector {
    let mut out = params.zeros_like();
    for (i, v) in vars.iter().enumerate() {
        if let Some(g) = grads.get(*v) {
            out.segment_mut(i).copy_from_slice(g);
        }
    }
    out
}

/// Loss value and gradient with respect to the parameters.
pub fn value_and_grad<L: Differentiable>(
    loss: &L,
    params: &ParamVector,
    data: &Tensor,
    batch: &L::Batch,
) -> Result<(f64, ParamVector)> {
    let (value, g, _) = value_and_grads(loss, params, data, batch, false)?;
    Ok((value, g))
}

/// Loss value, parameter gradient and (optionally) data gradient.
pub fn value_and_grads<L: Differentiable>(
    loss: &L,
    params: &ParamVector,
    data: &Tensor,
    batch: &L::Batch,
    want_data: bool,
) -> Result<(f64, ParamVector, Option<Tensor>)> {
    let mut tape = Tape::<f64>::new();
    let vars = param_leaves(&mut tape, params, None)?;
    let dv = tape.leaf_f64(data.shape(), data.data())?;
    let out = loss.record(&mut tape, &vars, dv, batch)?;
    let value = tape.value(out)[0];
    if !value.is_finite() {
        return Err(Error::non_finite("loss value"));
    }
    let grads = tape.backward(out)?;
    let g = collect_param_grad(params, &vars, &grads);
    g.ensure_finite("gradient")?;
    let gx = if want_data {
        let vals = grads
            .get(dv)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; data.len()]);
        let t = Tensor::new(data.shape().to_vec(), vals)?;
        t.ensure_finite("data gradient")?;
        Some(t)
    } else {
        None
    };
    Ok((value, g, gx))
}

/// Joint Hessian-vector product with the mixed block.
///
/// Seeds parameter tangents with `v` and data tangents with zero, then runs the
/// reverse sweep in dual arithmetic. The tangent of the parameter gradient is
/// `∇_w∇_w L · v`; the tangent of the data gradient is `∇_x(∇_w L · v)`.
pub fn hvp_both<L: Differentiable>(
    loss: &L,
    params: &ParamVector,
    data: &Tensor,
    batch: &L::Batch,
    v: &ParamVector,
) -> Result<(ParamVector, Tensor)> {
    params.ensure_conformal(v, "hvp direction")?;
    let (_, hw, hx) = dual_pass(loss, params, Some(v), data, None, batch)?;
    Ok((hw, hx))
}

pub fn hvp_param<L: Differentiable>(
    loss: &L,
    params: &ParamVector,
    data: &Tensor,
    batch: &L::Batch,
    v: &ParamVector,
) -> Result<ParamVector> {
    hvp_both(loss, params, data, batch, v).map(|(hw, _)| hw)
}

pub fn hvp_data<L: Differentiable>(
    loss: &L,
    params: &ParamVector,
    data: &Tensor,
    batch: &L::Batch,
    v: &ParamVector,
) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::shape("hvp_data: loss has no differentiable data"));
    }
    hvp_both(loss, params, data, batch, v).map(|(_, hx)| hx)
}

/// One forward-over-reverse pass with arbitrary tangents on params and data.
///
/// Returns the directional derivative of the loss together with the tangents
/// of the parameter and data gradients.
pub fn dual_pass<L: Differentiable>(
    loss: &L,
    params: &ParamVector,
    param_tangent: Option<&ParamVector>,
    data: &Tensor,
    data_tangent: Option<&Tensor>,
    batch: &L::Batch,
) -> Result<(Dual, ParamVector, Tensor)> {
    let mut tape = Tape::<Dual>::new();
    let zero;
    let pt = match param_tangent {
        Some(t) => t,
        None => {
            zero = params.zeros_like();
            &zero
        }
    };
    let vars = param_leaves(&mut tape, params, Some(pt))?;
    let dvals: Vec<Dual> = match data_tangent {
        Some(t) => {
            if t.shape() != data.shape() {
                return Err(Error::shape("data tangent shape"));
            }
            data.data()
                .iter()
                .zip(t.data())
                .map(|(&x, &dx)| Dual::new(x, dx))
                .collect()
        }
        None => data.data().iter().map(|&x| Dual::new(x, 0.0)).collect(),
    };
    let dv = tape.leaf(data.shape(), dvals)?;
    let out = loss.record(&mut tape, &vars, dv, batch)?;
    let value = tape.value(out)[0];
    let grads = tape.backward(out)?;
    let mut hw = params.zeros_like();
    for (i, var) in vars.iter().enumerate() {
        if let Some(g) = grads.get(*var) {
            for (o, d) in hw.segment_mut(i).iter_mut().zip(g) {
                *o = d.eps;
            }
        }
    }
    hw.ensure_finite("hessian-vector product")?;
    let hx_vals = match grads.get(dv) {
        Some(g) => g.iter().map(|d| d.eps).collect(),
        None => vec![0.0; data.len()],
    };
    let hx = Tensor::new(data.shape().to_vec(), hx_vals)?;
    hx.ensure_finite("mixed hessian-vector product")?;
    Ok((value, hw, hx))
}

/// Gradient (real part) and its tangent from a dual pass, as flat parts.
///
/// Used by the forward-mode oracle: with tangents on both params and data the
/// dual gradient is `(∇_w L, d/dτ ∇_w L)`.
pub fn dual_grad<L: Differentiable>(
    loss: &L,
    params: &ParamVector,
    param_tangent: &ParamVector,
    data: &Tensor,
    data_tangent: &Tensor,
    batch: &L::Batch,
) -> Result<(ParamVector, ParamVector)> {
    let mut tape = Tape::<Dual>::new();
    let vars = param_leaves(&mut tape, params, Some(param_tangent))?;
    let dvals: Vec<Dual> = data
        .data()
        .iter()
        .zip(data_tangent.data())
        .map(|(&x, &dx)| Dual::new(x, dx))
        .collect();
    let dv = tape.leaf(data.shape(), dvals)?;
    let out = loss.record(&mut tape, &vars, dv, batch)?;
    let grads = tape.backward(out)?;
    let mut g = params.zeros_like();
    let mut gt = params.zeros_like();
    for (i, var) in vars.iter().enumerate() {
        if let Some(gs) = grads.get(*var) {
            for ((o, ot), d) in g
                .segment_mut(i)
                .iter_mut()
                .zip(gt.segment_mut(i).iter_mut())
                .zip(gs)
            {
                *o = d.re;
                *ot = d.eps;
            }
        }
    }
    g.ensure_finite("gradient")?;
    gt.ensure_finite("gradient tangent")?;
    Ok((g, gt))
}
