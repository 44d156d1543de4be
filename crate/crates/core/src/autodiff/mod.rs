//! Reverse-mode differentiation over a recording tape, with
//! forward-over-reverse Hessian-vector products.

mod grad;
mod scalar;
mod tape;

pub use grad::{
    dual_grad, dual_pass, hvp_both, hvp_data, hvp_param, value_and_grad, value_and_grads,
    Differentiable,
};
pub use scalar::{Dual, Scalar};
pub use tape::{Grads, Tape, Var};
