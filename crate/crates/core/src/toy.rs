//! Small problems with known structure, for checking meta-gradients.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Differentiable, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::rng;
use crate::tensor::{Layout, ParamVector, Tensor};

/// Least squares on rows `[features | target]` of a `(n, k + 1)` data tensor:
/// `mean_r 0.5·(x_r·w − y_r)² + 0.5·ridge·‖w‖²`. Quadratic in `w`.
#[derive(Clone, Copy, Debug)]
pub struct LinearRegression {
    pub features: usize,
    pub ridge: f64,
}

impl LinearRegression {
    pub fn layout(&self) -> Arc<Layout> {
        Arc::new(Layout::new(vec![("w".into(), vec![self.features, 1])]).expect("single segment"))
    }

    pub fn params(&self, values: Vec<f64>) -> Result<ParamVector> {
        ParamVector::unflatten(self.layout(), values)
    }

    /// Gaussian features, targets from a planted weight vector plus noise.
    pub fn sample_data(&self, n: usize, planted: &[f64], noise: f64, seed: u64) -> Tensor {
        let k = self.features;
        let mut r = rng(seed);
        let mut data = Vec::with_capacity(n * (k + 1));
        for _ in 0..n {
            let x: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut r)).collect();
            let e: f64 = StandardNormal.sample(&mut r);
            let y = x.iter().zip(planted).map(|(a, b)| a * b).sum::<f64>() + noise * e;
            data.extend(x);
            data.push(y);
        }
        Tensor::new(vec![n, k + 1], data).expect("consistent shape")
    }

    /// Loss and gradient on every row, for use as an outer objective.
    pub fn value_and_grad(&self, w: &ParamVector, data: &Tensor) -> Result<(f64, ParamVector)> {
        let rows: Vec<usize> = (0..data.shape()[0]).collect();
        crate::autodiff::value_and_grad(self, w, data, &rows)
    }
}

impl Differentiable for LinearRegression {
    type Batch = [usize];

    fn record<S: Scalar>(&self, t: &mut Tape<S>, p: &[Var], data: Var, rows: &[usize]) -> Result<Var> {
        let k = self.features;
        if t.shape(data) != [t.shape(data)[0], k + 1] {
            return Err(Error::shape("regression data must be (n, features + 1)"));
        }
        let x = t.gather_rows(data, rows)?;
        let feats = t.slice_axis1(x, 0, k)?;
        let y = t.slice_axis1(x, k, k + 1)?;
        let pred = t.matmul(feats, p[0])?;
        let r = t.sub(pred, y)?;
        let sq = t.mul(r, r)?;
        let fit = t.weighted_row_sum(sq, vec![0.5 / rows.len() as f64; rows.len()])?;
        if self.ridge == 0.0 {
            return Ok(fit);
        }
        let ww = t.mul(p[0], p[0])?;
        let reg = t.weighted_row_sum(ww, vec![0.5 * self.ridge; k])?;
        t.add(fit, reg)
    }
}

/// Uniform draws in `[-scale, scale]` shaped like `like`.
pub fn random_params(like: &ParamVector, scale: f64, seed: u64) -> ParamVector {
    let mut r = rng(seed);
    let mut out = like.zeros_like();
    for x in out.as_mut_slice() {
        *x = r.random_range(-scale..=scale);
    }
    out
}

/// A `(n, len, vocab)` tensor of random token distributions.
pub fn random_soft_data(n: usize, len: usize, vocab: usize, sharpness: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let logits = Tensor::from_fn(&[n, len, vocab], |_| {
        sharpness * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)
    });
    logits.softmax_last().expect("non-empty last axis")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::hvp_param;

    #[test]
    fn regression_hessian_is_gram_matrix() {
        let lr = LinearRegression { features: 3, ridge: 0.1 };
        let data = lr.sample_data(5, &[1.0, -1.0, 0.5], 0.1, 3);
        let w = lr.params(vec![0.2, 0.1, -0.3]).unwrap();
        let rows: Vec<usize> = (0..5).collect();
        let e0 = lr.params(vec![1.0, 0.0, 0.0]).unwrap();
        let h = hvp_param(&lr, &w, &data, &rows, &e0).unwrap();
        let d = data.data();
        for j in 0..3 {
            let gram: f64 = (0..5).map(|r| d[r * 4] * d[r * 4 + j]).sum::<f64>() / 5.0;
            let expect = gram + if j == 0 { 0.1 } else { 0.0 };
            assert!((h.as_slice()[j] - expect).abs() < 1e-12);
        }
    }
}
