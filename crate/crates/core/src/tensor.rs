//! Dense row-major `f64` tensors and flat named parameter vectors.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major n-dimensional array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::non_finite(context))
        }
    }

    /// `(m, k) x (k, n)` product, with any leading axes of `self` flattened into rows.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if rhs.shape.len() != 2 || self.shape.is_empty() {
            return Err(Error::shape("matmul needs a matrix right-hand side"));
        }
        let k = *self.shape.last().unwrap();
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims {k} vs {k2}"
            )));
        }
        let m = self.data.len() / k.max(1);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = n;
        let t = Tensor { shape, data: out };
        t.ensure_finite("matmul")?;
        Ok(t)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::shape("transpose2 needs a matrix"));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Tensor::from_fn(&[c, r], |i| self.data[(i % r) * c + i / r]))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let n = *self.shape.last().ok_or_else(|| Error::shape("scalar softmax"))?;
        let mut data = self.data.clone();
        for row in data.chunks_mut(n) {
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.ensure_finite("softmax")?;
        Ok(t)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let o = &mut out[i * n..(i + 1) * n];
        for (p, &av) in row.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Names and shapes of the segments of a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    pub fn new(segments: Vec<(String, Vec<usize>)>) -> Result<Self> {
        let mut names = Vec::with_capacity(segments.len());
        let mut shapes = Vec::with_capacity(segments.len());
        let mut offsets = Vec::with_capacity(segments.len());
        let mut total = 0;
        for (name, shape) in segments {
            if names.contains(&name) {
                return Err(Error::shape(format!("duplicate segment name {name:?}")));
            }
            offsets.push(total);
            total += shape.iter().product::<usize>();
            names.push(name);
            shapes.push(shape);
        }
        Ok(Layout {
            names,
            shapes,
            offsets,
            total,
        })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn n_segments(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        let start = self.offsets[i];
        start..start + self.shapes[i].iter().product::<usize>()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Segment containing flat index `i`.
    pub fn segment_of(&self, i: usize) -> usize {
        match self.offsets.binary_search(&i) {
            Ok(s) => {
                // skip zero-sized segments sharing the offset
                let mut s = s;
                while self.range(s).is_empty() {
                    s += 1;
                }
                s
            }
            Err(s) => s - 1,
        }
    }
}

/// A flat parameter vector partitioned into named, shaped segments.
///
/// Storage is a single contiguous buffer, so flatten/unflatten are copies of
/// that buffer and round-trip bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn from_segments(segments: Vec<(String, Tensor)>) -> Result<Self> {
        let layout = Layout::new(
            segments
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
        )?;
        let data = segments.into_iter().flat_map(|(_, t)| t.into_data()).collect();
        Ok(ParamVector {
            layout: Arc::new(layout),
            data,
        })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![0.0; layout.len()];
        ParamVector { layout, data }
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector::zeros(self.layout.clone())
    }

    pub fn unflatten(layout: Arc<Layout>, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != layout.len() {
            return Err(Error::shape(format!(
                "flat vector of {} values does not fit layout of {}",
                flat.len(),
                layout.len()
            )));
        }
        Ok(ParamVector { layout, data: flat })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn segment(&self, i: usize) -> &[f64] {
        &self.data[self.layout.range(i)]
    }

    pub fn segment_mut(&mut self, i: usize) -> &mut [f64] {
        let r = self.layout.range(i);
        &mut self.data[r]
    }

    pub fn segment_tensor(&self, i: usize) -> Tensor {
        Tensor {
            shape: self.layout.shape(i).to_vec(),
            data: self.segment(i).to_vec(),
        }
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.layout.index_of(name).map(|i| self.segment_tensor(i))
    }

    pub fn segments(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> + '_ {
        (0..self.layout.n_segments()).map(move |i| {
            (self.layout.name(i), self.layout.shape(i), self.segment(i))
        })
    }

    pub fn conformal(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn ensure_conformal(&self, other: &ParamVector, context: &str) -> Result<()> {
        if self.conformal(other) {
            Ok(())
        } else {
            Err(Error::shape(format!("{context}: parameter layouts differ")))
        }
    }

    /// Errors naming the first segment holding a NaN or infinity.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        for (name, _, vals) in self.segments() {
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(Error::non_finite(format!("{context} (segment {name:?})")));
            }
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &ParamVector) {
        for (s, v) in self.data.iter_mut().zip(&x.data) {
            *s += alpha * v;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        ParamVector {
            layout: self.layout.clone(),
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamVector {
        ParamVector {
            layout: self.layout.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Cosine similarity of two flat vectors; zero if either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `‖a − b‖ / max(‖b‖, floor)`
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / nb.max(floor)
}
