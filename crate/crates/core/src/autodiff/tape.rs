//! Linear recording tape for reverse-mode differentiation.
//!
//! Every op evaluates eagerly and pushes a node holding its value and the
//! indices of its inputs. `backward` walks the nodes in reverse once. The tape
//! is generic over [`Scalar`], so the same model code yields gradients
//! (`f64`) or gradients with tangents (`Dual`).

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `[rows, k] x [k, n]`
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]^T` when `trans_b`
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { a: Var, bias: Var, n: usize },
    Scale { a: Var, c: f64 },
    Tanh(Var),
    Sigmoid(Var),
    Softmax { a: Var, n: usize },
    LogSoftmax { a: Var, n: usize },
    CausalSoftmax { a: Var, l: usize },
    LayerNorm { a: Var, n: usize, eps: f64 },
    GatherRows { a: Var, rows: Vec<usize>, row_len: usize },
    SliceAxis1 {
        a: Var,
        batch: usize,
        len: usize,
        start: usize,
        end: usize,
        inner: usize,
    },
    StackAxis1 { parts: Vec<Var>, batch: usize, inner: usize },
    Reshape(Var),
    WeightedRowSum { a: Var, weights: Vec<f64>, n: usize },
    PickSum { a: Var, picks: Vec<(usize, f64)> },
}

struct Node<S> {
    value: Vec<S>,
    shape: Vec<usize>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of `v`; `None` if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of scalars held in node values.
    pub fn stored_scalars(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, value: Vec<S>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: &[usize], value: Vec<S>) -> Result<Var> {
        if value.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "leaf of shape {shape:?} given {} values",
                value.len()
            )));
        }
        Ok(self.push(value, shape.to_vec(), Op::Leaf))
    }

    pub fn leaf_f64(&mut self, shape: &[usize], value: &[f64]) -> Result<Var> {
        self.leaf(shape, value.iter().map(|&x| S::from_f64(x)).collect())
    }

    fn last_dim(&self, v: Var) -> usize {
        *self.nodes[v.0].shape.last().unwrap_or(&1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bs = self.shape(b);
        if bs.len() != 2 {
            return Err(Error::shape(format!("matmul rhs must be 2-D, got {bs:?}")));
        }
        let (k, n) = (bs[0], bs[1]);
        let ka = self.last_dim(a);
        if ka != k {
            return Err(Error::shape(format!("matmul inner dims {ka} vs {k}")));
        }
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![S::zero(); m * n];
        mm(self.value(a), self.value(b), &mut out, m, k, n);
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(out, shape, Op::MatMul { a, b, m, k, n }))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape(format!("batch_matmul inner dims {k} vs {kb}")));
        }
        let mut out = vec![S::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for bi in 0..batch {
            let ab = &av[bi * m * k..(bi + 1) * m * k];
            let bb = &bv[bi * k * n..(bi + 1) * k * n];
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                mm_bt(ab, bb, ob, m, k, n);
            } else {
                mm(ab, bb, ob, m, k, n);
            }
        }
        Ok(self.push(
            out,
            vec![batch, m, n],
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(S, S) -> S) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds `bias` (flat length `n`) to every consecutive length-`n` chunk of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(bias).len();
        if n == 0 || !self.value(a).len().is_multiple_of(n) {
            return Err(Error::shape(format!(
                "bias of length {n} does not tile {:?}",
                self.shape(a)
            )));
        }
        let bv = self.value(bias);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::AddBias { a, bias, n }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x.scale(c)).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale { a, c })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.sigmoid()).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Sigmoid(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = self.last_dim(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Softmax { a, n })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let n = self.last_dim(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::LogSoftmax { a, n })
    }

    /// Row-wise softmax of a `[B, L, L]` score tensor where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::shape(format!("causal_softmax needs [B, L, L], got {s:?}")));
        }
        let l = s[1];
        let mut out = self.value(a).to_vec();
        for (r, row) in out.chunks_mut(l).enumerate() {
            let i = r % l;
            softmax_in_place(&mut row[..=i]);
            for x in row[i + 1..].iter_mut() {
                *x = S::zero();
            }
        }
        Ok(self.push(out, s, Op::CausalSoftmax { a, l }))
    }

    /// Affine-free layer normalization over the last axis.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let n = self.last_dim(a);
        let mut out = self.value(a).to_vec();
        let inv_n = 1.0 / n as f64;
        for row in out.chunks_mut(n) {
            let mut mean = S::zero();
            for &x in row.iter() {
                mean += x;
            }
            let mean = mean.scale(inv_n);
            let mut var = S::zero();
            for &x in row.iter() {
                let d = x - mean;
                var += d * d;
            }
            let inv_std = S::one() / (var.scale(inv_n) + S::from_f64(eps)).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv_std;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::LayerNorm { a, n, eps })
    }

    /// Selects entries along the first axis.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n_rows = *shape.first().ok_or_else(|| Error::shape("gather on scalar"))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(Error::shape(format!("row {bad} out of range for {n_rows}")));
        }
        let row_len: usize = shape[1..].iter().product();
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            out.extend_from_slice(&av[r * row_len..(r + 1) * row_len]);
        }
        let mut new_shape = shape;
        new_shape[0] = rows.len();
        Ok(self.push(
            out,
            new_shape,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
                row_len,
            },
        ))
    }

    /// `a[:, start..end, ...]` for `a` of shape `[B, L, ...]`.
    pub fn slice_axis1(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || start > end || end > shape[1] {
            return Err(Error::shape(format!(
                "slice {start}..{end} of axis 1 in {shape:?}"
            )));
        }
        let (batch, len) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let av = self.value(a);
        let mut out = Vec::with_capacity(batch * (end - start) * inner);
        for b in 0..batch {
            let base = b * len * inner;
            out.extend_from_slice(&av[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape;
        new_shape[1] = end - start;
        Ok(self.push(
            out,
            new_shape,
            Op::SliceAxis1 {
                a,
                batch,
                len,
                start,
                end,
                inner,
            },
        ))
    }

    /// Stacks `[B, ...]` parts into `[B, parts.len(), ...]`.
    pub fn stack_axis1(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("stack of nothing"))?;
        let s0 = self.shape(*first).to_vec();
        if parts.iter().any(|p| self.shape(*p) != s0.as_slice()) || s0.is_empty() {
            return Err(Error::shape("stack parts differ in shape"));
        }
        let batch = s0[0];
        let inner: usize = s0[1..].iter().product();
        let mut out = Vec::with_capacity(batch * parts.len() * inner);
        for b in 0..batch {
            for p in parts {
                out.extend_from_slice(&self.value(*p)[b * inner..(b + 1) * inner]);
            }
        }
        let mut shape = vec![batch, parts.len()];
        shape.extend_from_slice(&s0[1..]);
        Ok(self.push(
            out,
            shape,
            Op::StackAxis1 {
                parts: parts.to_vec(),
                batch,
                inner,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(a)
            )));
        }
        let value = self.value(a).to_vec();
        Ok(self.push(value, shape.to_vec(), Op::Reshape(a)))
    }

    /// `Σ_r weights[r] · Σ_j a[r, j]` over rows of the last axis.
    pub fn weighted_row_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let n = self.last_dim(a);
        let rows = self.value(a).len() / n.max(1);
        if weights.len() != rows {
            return Err(Error::shape(format!(
                "{} row weights for {rows} rows",
                weights.len()
            )));
        }
        let mut acc = S::zero();
        for (row, &w) in self.value(a).chunks(n).zip(&weights) {
            if w == 0.0 {
                continue;
            }
            let mut s = S::zero();
            for &x in row {
                s += x;
            }
            acc += s.scale(w);
        }
        Ok(self.push(vec![acc], vec![], Op::WeightedRowSum { a, weights, n }))
    }

    /// `Σ weight · a[flat_index]`
    pub fn pick_sum(&mut self, a: Var, picks: Vec<(usize, f64)>) -> Result<Var> {
        let len = self.value(a).len();
        if picks.iter().any(|&(i, _)| i >= len) {
            return Err(Error::shape("pick index out of range"));
        }
        let av = self.value(a);
        let mut acc = S::zero();
        for &(i, w) in &picks {
            acc += av[i].scale(w);
        }
        Ok(self.push(vec![acc], vec![], Op::PickSum { a, picks }))
    }

    /// Reverse sweep from a scalar output seeded with 1.
    pub fn backward(&self, out: Var) -> Result<Grads<S>> {
        if self.value(out).len() != 1 {
            return Err(Error::shape("backward from a non-scalar; use backward_with"));
        }
        self.backward_with(out, vec![S::one()])
    }

    /// Reverse sweep seeded with an arbitrary cotangent for `out`
    /// (vector-Jacobian product).
    pub fn backward_with(&self, out: Var, seed: Vec<S>) -> Result<Grads<S>> {
        if seed.len() != self.value(out).len() {
            return Err(Error::shape("seed does not match output"));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(out.0 + 1);
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Grads { grads })
    }

    fn propagate(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = acc(grads, *a, m * k);
                mm_bt(g, bv, ga, *m, *n, *k);
                let gb = acc(grads, *b, k * n);
                mm_at(av, g, gb, *m, *k, *n);
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                {
                    let ga = acc(grads, *a, batch * m * k);
                    for bi in 0..*batch {
                        let gb_ = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            // out = a · bᵀ, b: [n, k]  =>  ga = g · b
                            mm(gb_, bb, out, m, n, k);
                        } else {
                            mm_bt(gb_, bb, out, m, n, k);
                        }
                    }
                }
                let gb = acc(grads, *b, batch * k * n);
                for bi in 0..*batch {
                    let gb_ = &g[bi * m * n..(bi + 1) * m * n];
                    let ab = &av[bi * m * k..(bi + 1) * m * k];
                    let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                    if *trans_b {
                        // gb[n, k] = gᵀ · a
                        mm_at(gb_, ab, out, m, n, k);
                    } else {
                        mm_at(ab, gb_, out, m, k, n);
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                add_into(acc(grads, *b, g.len()), g);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                for (o, &x) in acc(grads, *b, g.len()).iter_mut().zip(g) {
                    *o -= x;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                for ((o, &x), &bb) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                    *o += x * bb;
                }
                for ((o, &x), &aa) in acc(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                    *o += x * aa;
                }
            }
            Op::AddBias { a, bias, n } => {
                add_into(acc(grads, *a, g.len()), g);
                let gb = acc(grads, *bias, *n);
                for (i, &x) in g.iter().enumerate() {
                    gb[i % n] += x;
                }
            }
            Op::Scale { a, c } => {
                for (o, &x) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *o += x.scale(*c);
                }
            }
            Op::Tanh(a) => {
                for ((o, &x), &t) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(y) {
                    *o += x * (S::one() - t * t);
                }
            }
            Op::Sigmoid(a) => {
                for ((o, &x), &s) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(y) {
                    *o += x * s * (S::one() - s);
                }
            }
            Op::Softmax { a, n } => {
                let ga = acc(grads, *a, g.len());
                for ((o, gr), yr) in ga.chunks_mut(*n).zip(g.chunks(*n)).zip(y.chunks(*n)) {
                    softmax_backward(o, gr, yr);
                }
            }
            Op::CausalSoftmax { a, l } => {
                let ga = acc(grads, *a, g.len());
                for (r, ((o, gr), yr)) in ga
                    .chunks_mut(*l)
                    .zip(g.chunks(*l))
                    .zip(y.chunks(*l))
                    .enumerate()
                {
                    let i = r % l;
                    softmax_backward(&mut o[..=i], &gr[..=i], &yr[..=i]);
                }
            }
            Op::LogSoftmax { a, n } => {
                let ga = acc(grads, *a, g.len());
                for ((o, gr), yr) in ga.chunks_mut(*n).zip(g.chunks(*n)).zip(y.chunks(*n)) {
                    let mut total = S::zero();
                    for &x in gr {
                        total += x;
                    }
                    for ((oo, &gg), &ly) in o.iter_mut().zip(gr).zip(yr) {
                        *oo += gg - ly.exp() * total;
                    }
                }
            }
            Op::LayerNorm { a, n, eps } => {
                let av = self.value(*a);
                let ga = acc(grads, *a, g.len());
                let inv_n = 1.0 / *n as f64;
                for (((o, gr), yr), xr) in ga
                    .chunks_mut(*n)
                    .zip(g.chunks(*n))
                    .zip(y.chunks(*n))
                    .zip(av.chunks(*n))
                {
                    let mut mean = S::zero();
                    for &x in xr {
                        mean += x;
                    }
                    let mean = mean.scale(inv_n);
                    let mut var = S::zero();
                    for &x in xr {
                        let d = x - mean;
                        var += d * d;
                    }
                    let inv_std = S::one() / (var.scale(inv_n) + S::from_f64(*eps)).sqrt();
                    let mut g_mean = S::zero();
                    let mut gy_mean = S::zero();
                    for (&gg, &yy) in gr.iter().zip(yr) {
                        g_mean += gg;
                        gy_mean += gg * yy;
                    }
                    let g_mean = g_mean.scale(inv_n);
                    let gy_mean = gy_mean.scale(inv_n);
                    for ((oo, &gg), &yy) in o.iter_mut().zip(gr).zip(yr) {
                        *oo += inv_std * (gg - g_mean - yy * gy_mean);
                    }
                }
            }
            Op::GatherRows { a, rows, row_len } => {
                let total = self.value(*a).len();
                let ga = acc(grads, *a, total);
                for (i, &r) in rows.iter().enumerate() {
                    add_into(
                        &mut ga[r * row_len..(r + 1) * row_len],
                        &g[i * row_len..(i + 1) * row_len],
                    );
                }
            }
            Op::SliceAxis1 {
                a,
                batch,
                len,
                start,
                end,
                inner,
            } => {
                let ga = acc(grads, *a, batch * len * inner);
                let w = (end - start) * inner;
                for b in 0..*batch {
                    let base = b * len * inner + start * inner;
                    add_into(&mut ga[base..base + w], &g[b * w..(b + 1) * w]);
                }
            }
            Op::StackAxis1 {
                parts,
                batch,
                inner,
            } => {
                let l = parts.len();
                for (pi, p) in parts.iter().enumerate() {
                    let gp = acc(grads, *p, batch * inner);
                    for b in 0..*batch {
                        let src = (b * l + pi) * inner;
                        add_into(&mut gp[b * inner..(b + 1) * inner], &g[src..src + inner]);
                    }
                }
            }
            Op::Reshape(a) => add_into(acc(grads, *a, g.len()), g),
            Op::WeightedRowSum { a, weights, n } => {
                let total = self.value(*a).len();
                let ga = acc(grads, *a, total);
                for (row, &w) in ga.chunks_mut(*n).zip(weights) {
                    if w == 0.0 {
                        continue;
                    }
                    let gw = g[0].scale(w);
                    for o in row {
                        *o += gw;
                    }
                }
            }
            Op::PickSum { a, picks } => {
                let total = self.value(*a).len();
                let ga = acc(grads, *a, total);
                for &(i, w) in picks {
                    ga[i] += g[0].scale(w);
                }
            }
        }
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out[m, n] += a[m, k] · b[k, n]`
fn mm<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
}

/// `out[m, n] += a[m, k] · b[n, k]ᵀ`
fn mm_bt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k, n] += a[m, k]ᵀ · b[m, n]`
fn mm_at<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let o = &mut out[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let mx = row.iter().map(|x| x.re()).fold(f64::NEG_INFINITY, f64::max);
    let shift = S::from_f64(mx);
    let mut s = S::zero();
    for &x in row {
        s += (x - shift).exp();
    }
    shift + s.ln()
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let mx = row.iter().map(|x| x.re()).fold(f64::NEG_INFINITY, f64::max);
    let shift = S::from_f64(mx);
    let mut s = S::zero();
    for x in row.iter_mut() {
        *x = (*x - shift).exp();
        s += *x;
    }
    let inv = S::one() / s;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

fn softmax_backward<S: Scalar>(out: &mut [S], g: &[S], y: &[S]) {
    let mut dot = S::zero();
    for (&gg, &yy) in g.iter().zip(y) {
        dot += gg * yy;
    }
    for ((o, &gg), &yy) in out.iter_mut().zip(g).zip(y) {
        *o += yy * (gg - dot);
    }
}
