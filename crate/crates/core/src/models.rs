//! Tiny causal next-token models that read either hard token ids or soft
//! sequences of token distributions.
//!
//! A soft input position is embedded as `probs[i] · E`, the
//! distribution-weighted average of token embeddings. A one-hot row selects
//! exactly one embedding row, so the soft and hard paths coincide bit-for-bit.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{value_and_grad, Differentiable, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Layout, ParamVector, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Embedding followed by an output projection; a bigram model.
    EmbedSoftmax,
    /// One pre-norm single-head causal self-attention block.
    #[serde(rename = "causal_attention")]
    CausalAttention1L,
    /// Single-layer gated recurrent cell.
    RecurrentGate,
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embed" | "embed_softmax" | "bigram" => Ok(Arch::EmbedSoftmax),
            "attention" | "causal_attention" | "causal_attention1l" | "transformer" => Ok(Arch::CausalAttention1L),
            "recurrent" | "recurrent_gate" | "gru" => Ok(Arch::RecurrentGate),
            other => Err(Error::config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub arch: Arch,
    pub max_seq_len: usize,
    /// Only used when training on real token batches.
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(arch: Arch, vocab_size: usize, embed_dim: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim,
            arch,
            max_seq_len,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 1 {
            return Err(Error::config("embed_dim must be >= 1"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be >= 2"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    /// Same architecture and shapes; seeds and dropout may differ.
    pub fn conformal(&self, other: &ModelConfig) -> bool {
        self.arch == other.arch
            && self.vocab_size == other.vocab_size
            && self.embed_dim == other.embed_dim
            && self.max_seq_len == other.max_seq_len
    }
}

/// A batch of soft sequences, shape `(b, ξ, V)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftBatch {
    pub probs: Tensor,
    /// One flag per `(row, position)`.
    pub mask: Vec<bool>,
}

impl SoftBatch {
    pub fn new(probs: Tensor, mask: Vec<bool>) -> Result<Self> {
        let s = probs.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("soft batch must be (b, len, V), got {s:?}")));
        }
        let (b, l, v) = (s[0], s[1], s[2]);
        if mask.len() != b * l {
            return Err(Error::shape("soft batch mask length"));
        }
        for (row, &valid) in probs.data().chunks(v).zip(&mask) {
            if !valid {
                continue;
            }
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::shape(
                    "soft batch row is not a probability vector",
                ));
            }
        }
        Ok(SoftBatch { probs, mask })
    }

    pub fn full(probs: Tensor) -> Result<Self> {
        let n = probs.len() / probs.shape().last().copied().unwrap_or(1).max(1);
        SoftBatch::new(probs, vec![true; n])
    }

    /// One-hot encoding of a hard batch.
    pub fn one_hot(batch: &HardBatch, vocab: usize) -> Result<Self> {
        let mut data = vec![0.0; batch.tokens.len() * vocab];
        for (i, &t) in batch.tokens.iter().enumerate() {
            data[i * vocab + t as usize] = 1.0;
        }
        let probs = Tensor::new(vec![batch.batch, batch.len, vocab], data)?;
        SoftBatch::new(probs, batch.mask.clone())
    }

    pub fn batch_size(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.probs.shape()[1]
    }
}

/// A padded batch of token ids, row-major `(batch, len)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardBatch {
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl HardBatch {
    /// Left-aligned, right-padded batch from ragged sequences.
    pub fn from_sequences(seqs: &[&[u32]], len: usize) -> Self {
        let mut tokens = vec![0; seqs.len() * len];
        let mut mask = vec![false; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            let s = &s[s.len().saturating_sub(len)..];
            tokens[b * len..b * len + s.len()].copy_from_slice(s);
            mask[b * len..b * len + s.len()].iter_mut().for_each(|m| *m = true);
        }
        HardBatch {
            tokens,
            mask,
            batch: seqs.len(),
            len,
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.tokens.len() != self.batch * self.len || self.mask.len() != self.tokens.len() {
            return Err(Error::shape("hard batch dimensions"));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::shape(format!("token id {t} out of range for V={vocab}")));
        }
        Ok(())
    }

    /// Rows in the order given by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> HardBatch {
        let mut out = self.clone();
        for (dst, &src) in perm.iter().enumerate() {
            let (d, s) = (dst * self.len, src * self.len);
            out.tokens[d..d + self.len].copy_from_slice(&self.tokens[s..s + self.len]);
            out.mask[d..d + self.len].copy_from_slice(&self.mask[s..s + self.len]);
        }
        out
    }
}

/// Inverted dropout on input embeddings, seeded per call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SeqModel {
    config: ModelConfig,
    layout: Arc<Layout>,
}

impl SeqModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d, l) = (config.vocab_size, config.embed_dim, config.max_seq_len);
        let segs: Vec<(&str, Vec<usize>)> = match config.arch {
            Arch::EmbedSoftmax => vec![("embed", vec![v, d]), ("out", vec![d, v])],
            Arch::CausalAttention1L => vec![
                ("embed", vec![v, d]),
                ("pos", vec![l, d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("out", vec![d, v]),
            ],
            Arch::RecurrentGate => vec![
                ("embed", vec![v, d]),
                ("wz", vec![d, d]),
                ("uz", vec![d, d]),
                ("bz", vec![d]),
                ("wh", vec![d, d]),
                ("uh", vec![d, d]),
                ("out", vec![d, v]),
            ],
        };
        let layout = Layout::new(segs.into_iter().map(|(n, s)| (n.to_string(), s)).collect())?;
        Ok(SeqModel {
            config,
            layout: Arc::new(layout),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab_size
    }

    /// Seeded initialization: embeddings and hidden weights from
    /// `N(0, 1/embed_dim)`, gate bias zero, output projection zero.
    pub fn init_params(&self) -> ParamVector {
        self.init_params_with_seed(self.config.seed)
    }

    pub fn init_params_with_seed(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (self.config.embed_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut p = ParamVector::zeros(self.layout.clone());
        for i in 0..self.layout.n_segments() {
            let name = self.layout.name(i).to_string();
            if name == "out" || name == "bz" {
                continue;
            }
            for x in p.segment_mut(i) {
                *x = normal.sample(&mut rng);
            }
        }
        p
    }

    fn check_params(&self, params: &[Var]) -> Result<()> {
        if params.len() != self.layout.n_segments() {
            return Err(Error::shape(format!(
                "model expects {} parameter segments, got {}",
                self.layout.n_segments(),
                params.len()
            )));
        }
        Ok(())
    }

    /// Logits for hidden inputs `h` of shape `[b, L, d]`.
    fn record_body<S: Scalar>(&self, t: &mut Tape<S>, p: &[Var], h: Var) -> Result<Var> {
        let d = self.config.embed_dim;
        match self.config.arch {
            Arch::EmbedSoftmax => t.matmul(h, p[1]),
            Arch::CausalAttention1L => {
                let (b, l) = (t.shape(h)[0], t.shape(h)[1]);
                if l > self.config.max_seq_len {
                    return Err(Error::shape(format!(
                        "sequence of {l} inputs exceeds max_seq_len {}",
                        self.config.max_seq_len
                    )));
                }
                let positions: Vec<usize> = (0..l).collect();
                let pos = t.gather_rows(p[1], &positions)?;
                let h0 = t.add_bias(h, pos)?;
                let a = t.layer_norm(h0, LN_EPS);
                let q = t.matmul(a, p[2])?;
                let k = t.matmul(a, p[3])?;
                let v = t.matmul(a, p[4])?;
                let scores = t.batch_matmul(q, k, true)?;
                let scores = t.scale(scores, 1.0 / (d as f64).sqrt());
                let attn = t.causal_softmax(scores)?;
                let ctx = t.batch_matmul(attn, v, false)?;
                let o = t.matmul(ctx, p[5])?;
                let h1 = t.add(h0, o)?;
                let f = t.layer_norm(h1, LN_EPS);
                debug_assert_eq!(t.shape(f), &[b, l, d]);
                t.matmul(f, p[6])
            }
            Arch::RecurrentGate => {
                let (b, l) = (t.shape(h)[0], t.shape(h)[1]);
                let mut state = t.leaf(&[b, d], vec![S::zero(); b * d])?;
                let mut outs = Vec::with_capacity(l);
                for step in 0..l {
                    let x = t.slice_axis1(h, step, step + 1)?;
                    let x = t.reshape(x, &[b, d])?;
                    let xz = t.matmul(x, p[1])?;
                    let hz = t.matmul(state, p[2])?;
                    let z = t.add(xz, hz)?;
                    let z = t.add_bias(z, p[3])?;
                    let z = t.sigmoid(z);
                    let xh = t.matmul(x, p[4])?;
                    let hh = t.matmul(state, p[5])?;
                    let c = t.add(xh, hh)?;
                    let c = t.tanh(c);
                    let diff = t.sub(c, state)?;
                    let upd = t.mul(z, diff)?;
                    state = t.add(state, upd)?;
                    outs.push(state);
                }
                let hs = t.stack_axis1(&outs)?;
                t.matmul(hs, p[6])
            }
        }
    }

    /// Records logits `(b, ξ−1, V)` for a soft tensor `x` of shape `(b, ξ, V)`.
    pub fn record_soft_logits<S: Scalar>(
        &self,
        t: &mut Tape<S>,
        p: &[Var],
        x: Var,
    ) -> Result<Var> {
        self.check_params(p)?;
        let s = t.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.vocab() {
            return Err(Error::shape(format!(
                "soft input {s:?} does not match vocabulary {}",
                self.vocab()
            )));
        }
        if s[1] < 2 {
            return Err(Error::shape("soft sequences need at least 2 positions"));
        }
        let inp = t.slice_axis1(x, 0, s[1] - 1)?;
        let h = t.matmul(inp, p[0])?;
        self.record_body(t, p, h)
    }

    /// Records logits `(b, L−1, V)` for a hard batch.
    pub fn record_hard_logits<S: Scalar>(
        &self,
        t: &mut Tape<S>,
        p: &[Var],
        batch: &HardBatch,
        dropout: Option<Dropout>,
    ) -> Result<Var> {
        self.check_params(p)?;
        batch.validate(self.vocab())?;
        if batch.len < 2 {
            return Err(Error::shape("hard sequences need at least 2 positions"));
        }
        let l = batch.len - 1;
        let ids: Vec<usize> = (0..batch.batch)
            .flat_map(|b| (0..l).map(move |i| batch.tokens[b * batch.len + i] as usize))
            .collect();
        let rows = t.gather_rows(p[0], &ids)?;
        let mut h = t.reshape(rows, &[batch.batch, l, self.config.embed_dim])?;
        if let Some(Dropout { rate, seed }) = dropout {
            if rate > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let u = Uniform::new(0.0, 1.0).expect("unit interval");
                let keep = 1.0 / (1.0 - rate);
                let n = t.value(h).len();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if u.sample(&mut rng) < rate { 0.0 } else { keep })
                    .collect();
                let shape = t.shape(h).to_vec();
                let m = t.leaf_f64(&shape, &mask)?;
                h = t.mul(h, m)?;
            }
        }
        self.record_body(t, p, h)
    }

    fn run_logits(&self, params: &ParamVector, f: impl FnOnce(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<Tensor> {
        let mut t = Tape::<f64>::new();
        let vars = leaves(&mut t, params)?;
        let out = f(&mut t, &vars)?;
        let logits = Tensor::new(t.shape(out).to_vec(), t.value(out).to_vec())?;
        logits.ensure_finite("logits")?;
        Ok(logits)
    }

    pub fn soft_forward(&self, params: &ParamVector, batch: &SoftBatch) -> Result<Tensor> {
        self.run_logits(params, |t, vars| {
            let x = t.leaf_f64(batch.probs.shape(), batch.probs.data())?;
            self.record_soft_logits(t, vars, x)
        })
    }

    pub fn hard_forward(&self, params: &ParamVector, batch: &HardBatch) -> Result<Tensor> {
        self.run_logits(params, |t, vars| self.record_hard_logits(t, vars, batch, None))
    }

    pub fn soft_nll(&self, params: &ParamVector, batch: &SoftBatch) -> Result<f64> {
        let loss = SoftNll::with_mask(self, batch.mask.clone());
        let rows: Vec<usize> = (0..batch.batch_size()).collect();
        scalar_loss(&loss, params, &batch.probs, &rows)
    }

    pub fn hard_nll(&self, params: &ParamVector, batch: &HardBatch) -> Result<f64> {
        scalar_loss(&HardNll::new(self), params, &Tensor::zeros(&[0]), batch)
    }
}

fn leaves<S: Scalar>(t: &mut Tape<S>, params: &ParamVector) -> Result<Vec<Var>> {
    let layout = params.layout();
    (0..layout.n_segments())
        .map(|i| t.leaf_f64(layout.shape(i), params.segment(i)))
        .collect()
}

fn scalar_loss<L: Differentiable>(
    loss: &L,
    params: &ParamVector,
    data: &Tensor,
    batch: &L::Batch,
) -> Result<f64> {
    let mut t = Tape::<f64>::new();
    let vars = leaves(&mut t, params)?;
    let dv = t.leaf_f64(data.shape(), data.data())?;
    let out = loss.record(&mut t, &vars, dv, batch)?;
    let v = t.value(out)[0];
    if !v.is_finite() {
        return Err(Error::non_finite("loss"));
    }
    Ok(v)
}

/// Mean cross-entropy between next-position predictions and the soft target
/// distributions. Data is a `(n, ξ, V)` tensor; the batch selects rows.
pub struct SoftNll<'a> {
    model: &'a SeqModel,
    mask: Option<Vec<bool>>,
}

impl<'a> SoftNll<'a> {
    pub fn new(model: &'a SeqModel) -> Self {
        SoftNll { model, mask: None }
    }

    /// `mask` holds one flag per `(row, position)` of the full data tensor.
    pub fn with_mask(model: &'a SeqModel, mask: Vec<bool>) -> Self {
        SoftNll {
            model,
            mask: Some(mask),
        }
    }
}

impl Differentiable for SoftNll<'_> {
    type Batch = [usize];

    fn record<S: Scalar>(
        &self,
        t: &mut Tape<S>,
        params: &[Var],
        data: Var,
        rows: &[usize],
    ) -> Result<Var> {
        let x = t.gather_rows(data, rows)?;
        let logits = self.model.record_soft_logits(t, params, x)?;
        let xi = t.shape(x)[1];
        let l = xi - 1;
        let target = t.slice_axis1(x, 1, xi)?;
        let lp = t.log_softmax(logits);
        let prod = t.mul(lp, target)?;
        let mut weights = vec![0.0; rows.len() * l];
        let mut count = 0usize;
        for (bi, &r) in rows.iter().enumerate() {
            for i in 0..l {
                let valid = match &self.mask {
                    None => true,
                    Some(m) => m[r * xi + i] && m[r * xi + i + 1],
                };
                if valid {
                    weights[bi * l + i] = 1.0;
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::shape("soft batch has no valid prediction positions"));
        }
        let scale = -1.0 / count as f64;
        weights.iter_mut().for_each(|w| *w *= scale);
        t.weighted_row_sum(prod, weights)
    }
}

/// Mean next-token cross-entropy on hard tokens.
pub struct HardNll<'a> {
    model: &'a SeqModel,
    dropout: Option<Dropout>,
}

impl<'a> HardNll<'a> {
    pub fn new(model: &'a SeqModel) -> Self {
        HardNll {
            model,
            dropout: None,
        }
    }

    pub fn with_dropout(model: &'a SeqModel, dropout: Dropout) -> Self {
        HardNll {
            model,
            dropout: Some(dropout),
        }
    }
}

impl Differentiable for HardNll<'_> {
    type Batch = HardBatch;

    fn record<S: Scalar>(
        &self,
        t: &mut Tape<S>,
        params: &[Var],
        _data: Var,
        batch: &HardBatch,
    ) -> Result<Var> {
        let logits = self.model.record_hard_logits(t, params, batch, self.dropout)?;
        let lp = t.log_softmax(logits);
        let (l, v) = (batch.len - 1, self.model.vocab());
        let mut picks = Vec::new();
        for b in 0..batch.batch {
            for i in 0..l {
                let (cur, next) = (b * batch.len + i, b * batch.len + i + 1);
                if batch.mask[cur] && batch.mask[next] {
                    picks.push(((b * l + i) * v + batch.tokens[next] as usize, 1.0));
                }
            }
        }
        if picks.is_empty() {
            return Err(Error::shape("hard batch has no valid prediction positions"));
        }
        let scale = -1.0 / picks.len() as f64;
        picks.iter_mut().for_each(|p| p.1 = scale);
        t.pick_sum(lp, picks)
    }
}

/// Loss and parameter gradient on a hard batch. Dropout is applied when the
/// model has a positive rate and a seed is given.
pub fn hard_nll_grad(
    model: &SeqModel,
    params: &ParamVector,
    batch: &HardBatch,
    dropout_seed: Option<u64>,
) -> Result<ParamVector> {
    hard_nll_value_grad(model, params, batch, dropout_seed).map(|(_, g)| g)
}

pub fn hard_nll_value_grad(
    model: &SeqModel,
    params: &ParamVector,
    batch: &HardBatch,
    dropout_seed: Option<u64>,
) -> Result<(f64, ParamVector)> {
    let empty = Tensor::zeros(&[0]);
    let rate = model.config().dropout;
    match dropout_seed {
        Some(seed) if rate > 0.0 => {
            let loss = HardNll::with_dropout(model, Dropout { rate, seed });
            value_and_grad(&loss, params, &empty, batch)
        }
        _ => value_and_grad(&HardNll::new(model), params, &empty, batch),
    }
}

/// Trains `params` in place with Adam on hard batches; returns per-step losses.
pub fn train_hard<I>(
    model: &SeqModel,
    params: &mut ParamVector,
    batches: I,
    hyper: &crate::optim::AdamHyper,
    dropout_seed: Option<u64>,
) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = HardBatch>,
{
    use crate::optim::AdamState;
    let mut state = AdamState::new(params.clone());
    let mut losses = Vec::new();
    for (step, batch) in batches.into_iter().enumerate() {
        let seed = dropout_seed.map(|s| crate::rng::mix(s, step as u64));
        let (loss, grad) =
            hard_nll_value_grad(model, &state.w, &batch, seed).map_err(|e| Error::NumericFailure {
                step,
                message: e.to_string(),
            })?;
        state = crate::optim::adam_step(&state, &grad, hyper)?;
        losses.push(loss);
    }
    *params = state.w;
    Ok(losses)
}
