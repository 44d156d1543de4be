//! Latent-factorized synthetic data and the bilevel distillation driver.

mod driver;

pub use driver::{
    distill, matching_loss, segment_cosine_distance, DistillConfig, Distiller, InnerOptimizer,
    MetaStepReport, Objective,
};

use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use log::warn;
use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::models::SoftBatch;
use crate::rng::sub_rng;
use crate::tensor::{Layout, ParamVector, Tensor};
use crate::trajectory::Reader;

pub const SYNTHETIC_MAGIC: &[u8; 8] = b"FARZISYN";
pub const SYNTHETIC_VERSION: u32 = 1;

/// Synthetic sequences stored as latent codes `(μ, ξ, d)` and a token decoder
/// `(d, V)`; the token distributions are `softmax(latent · decoder / τ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub latent: Tensor,
    pub decoder: Tensor,
    pub tau: f64,
}

/// Singular values of the flattened `(μ·ξ, V)` logit matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub latent_dim: usize,
    /// Descending.
    pub singular_values: Vec<f64>,
    /// Count of singular values above `1e-8` of the largest.
    pub numerical_rank: usize,
    /// Largest singular value past index `d`, relative to the largest overall.
    pub tail_ratio: f64,
}

impl RankReport {
    pub fn within_latent_dim(&self) -> bool {
        self.tail_ratio <= 1e-8
    }
}

impl SyntheticDataset {
    pub fn new(latent: Tensor, decoder: Tensor, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {tau}")));
        }
        let ls = latent.shape();
        let ds = decoder.shape();
        if ls.len() != 3 || ds.len() != 2 || ls[2] != ds[0] {
            return Err(Error::shape(format!(
                "latent {ls:?} and decoder {ds:?} do not compose"
            )));
        }
        if ls.iter().chain(ds).any(|&n| n == 0) {
            return Err(Error::shape("synthetic dimensions must be positive"));
        }
        let syn = SyntheticDataset {
            latent,
            decoder,
            tau,
        };
        if syn.latent_dim() >= (syn.n_rows() * syn.seq_len()).min(syn.vocab()) {
            warn!(
                "latent dim {} is not below min(μ·ξ, V) = {}; the factorization does not constrain rank",
                syn.latent_dim(),
                (syn.n_rows() * syn.seq_len()).min(syn.vocab())
            );
        }
        Ok(syn)
    }

    /// Seeded initialization: latent codes from `N(0, 1)`; the decoder from
    /// `embeddings` `(V, e)` when given, else from `N(0, 1/d)`.
    pub fn init(
        n_rows: usize,
        seq_len: usize,
        latent_dim: usize,
        vocab: usize,
        tau: f64,
        seed: u64,
        embeddings: Option<&Tensor>,
    ) -> Result<Self> {
        let mut r = sub_rng(seed, 0x5e);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let latent = Tensor::from_fn(&[n_rows, seq_len, latent_dim], |_| std_normal.sample(&mut r));
        let decoder = match embeddings {
            Some(e) => decoder_from_embeddings(e, latent_dim, vocab, seed)?,
            None => {
                let n = Normal::new(0.0, 1.0 / (latent_dim as f64).sqrt()).expect("positive std");
                Tensor::from_fn(&[latent_dim, vocab], |_| n.sample(&mut r))
            }
        };
        SyntheticDataset::new(latent, decoder, tau)
    }

    pub fn n_rows(&self) -> usize {
        self.latent.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.latent.shape()[1]
    }

    pub fn latent_dim(&self) -> usize {
        self.latent.shape()[2]
    }

    pub fn vocab(&self) -> usize {
        self.decoder.shape()[1]
    }

    /// Pre-softmax logits `latent · decoder / τ`, shape `(μ, ξ, V)`.
    pub fn logits(&self) -> Result<Tensor> {
        let mut z = self.latent.matmul(&self.decoder)?;
        z.data_mut().iter_mut().for_each(|x| *x /= self.tau);
        Ok(z)
    }

    /// Every synthetic sequence as a `(μ, ξ, V)` tensor of distributions.
    pub fn materialize_all(&self) -> Result<Tensor> {
        let probs = self.logits()?.softmax_last()?;
        probs.ensure_finite("materialized synthetic data")?;
        Ok(probs)
    }

    pub fn materialize(&self, rows: &[usize]) -> Result<SoftBatch> {
        if let Some(&r) = rows.iter().find(|&&r| r >= self.n_rows()) {
            return Err(Error::shape(format!("row {r} out of range for {} rows", self.n_rows())));
        }
        let all = self.materialize_all()?;
        let width = self.seq_len() * self.vocab();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&all.data()[r * width..(r + 1) * width]);
        }
        SoftBatch::full(Tensor::new(vec![rows.len(), self.seq_len(), self.vocab()], data)?)
    }

    /// Pulls a gradient on the materialized `(μ, ξ, V)` tensor back to
    /// `(∂latent, ∂decoder)`.
    pub fn backprop(&self, dprobs: &Tensor) -> Result<(Tensor, Tensor)> {
        if dprobs.shape() != [self.n_rows(), self.seq_len(), self.vocab()] {
            return Err(Error::shape(format!(
                "gradient {:?} does not match synthetic data",
                dprobs.shape()
            )));
        }
        let mut t = Tape::<f64>::new();
        let l = t.leaf_f64(self.latent.shape(), self.latent.data())?;
        let m = t.leaf_f64(self.decoder.shape(), self.decoder.data())?;
        let z = t.matmul(l, m)?;
        let z = t.scale(z, 1.0 / self.tau);
        let p = t.softmax(z);
        let grads = t.backward_with(p, dprobs.data().to_vec())?;
        let dl = Tensor::new(
            self.latent.shape().to_vec(),
            grads.get(l).map_or_else(|| vec![0.0; self.latent.len()], <[f64]>::to_vec),
        )?;
        let dm = Tensor::new(
            self.decoder.shape().to_vec(),
            grads.get(m).map_or_else(|| vec![0.0; self.decoder.len()], <[f64]>::to_vec),
        )?;
        Ok((dl, dm))
    }

    pub fn param_layout(&self) -> Arc<Layout> {
        Arc::new(
            Layout::new(vec![
                ("latent".into(), self.latent.shape().to_vec()),
                ("decoder".into(), self.decoder.shape().to_vec()),
            ])
            .expect("distinct names"),
        )
    }

    /// `(latent, decoder)` as one parameter vector.
    pub fn to_params(&self) -> ParamVector {
        let mut flat = self.latent.data().to_vec();
        flat.extend_from_slice(self.decoder.data());
        ParamVector::unflatten(self.param_layout(), flat).expect("layout matches")
    }

    pub fn with_params(&self, p: &ParamVector) -> Result<Self> {
        let layout = self.param_layout();
        if p.layout().as_ref() != layout.as_ref() {
            return Err(Error::Conformality("synthetic parameter layout".into()));
        }
        SyntheticDataset::new(p.segment_tensor(0), p.segment_tensor(1), self.tau)
    }

    pub fn rank_report(&self) -> Result<RankReport> {
        let z = self.latent.matmul(&self.decoder)?;
        let rows = self.n_rows() * self.seq_len();
        let m = DMatrix::from_row_slice(rows, self.vocab(), z.data());
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let top = sv.first().copied().unwrap_or(0.0);
        let numerical_rank = sv.iter().filter(|&&s| s > 1e-8 * top).count();
        let d = self.latent_dim();
        let tail_ratio = if top > 0.0 {
            sv.get(d).map_or(0.0, |s| s / top)
        } else {
            0.0
        };
        Ok(RankReport {
            latent_dim: d,
            singular_values: sv,
            numerical_rank,
            tail_ratio,
        })
    }

    /// Magic, version, then `μ, ξ, d, V` as `u64`, `τ`, latent and decoder as
    /// little-endian `f64`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(SYNTHETIC_MAGIC)?;
        w.write_all(&SYNTHETIC_VERSION.to_le_bytes())?;
        for n in [self.n_rows(), self.seq_len(), self.latent_dim(), self.vocab()] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        w.write_all(&self.tau.to_le_bytes())?;
        for x in self.latent.data().iter().chain(self.decoder.data()) {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader::new(&bytes);
        r.magic(SYNTHETIC_MAGIC)?;
        let version = r.u32("version")?;
        if version != SYNTHETIC_VERSION {
            return Err(Error::Version {
                found: version,
                expected: SYNTHETIC_VERSION,
            });
        }
        let mut dims = [0usize; 4];
        for (d, name) in dims.iter_mut().zip(["rows", "length", "latent dim", "vocab"]) {
            *d = r.u64(name)? as usize;
        }
        let [mu, xi, d, v] = dims;
        let tau = f64::from_le_bytes(r.take(8, "temperature")?.try_into().expect("8 bytes"));
        let latent = Tensor::new(vec![mu, xi, d], r.f64s(mu * xi * d, "latent")?)?;
        let decoder = Tensor::new(vec![d, v], r.f64s(d * v, "decoder")?)?;
        r.finish()?;
        SyntheticDataset::new(latent, decoder, tau)
    }
}

/// Decoder `(d, V)` from token embeddings `(V, e)`: the transpose when `e = d`,
/// projection onto the top `d` principal directions when `e > d`, and
/// zero-padded with small seeded noise when `e < d`.
fn decoder_from_embeddings(e: &Tensor, d: usize, vocab: usize, seed: u64) -> Result<Tensor> {
    let s = e.shape();
    if s.len() != 2 || s[0] != vocab {
        return Err(Error::Conformality(format!(
            "embedding table {s:?} does not match vocabulary {vocab}"
        )));
    }
    let width = s[1];
    let emat = DMatrix::from_row_slice(vocab, width, e.data());
    let projected: DMatrix<f64> = if width > d {
        let svd = emat.clone().svd(false, true);
        let vt = svd.v_t.expect("requested right singular vectors");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut basis = DMatrix::zeros(width, d);
        for (j, &i) in order.iter().take(d).enumerate() {
            basis.set_column(j, &vt.row(i).transpose());
        }
        &emat * basis
    } else {
        let mut r = sub_rng(seed, 0xdec);
        let n = Normal::new(0.0, 1e-2).expect("positive std");
        let mut out = DMatrix::from_fn(vocab, d, |_, _| n.sample(&mut r));
        out.view_mut((0, 0), (vocab, width)).copy_from(&emat);
        out
    };
    let mut data = Vec::with_capacity(d * vocab);
    for j in 0..d {
        data.extend(projected.column(j).iter());
    }
    Tensor::new(vec![d, vocab], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entropy(row: &[f64]) -> f64 {
        -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    #[test]
    fn zero_latent_is_uniform() {
        let syn = SyntheticDataset::new(
            Tensor::zeros(&[2, 3, 2]),
            Tensor::from_fn(&[2, 5], |i| i as f64),
            1.0,
        )
        .unwrap();
        let p = syn.materialize_all().unwrap();
        assert!(p.data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn rows_sum_to_one_and_temperature_sharpens() {
        let base = SyntheticDataset::init(3, 4, 2, 7, 0.5, 1, None).unwrap();
        let warm = SyntheticDataset { tau: 2.0, ..base.clone() };
        let (a, b) = (base.materialize_all().unwrap(), warm.materialize_all().unwrap());
        for (ra, rb) in a.data().chunks(7).zip(b.data().chunks(7)) {
            assert!((ra.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(entropy(ra) < entropy(rb));
        }
    }

    #[test]
    fn bad_temperature_rejected() {
        assert!(SyntheticDataset::new(Tensor::zeros(&[1, 1, 1]), Tensor::zeros(&[1, 2]), 0.0).is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let syn = SyntheticDataset::init(4, 2, 2, 5, 1.0, 3, None).unwrap();
        let a = syn.materialize(&[0, 1, 2, 3]).unwrap();
        let b = syn.materialize(&[2, 0, 3, 1]).unwrap();
        let w = 2 * 5;
        for (dst, src) in [2usize, 0, 3, 1].iter().enumerate() {
            assert_eq!(
                &b.probs.data()[dst * w..(dst + 1) * w],
                &a.probs.data()[src * w..(src + 1) * w]
            );
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let syn = SyntheticDataset::init(2, 3, 2, 4, 0.7, 5, None).unwrap();
        let upstream = Tensor::from_fn(&[2, 3, 4], |i| ((i * 7) % 5) as f64 - 2.0);
        let f = |s: &SyntheticDataset| -> f64 {
            let p = s.materialize_all().unwrap();
            p.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
        };
        let (dl, dm) = syn.backprop(&upstream).unwrap();
        let p = syn.to_params();
        let analytic: Vec<f64> = dl.data().iter().chain(dm.data()).copied().collect();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = p.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (f(&syn.with_params(&plus).unwrap()) - f(&syn.with_params(&minus).unwrap())) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-7, "coord {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn rank_is_bounded_by_latent_dim() {
        let syn = SyntheticDataset::init(8, 8, 4, 16, 1.0, 2, None).unwrap();
        let r = syn.rank_report().unwrap();
        assert_eq!(r.numerical_rank, 4);
        assert!(r.within_latent_dim());
    }

    #[test]
    fn file_round_trip_and_bad_magic() {
        let syn = SyntheticDataset::init(3, 4, 2, 6, 1.5, 9, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.fsyn");
        syn.save(&path).unwrap();
        assert_eq!(SyntheticDataset::load(&path).unwrap(), syn);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[3] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(SyntheticDataset::load(&path), Err(Error::Format { offset: 3, .. })));
        bytes[3] = b'Z';
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(SyntheticDataset::load(&path), Err(Error::Truncated(_))));
    }

    #[test]
    fn decoder_from_wider_embeddings_keeps_principal_geometry() {
        let e = Tensor::from_fn(&[6, 3], |i| ((i * 5) % 7) as f64 - 3.0);
        let m = decoder_from_embeddings(&e, 2, 6, 0).unwrap();
        assert_eq!(m.shape(), &[2, 6]);
        let same = decoder_from_embeddings(&e, 3, 6, 0).unwrap();
        assert_eq!(same, e.transpose2().unwrap());
    }
}
