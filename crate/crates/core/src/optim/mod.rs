//! Inner-loop optimisers and their reverse passes.

mod adam;
mod sgd;

pub use adam::{
    adam_reverse, adam_step, adam_unroll, AdamHyper, AdamState, ReverseOptions, Unrolled,
};
pub use sgd::{sgd_reverse, sgd_step, sgd_unroll, SgdHyper, SgdState, SgdUnrolled};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sub_rng;
use crate::tensor::{ParamVector, Tensor};

/// Meta-gradients of an outer objective with respect to the inner loop's
/// starting point and its training data.
#[derive(Clone, Debug, PartialEq)]
pub struct ReverseResult {
    pub dw0: ParamVector,
    /// Gradient with respect to the initial first moment (momentum buffer for SGD).
    pub dm0: ParamVector,
    pub dx: Tensor,
}

/// Snapshot interval in steps; zero stores none.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPolicy {
    pub interval: usize,
}

impl CheckpointPolicy {
    pub const NONE: CheckpointPolicy = CheckpointPolicy { interval: 0 };

    pub fn every(interval: usize) -> Self {
        CheckpointPolicy { interval }
    }

    /// Whether the state after `k` local steps is stored.
    pub fn stores(&self, k: usize) -> bool {
        self.interval > 0 && k.is_multiple_of(self.interval)
    }
}

impl Default for CheckpointPolicy {
    fn default() -> Self {
        CheckpointPolicy { interval: 25 }
    }
}

/// Seeded, random-access mini-batch sampler over the rows of the synthetic data.
///
/// The rows used at step `t` depend only on `(seed, t)`, so the reverse pass can
/// request exactly the batch the forward pass saw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub n_rows: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchSchedule {
    pub fn new(n_rows: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n_rows == 0 || batch_size == 0 {
            return Err(Error::config("batch schedule needs rows and a positive batch size"));
        }
        Ok(BatchSchedule {
            n_rows,
            batch_size: batch_size.min(n_rows),
            seed,
        })
    }

    /// Every row at every step.
    pub fn full(n_rows: usize) -> Self {
        BatchSchedule {
            n_rows,
            batch_size: n_rows,
            seed: 0,
        }
    }

    pub fn rows(&self, t: usize) -> Vec<usize> {
        if self.batch_size >= self.n_rows {
            return (0..self.n_rows).collect();
        }
        let mut rng = sub_rng(self.seed, t as u64);
        let mut rows = index::sample(&mut rng, self.n_rows, self.batch_size).into_vec();
        rows.sort_unstable();
        rows
    }
}

/// Max-abs deviation of a reconstructed state from its stored snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftEntry {
    pub step: usize,
    pub w: f64,
    pub m: f64,
    pub v: f64,
}

impl DriftEntry {
    pub fn max(&self) -> f64 {
        self.w.max(self.m).max(self.v)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub entries: Vec<DriftEntry>,
}

impl DriftReport {
    pub fn max(&self) -> f64 {
        self.entries.iter().map(DriftEntry::max).fold(0.0, f64::max)
    }
}
