//! Token-sequence corpora: file ingestion, Markov-chain generators with a known
//! transition table, seeded splits and padded mini-batches.

use std::fmt::Write as _;
use std::hash::Hasher;
use std::path::Path;
use std::str::FromStr;

use fnv::FnvHasher;
use log::warn;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Open01};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::HardBatch;
use crate::rng::{rng, sub_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// One sequence per line, decimal ids separated by single spaces.
    TokensTxt,
    /// One object per line with an integer array field `tokens`.
    JsonLines,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "txt" | "tokens" | "tokens_txt" => Ok(CorpusFormat::TokensTxt),
            "jsonl" | "json_lines" => Ok(CorpusFormat::JsonLines),
            other => Err(Error::config(format!("unknown corpus format {other:?}"))),
        }
    }
}

impl CorpusFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => CorpusFormat::JsonLines,
            _ => CorpusFormat::TokensTxt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Seeded 80/10/10 partition of `0..n`.
    pub fn seeded(n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng(seed));
        let n_train = n * 8 / 10;
        let n_valid = n / 10;
        let test = idx.split_off(n_train + n_valid);
        let valid = idx.split_off(n_train);
        Splits {
            train: idx,
            valid,
            test,
        }
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    File {
        path: String,
        format: CorpusFormat,
        dropped_short: usize,
    },
    Markov {
        seed: u64,
        order: usize,
        concentration: f64,
        /// Row `s` is the next-token distribution after context state `s`;
        /// for order 2 the state is `prev2 · V + prev1`.
        transitions: Vec<Vec<f64>>,
    },
    Memory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenCorpus {
    pub sequences: Vec<Vec<u32>>,
    pub vocab_size: usize,
    pub splits: Splits,
    pub provenance: Provenance,
}

impl TokenCorpus {
    /// Validates sequences and applies a seeded 80/10/10 split.
    pub fn new(
        sequences: Vec<Vec<u32>>,
        vocab_size: Option<usize>,
        provenance: Provenance,
        split_seed: u64,
    ) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Empty("corpus has no sequences".into()));
        }
        let max = sequences.iter().flatten().copied().max().unwrap_or(0) as usize;
        let vocab_size = vocab_size.unwrap_or(max + 1);
        if max >= vocab_size {
            return Err(Error::config(format!(
                "token id {max} out of range for vocabulary {vocab_size}"
            )));
        }
        if vocab_size < 2 {
            return Err(Error::config("vocabulary must have at least 2 tokens"));
        }
        if let Some(i) = sequences.iter().position(|s| s.len() < 2) {
            return Err(Error::config(format!("sequence {i} is shorter than 2 tokens")));
        }
        let splits = Splits::seeded(sequences.len(), split_seed);
        Ok(TokenCorpus {
            sequences,
            vocab_size,
            splits,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &[u32]> + '_ {
        self.splits.get(split).iter().map(|&i| self.sequences[i].as_slice())
    }

    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Canonical text form: one line per sequence, single-space separated.
    pub fn to_tokens_txt(&self) -> String {
        let mut out = String::new();
        for s in &self.sequences {
            for (i, t) in s.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write!(out, "{t}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn save_tokens_txt(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tokens_txt())?;
        Ok(())
    }

    /// 64-bit FNV-1a over the canonical text form.
    pub fn fingerprint(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(self.to_tokens_txt().as_bytes());
        h.finish()
    }
}

#[derive(Deserialize)]
struct JsonLine {
    tokens: Vec<u32>,
}

/// Parses a corpus file. Sequences shorter than two tokens are dropped with a
/// warning; their count is kept in the provenance.
pub fn load_corpus(
    path: &Path,
    format: CorpusFormat,
    vocab_size: Option<usize>,
    split_seed: u64,
) -> Result<TokenCorpus> {
    let text = std::fs::read_to_string(path)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut sequences = Vec::new();
    let mut dropped = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let seq: Vec<u32> = match format {
            CorpusFormat::TokensTxt => line
                .split(' ')
                .map(|tok| {
                    tok.parse::<u32>()
                        .map_err(|_| parse_err(line_no, format!("invalid token id {tok:?}")))
                })
                .collect::<Result<_>>()?,
            CorpusFormat::JsonLines => {
                serde_json::from_str::<JsonLine>(line)
                    .map_err(|e| parse_err(line_no, e.to_string()))?
                    .tokens
            }
        };
        if seq.len() < 2 {
            dropped += 1;
        } else {
            sequences.push(seq);
        }
    }
    if dropped > 0 {
        warn!("dropped {dropped} sequences shorter than 2 tokens from {}", path.display());
    }
    if sequences.is_empty() {
        return Err(Error::Empty(format!("no usable sequences in {}", path.display())));
    }
    TokenCorpus::new(
        sequences,
        vocab_size,
        Provenance::File {
            path: path.display().to_string(),
            format,
            dropped_short: dropped,
        },
        split_seed,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub order: usize,
    pub n_sequences: usize,
    pub length: usize,
    pub concentration: f64,
}

/// Symmetric Dirichlet sample computed in log space, so that concentrations
/// far below one do not underflow every component to zero.
fn dirichlet_row<R: Rng>(r: &mut R, k: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(r);
            let u: f64 = Open01.sample(r);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

fn sample_from<R: Rng>(r: &mut R, probs: &[f64]) -> u32 {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (probs.len() - 1) as u32
}

/// Sequences from a random order-1 or order-2 Markov chain; first tokens are uniform.
pub fn gen_markov_corpus(spec: &MarkovSpec) -> Result<TokenCorpus> {
    let MarkovSpec {
        seed,
        vocab_size: v,
        order,
        n_sequences,
        length,
        concentration,
    } = *spec;
    if !(order == 1 || order == 2) {
        return Err(Error::config("markov order must be 1 or 2"));
    }
    if v < 2 || length < 2 || n_sequences == 0 {
        return Err(Error::config("markov corpus needs V >= 2, length >= 2, n >= 1"));
    }
    if !(concentration > 0.0) {
        return Err(Error::config("dirichlet concentration must be positive"));
    }
    let mut table_rng = sub_rng(seed, 0);
    let states = v.pow(order as u32);
    let transitions: Vec<Vec<f64>> = (0..states)
        .map(|_| dirichlet_row(&mut table_rng, v, concentration))
        .collect();
    let mut r = sub_rng(seed, 1);
    let sequences = (0..n_sequences)
        .map(|_| {
            let mut s = Vec::with_capacity(length);
            for i in 0..length {
                let tok = match (order, i) {
                    (_, 0) => r.random_range(0..v as u32),
                    // an order-2 chain draws its second token from the prev2 = 0 block
                    (1, _) | (2, 1) => sample_from(&mut r, &transitions[s[i - 1] as usize]),
                    _ => {
                        let state = s[i - 2] as usize * v + s[i - 1] as usize;
                        sample_from(&mut r, &transitions[state])
                    }
                };
                s.push(tok);
            }
            s
        })
        .collect();
    TokenCorpus::new(
        sequences,
        Some(v),
        Provenance::Markov {
            seed,
            order,
            concentration,
            transitions,
        },
        sub_rng(seed, 2).random(),
    )
}

/// Endless, seeded stream of padded batches from one split.
///
/// Batch `k` depends only on `(seed, k)`. When `batch_size` exceeds the split,
/// rows are drawn with replacement; otherwise without.
pub struct BatchIter<'a> {
    corpus: &'a TokenCorpus,
    rows: &'a [usize],
    batch_size: usize,
    max_len: usize,
    seed: u64,
    k: u64,
}

pub fn batch_iter(
    corpus: &TokenCorpus,
    split: Split,
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<BatchIter<'_>> {
    let rows = corpus.splits.get(split);
    if rows.is_empty() {
        return Err(Error::Empty(format!("{split:?} split is empty")));
    }
    if batch_size == 0 || max_len < 2 {
        return Err(Error::config("batch size must be >= 1 and max_len >= 2"));
    }
    Ok(BatchIter {
        corpus,
        rows,
        batch_size,
        max_len,
        seed,
        k: 0,
    })
}

impl BatchIter<'_> {
    /// Batch `k` of the stream, without advancing it.
    pub fn batch_at(&self, k: u64) -> HardBatch {
        let mut r = sub_rng(self.seed, k);
        let n = self.rows.len();
        let picks: Vec<usize> = if self.batch_size > n {
            (0..self.batch_size).map(|_| r.random_range(0..n)).collect()
        } else {
            index::sample(&mut r, n, self.batch_size).into_vec()
        };
        let seqs: Vec<&[u32]> = picks
            .iter()
            .map(|&p| self.corpus.sequences[self.rows[p]].as_slice())
            .collect();
        HardBatch::from_sequences(&seqs, self.max_len)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = HardBatch;

    fn next(&mut self) -> Option<HardBatch> {
        let b = self.batch_at(self.k);
        self.k += 1;
        Some(b)
    }
}

/// Token interaction counts split into ten equal-sized bins, least popular first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopularityIndex {
    pub counts: Vec<u64>,
    /// Bin of each token.
    pub bins: Vec<usize>,
}

pub const N_BINS: usize = 10;

impl PopularityIndex {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let v = counts.len();
        let mut order: Vec<usize> = (0..v).collect();
        order.sort_by_key(|&i| (counts[i], i));
        let mut bins = vec![0; v];
        for (rank, &tok) in order.iter().enumerate() {
            bins[tok] = rank * N_BINS / v.max(1);
        }
        PopularityIndex { counts, bins }
    }

    pub fn from_corpus(corpus: &TokenCorpus, split: Split) -> Self {
        let mut counts = vec![0u64; corpus.vocab_size];
        for s in corpus.split(split) {
            for &t in s {
                counts[t as usize] += 1;
            }
        }
        PopularityIndex::from_counts(counts)
    }

    pub fn bin(&self, token: u32) -> usize {
        self.bins[token as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(content: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_tokens_txt() {
        let f = write("3 7 7 1\n2 0\n", ".txt");
        let c = load_corpus(f.path(), CorpusFormat::TokensTxt, None, 0).unwrap();
        assert_eq!(c.sequences[0], vec![3, 7, 7, 1]);
        assert_eq!(c.vocab_size, 8);
    }

    #[test]
    fn bad_token_names_line() {
        let f = write("1 2\n3 x\n", ".txt");
        let err = load_corpus(f.path(), CorpusFormat::TokensTxt, None, 0).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn short_sequences_dropped_and_empty_rejected() {
        let f = write("5\n1 2 3\n", ".txt");
        let c = load_corpus(f.path(), CorpusFormat::TokensTxt, None, 0).unwrap();
        assert_eq!(c.len(), 1);
        assert!(matches!(c.provenance, Provenance::File { dropped_short: 1, .. }));
        let e = write("", ".txt");
        assert!(matches!(
            load_corpus(e.path(), CorpusFormat::TokensTxt, None, 0),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn json_lines() {
        let f = write("{\"tokens\": [1, 2, 3]}\n{\"tokens\": [4, 0]}\n", ".jsonl");
        let c = load_corpus(f.path(), CorpusFormat::JsonLines, Some(10), 0).unwrap();
        assert_eq!(c.sequences, vec![vec![1, 2, 3], vec![4, 0]]);
        assert_eq!(c.vocab_size, 10);
        let bad = write("{\"tokens\": [1, 2]}\n{\"toks\": []}\n", ".jsonl");
        assert!(matches!(
            load_corpus(bad.path(), CorpusFormat::JsonLines, None, 0),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let s = Splits::seeded(100, 4);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (80, 10, 10));
        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, Splits::seeded(100, 4));
    }

    #[test]
    fn text_round_trip() {
        let spec = MarkovSpec {
            seed: 1,
            vocab_size: 12,
            order: 2,
            n_sequences: 30,
            length: 6,
            concentration: 0.5,
        };
        let c = gen_markov_corpus(&spec).unwrap();
        let f = write(&c.to_tokens_txt(), ".txt");
        let back = load_corpus(f.path(), CorpusFormat::TokensTxt, Some(12), 0).unwrap();
        assert_eq!(back.sequences, c.sequences);
        assert_eq!(back.to_tokens_txt(), c.to_tokens_txt());
    }

    #[test]
    fn markov_is_deterministic_and_rows_are_distributions() {
        let spec = MarkovSpec {
            seed: 9,
            vocab_size: 16,
            order: 1,
            n_sequences: 20,
            length: 10,
            concentration: 1e-3,
        };
        let a = gen_markov_corpus(&spec).unwrap();
        assert_eq!(a, gen_markov_corpus(&spec).unwrap());
        let Provenance::Markov { transitions, .. } = &a.provenance else {
            panic!("markov provenance")
        };
        for row in transitions {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|p| p.is_finite() && *p >= 0.0));
            // tiny concentration: nearly all mass on one token
            assert!(row.iter().cloned().fold(0.0, f64::max) > 0.9);
        }
    }

    #[test]
    fn batch_shapes_padding_and_determinism() {
        let c = TokenCorpus::new(vec![vec![3, 7], vec![1, 2, 4]], Some(8), Provenance::Memory, 0).unwrap();
        let mut c = c;
        c.splits.train = vec![0, 1];
        let b = batch_iter(&c, Split::Train, 2, 3, 5).unwrap().next().unwrap();
        assert_eq!((b.batch, b.len), (2, 3));
        assert_eq!(b.mask.iter().filter(|&&m| m).count(), 5);
        let a: Vec<_> = batch_iter(&c, Split::Train, 3, 2, 1).unwrap().take(4).collect();
        let again: Vec<_> = batch_iter(&c, Split::Train, 3, 2, 1).unwrap().take(4).collect();
        assert_eq!(a, again);
        // truncation keeps the suffix
        assert!(a.iter().all(|b| b.tokens.iter().all(|&t| t < 8)));
        let one = HardBatch::from_sequences(&[&[1, 2, 4]], 2);
        assert_eq!(one.tokens, vec![2, 4]);
    }

    #[test]
    fn popularity_bins_partition() {
        let p = PopularityIndex::from_counts((0..20).map(|i| (i * 7 % 20) as u64).collect());
        let mut sizes = [0; N_BINS];
        for &b in &p.bins {
            sizes[b] += 1;
        }
        assert!(sizes.iter().all(|&s| s == 2));
        let least = (0..20).min_by_key(|&i| p.counts[i]).unwrap();
        assert_eq!(p.bin(least as u32), 0);
    }
}
