//! Ranking and language-modelling metrics, and the protocols that train a
//! fresh student and score it on held-out real sequences.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{batch_iter, PopularityIndex, Split, TokenCorpus, N_BINS};
use crate::distill::SyntheticDataset;
use crate::error::{Error, Result};
use crate::models::{hard_nll_grad, HardBatch, ModelConfig, SeqModel, SoftNll};
use crate::optim::{adam_step, adam_unroll, AdamHyper, AdamState, BatchSchedule, CheckpointPolicy};
use crate::par::Parallelism;
use crate::rng::mix;
use crate::tensor::{log_sum_exp, ParamVector};

#[derive(Clone, Debug, PartialEq)]
pub struct RankInstance {
    /// One score per item.
    pub scores: Vec<f64>,
    pub positives: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub auc: Option<f64>,
    pub ppl: Option<f64>,
    pub top1_acc: Option<f64>,
    pub n_instances: usize,
    /// Instances whose positives cover every item, so AUC is undefined.
    #[serde(default)]
    pub auc_excluded: usize,
}

/// Items by descending score, ties broken by ascending id.
pub fn ranking(scores: &[f64]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    order
}

struct InstanceScores {
    hr: Vec<f64>,
    ndcg: Vec<f64>,
    auc: Option<f64>,
}

fn score_instance(inst: &RankInstance, ks: &[usize]) -> InstanceScores {
    let v = inst.scores.len();
    let mut is_pos = vec![false; v];
    for &p in &inst.positives {
        is_pos[p as usize] = true;
    }
    let n_pos = is_pos.iter().filter(|&&p| p).count();
    let order = ranking(&inst.scores);
    let mut rank_of = vec![0usize; v];
    for (r, &item) in order.iter().enumerate() {
        rank_of[item as usize] = r + 1;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let mut hr = Vec::with_capacity(ks.len());
    let mut ndcg = Vec::with_capacity(ks.len());
    for &k in ks {
        let hits: Vec<usize> = (0..v).filter(|&i| is_pos[i] && rank_of[i] <= k).collect();
        hr.push(hits.len() as f64 / n_pos as f64);
        let dcg: f64 = hits.iter().map(|&i| discount(rank_of[i])).sum();
        let idcg: f64 = (1..=n_pos).map(discount).sum();
        ndcg.push(dcg / idcg);
    }
    let n_neg = v - n_pos;
    let auc = (n_neg > 0).then(|| {
        let mut total = 0.0;
        for p in (0..v).filter(|&i| is_pos[i]) {
            for n in (0..v).filter(|&i| !is_pos[i]) {
                let (sp, sn) = (inst.scores[p], inst.scores[n]);
                total += if sp > sn {
                    1.0
                } else if sp == sn {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / (n_pos * n_neg) as f64
    });
    InstanceScores { hr, ndcg, auc }
}

fn validate_ks(ks: &[usize], v: usize) -> Result<()> {
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] == 0 {
        return Err(Error::config("ks must be non-empty, positive and strictly increasing"));
    }
    if *ks.last().expect("non-empty") > v {
        return Err(Error::config(format!("k = {} exceeds the {v} items", ks.last().unwrap())));
    }
    Ok(())
}

/// HR@k, nDCG@k and AUC averaged over instances.
pub fn rank_metrics(instances: &[RankInstance], ks: &[usize]) -> Result<MetricReport> {
    let Some(first) = instances.first() else {
        return Err(Error::Empty("no rank instances".into()));
    };
    let v = first.scores.len();
    validate_ks(ks, v)?;
    for inst in instances {
        if inst.scores.len() != v {
            return Err(Error::shape("rank instances disagree on item count"));
        }
        if inst.positives.is_empty() || inst.positives.iter().any(|&p| p as usize >= v) {
            return Err(Error::config("positive set must be non-empty and within range"));
        }
    }
    let per = Parallelism::Rayon.map(instances, |i| score_instance(i, ks));
    let n = per.len() as f64;
    let mut report = MetricReport {
        n_instances: per.len(),
        ..Default::default()
    };
    for (j, &k) in ks.iter().enumerate() {
        report.hr.insert(k, per.iter().map(|s| s.hr[j]).sum::<f64>() / n);
        report.ndcg.insert(k, per.iter().map(|s| s.ndcg[j]).sum::<f64>() / n);
    }
    let aucs: Vec<f64> = per.iter().filter_map(|s| s.auc).collect();
    report.auc_excluded = per.len() - aucs.len();
    if !aucs.is_empty() {
        report.auc = Some(aucs.iter().sum::<f64>() / aucs.len() as f64);
    }
    Ok(report)
}

/// `2^(−mean log₂ p)`; any zero-probability token gives `+∞`.
pub fn sentence_ppl(log2_probs: &[f64]) -> f64 {
    if log2_probs.contains(&f64::NEG_INFINITY) {
        return f64::INFINITY;
    }
    let mean = log2_probs.iter().sum::<f64>() / log2_probs.len() as f64;
    (-mean).exp2()
}

/// Arithmetic mean of sentence perplexities.
pub fn corpus_ppl(sentence_ppls: &[f64]) -> f64 {
    sentence_ppls.iter().sum::<f64>() / sentence_ppls.len() as f64
}

struct SentenceEval {
    log2_probs: Vec<f64>,
    correct: usize,
    last_scores: Vec<f64>,
    last_token: u32,
}

fn eval_sentence(model: &SeqModel, params: &ParamVector, seq: &[u32]) -> Result<SentenceEval> {
    let window = model.config().max_seq_len + 1;
    let seq = &seq[seq.len().saturating_sub(window)..];
    let batch = HardBatch::from_sequences(&[seq], seq.len());
    let logits = model.hard_forward(params, &batch)?;
    let v = model.vocab();
    let mut log2_probs = Vec::with_capacity(seq.len() - 1);
    let mut correct = 0;
    for (i, row) in logits.data().chunks(v).enumerate() {
        let target = seq[i + 1] as usize;
        let lse = log_sum_exp(row);
        log2_probs.push((row[target] - lse) / std::f64::consts::LN_2);
        if ranking(row)[0] as usize == target {
            correct += 1;
        }
    }
    let last_scores = logits.data()[logits.len() - v..].to_vec();
    Ok(SentenceEval {
        log2_probs,
        correct,
        last_scores,
        last_token: seq[seq.len() - 1],
    })
}

fn split_evals(
    model: &SeqModel,
    params: &ParamVector,
    corpus: &TokenCorpus,
    split: Split,
) -> Result<Vec<SentenceEval>> {
    if model.vocab() != corpus.vocab_size {
        return Err(Error::Conformality(format!(
            "model vocabulary {} does not match corpus vocabulary {}",
            model.vocab(),
            corpus.vocab_size
        )));
    }
    let seqs: Vec<&[u32]> = corpus.split(split).collect();
    if seqs.is_empty() {
        return Err(Error::Empty(format!("{split:?} split is empty")));
    }
    Parallelism::Rayon
        .map(&seqs, |s| eval_sentence(model, params, s))
        .into_iter()
        .collect()
}

/// Corpus perplexity and greedy next-token accuracy over every position.
pub fn perplexity(
    model: &SeqModel,
    params: &ParamVector,
    corpus: &TokenCorpus,
    split: Split,
) -> Result<(f64, f64)> {
    let evals = split_evals(model, params, corpus, split)?;
    Ok(ppl_and_acc(&evals))
}

fn ppl_and_acc(evals: &[SentenceEval]) -> (f64, f64) {
    let ppls: Vec<f64> = evals.iter().map(|e| sentence_ppl(&e.log2_probs)).collect();
    let positions: usize = evals.iter().map(|e| e.log2_probs.len()).sum();
    let correct: usize = evals.iter().map(|e| e.correct).sum();
    (corpus_ppl(&ppls), correct as f64 / positions as f64)
}

/// Last token of each sequence is the positive; the rest is context.
pub fn eval_instances(
    model: &SeqModel,
    params: &ParamVector,
    corpus: &TokenCorpus,
    split: Split,
) -> Result<Vec<RankInstance>> {
    Ok(split_evals(model, params, corpus, split)?
        .into_iter()
        .map(|e| RankInstance {
            scores: e.last_scores,
            positives: vec![e.last_token],
        })
        .collect())
}

/// Ranking metrics on the last-token protocol plus perplexity and accuracy.
pub fn evaluate(
    model: &SeqModel,
    params: &ParamVector,
    corpus: &TokenCorpus,
    split: Split,
    ks: &[usize],
) -> Result<MetricReport> {
    let evals = split_evals(model, params, corpus, split)?;
    let (ppl, acc) = ppl_and_acc(&evals);
    let instances: Vec<RankInstance> = evals
        .into_iter()
        .map(|e| RankInstance {
            scores: e.last_scores,
            positives: vec![e.last_token],
        })
        .collect();
    let mut report = rank_metrics(&instances, ks)?;
    report.ppl = Some(ppl);
    report.top1_acc = Some(acc);
    Ok(report)
}

/// One report per popularity decile of the (first) positive item; empty deciles are `None`.
pub fn stratified_report(
    instances: &[RankInstance],
    popularity: &PopularityIndex,
    ks: &[usize],
) -> Result<Vec<Option<MetricReport>>> {
    let mut groups: Vec<Vec<RankInstance>> = vec![Vec::new(); N_BINS];
    for inst in instances {
        let p = *inst
            .positives
            .first()
            .ok_or_else(|| Error::config("rank instance without positives"))?;
        if p as usize >= popularity.bins.len() {
            return Err(Error::config("positive item missing from popularity index"));
        }
        groups[popularity.bin(p)].push(inst.clone());
    }
    groups
        .iter()
        .map(|g| if g.is_empty() { Ok(None) } else { rank_metrics(g, ks).map(Some) })
        .collect()
}

/// How a fresh student is trained before evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentTraining {
    pub hyper: AdamHyper,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Score the validation split every this many steps and keep the
    /// parameters with the lowest perplexity; 0 keeps the final parameters.
    pub select_every: usize,
}

impl Default for StudentTraining {
    fn default() -> Self {
        StudentTraining {
            hyper: AdamHyper::with_lr(0.01),
            steps: 300,
            batch_size: 64,
            seed: 0,
            select_every: 25,
        }
    }
}

/// Runs `steps` optimizer steps in chunks, keeping the chunk end with the best
/// validation perplexity when selection is enabled.
fn train_with_selection<F>(
    model: &SeqModel,
    init: ParamVector,
    training: &StudentTraining,
    valid: Option<&TokenCorpus>,
    mut advance: F,
) -> Result<ParamVector>
where
    F: FnMut(AdamState, usize) -> Result<AdamState>,
{
    let mut state = AdamState::new(init);
    let every = match valid {
        Some(_) if training.select_every > 0 => training.select_every,
        _ => training.steps.max(1),
    };
    let mut best: Option<(f64, ParamVector)> = None;
    let mut done = 0;
    while done < training.steps {
        let n = every.min(training.steps - done);
        state = advance(state, n)?;
        done += n;
        if let (Some(corpus), true) = (valid, training.select_every > 0) {
            let (ppl, _) = perplexity(model, &state.w, corpus, Split::Valid)?;
            if best.as_ref().is_none_or(|(b, _)| ppl < *b) {
                best = Some((ppl, state.w.clone()));
            }
        }
    }
    Ok(best.map_or(state.w, |(_, w)| w))
}

fn student_model(student: &ModelConfig, training: &StudentTraining) -> Result<SeqModel> {
    let mut cfg = student.clone();
    cfg.seed = mix(training.seed, 0x57);
    SeqModel::new(cfg)
}

/// Trains a student from scratch on the materialized synthetic data with the
/// soft next-token loss. `valid`, when given, supplies the validation split
/// used for checkpoint selection.
pub fn train_student_on_synthetic(
    syn: &SyntheticDataset,
    student: &ModelConfig,
    training: &StudentTraining,
    valid: Option<&TokenCorpus>,
) -> Result<(SeqModel, ParamVector)> {
    if student.vocab_size != syn.vocab() {
        return Err(Error::Conformality(format!(
            "student vocabulary {} does not match synthetic data vocabulary {}",
            student.vocab_size,
            syn.vocab()
        )));
    }
    if syn.seq_len() > student.max_seq_len + 1 {
        return Err(Error::Conformality(format!(
            "synthetic length {} exceeds student context {}",
            syn.seq_len(),
            student.max_seq_len
        )));
    }
    let model = student_model(student, training)?;
    let data = syn.materialize_all()?;
    let schedule = BatchSchedule::new(syn.n_rows(), training.batch_size, mix(training.seed, 1))?;
    let loss = SoftNll::new(&model);
    let params = train_with_selection(&model, model.init_params(), training, valid, |state, n| {
        adam_unroll(
            &state,
            &loss,
            &data,
            n,
            &training.hyper,
            CheckpointPolicy::NONE,
            &schedule,
        )
        .map(|u| u.state)
    })?;
    Ok((model, params))
}

pub fn eval_student_on_synthetic(
    syn: &SyntheticDataset,
    student: &ModelConfig,
    training: &StudentTraining,
    corpus: &TokenCorpus,
    ks: &[usize],
) -> Result<MetricReport> {
    let (model, params) = train_student_on_synthetic(syn, student, training, Some(corpus))?;
    evaluate(&model, &params, corpus, Split::Test, ks)
}

/// Trains a student on real training sequences, with dropout as configured.
pub fn train_student_on_corpus(
    student: &ModelConfig,
    training: &StudentTraining,
    corpus: &TokenCorpus,
) -> Result<(SeqModel, ParamVector)> {
    let model = student_model(student, training)?;
    let batches = batch_iter(
        corpus,
        Split::Train,
        training.batch_size,
        student.max_seq_len + 1,
        mix(training.seed, 1),
    )?;
    let dropout = mix(training.seed, 2);
    let params = train_with_selection(&model, model.init_params(), training, Some(corpus), |mut state, n| {
        for _ in 0..n {
            let k = state.t as u64;
            let g = hard_nll_grad(&model, &state.w, &batches.batch_at(k), Some(mix(dropout, k)))
                .map_err(|e| Error::NumericFailure {
                    step: state.t + 1,
                    message: e.to_string(),
                })?;
            state = adam_step(&state, &g, &training.hyper)?;
        }
        Ok(state)
    })?;
    Ok((model, params))
}

pub fn eval_student_on_corpus(
    student: &ModelConfig,
    training: &StudentTraining,
    corpus: &TokenCorpus,
    ks: &[usize],
) -> Result<MetricReport> {
    let (model, params) = train_student_on_corpus(student, training, corpus)?;
    evaluate(&model, &params, corpus, Split::Test, ks)
}
