use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use log::warn;
use serde::Serialize;
use seqdistill::corpus::{gen_markov_corpus, Provenance, Split};
use seqdistill::distill::{Distiller, InnerOptimizer, Objective, SyntheticDataset};
use seqdistill::gradcheck::run_gradcheck;
use seqdistill::metrics::{eval_student_on_corpus, eval_student_on_synthetic, MetricReport};
use seqdistill::models::Arch;
use seqdistill::optim::CheckpointPolicy;
use seqdistill::par::Parallelism;
use seqdistill::trajectory::{load_store, pretrain_trajectories, save_store};
use seqdistill::{Error, Result};

use crate::config::RunConfig;
use crate::{Failure, Resolve};

fn set<T: Clone>(slot: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *slot = v.clone();
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    /// Output token file, one sequence per line.
    #[arg(long)]
    out: PathBuf,
    /// Also write the transition table as JSON.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    concentration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Resolve for GenCorpusArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let m = &mut cfg.markov;
        set(&mut m.vocab_size, &self.vocab);
        set(&mut m.order, &self.order);
        set(&mut m.n_sequences, &self.sequences);
        set(&mut m.length, &self.length);
        set(&mut m.concentration, &self.concentration);
        set(&mut m.seed, &self.seed);
    }
}

pub fn gen_corpus(cfg: &RunConfig, a: &GenCorpusArgs) -> Result<(), Failure> {
    let corpus = gen_markov_corpus(&cfg.markov.spec())?;
    let out = cfg.output(&a.out);
    let mut w = create(&out)?;
    w.write_all(corpus.to_tokens_txt().as_bytes())?;
    w.flush()?;
    if let (Some(path), Provenance::Markov { transitions, .. }) = (&a.table, &corpus.provenance) {
        let mut t = create(&cfg.output(path))?;
        serde_json::to_writer(&mut t, transitions)?;
        t.write_all(b"\n")?;
        t.flush()?;
    }
    println!(
        "wrote {} sequences over {} tokens to {} (fingerprint {:016x})",
        corpus.len(),
        corpus.vocab_size,
        out.display(),
        corpus.fingerprint()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct CorpusArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
}

impl CorpusArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if self.corpus.is_some() {
            cfg.corpus.path = self.corpus.clone();
        }
        if self.vocab_size.is_some() {
            cfg.corpus.vocab_size = self.vocab_size;
        }
        set(&mut cfg.corpus.split_seed, &self.split_seed);
    }
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// embed, attention or recurrent.
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    model_seed: Option<u64>,
}

impl ModelArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let m = &mut cfg.model;
        set(&mut m.arch, &self.arch);
        set(&mut m.embed_dim, &self.embed_dim);
        set(&mut m.max_seq_len, &self.max_len);
        set(&mut m.dropout, &self.dropout);
        set(&mut m.seed, &self.model_seed);
    }
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Trajectory store to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train runs one after another instead of in parallel.
    #[arg(long)]
    sequential: bool,
}

impl Resolve for PretrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.corpus.apply(cfg);
        self.model.apply(cfg);
        let p = &mut cfg.pretrain;
        set(&mut p.n_runs, &self.runs);
        set(&mut p.epochs, &self.epochs);
        set(&mut p.checkpoint_every, &self.checkpoint_every);
        set(&mut p.batch_size, &self.batch_size);
        set(&mut p.hyper.lr, &self.lr);
        set(&mut p.seed, &self.seed);
    }
}

pub fn pretrain(cfg: &RunConfig, a: &PretrainArgs) -> Result<(), Failure> {
    let corpus = cfg.load_corpus()?;
    let model = cfg.model_config(corpus.vocab_size);
    model.validate()?;
    let par = if a.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Rayon
    };
    let store = pretrain_trajectories(&corpus, &model, &cfg.pretrain, par)?;
    let out = cfg.output(&a.out);
    save_store(&store, &out)?;
    println!("{:>4}  {:>20}  {:>11}  {:>10}  {:>10}", "run", "seed", "checkpoints", "initial", "final");
    for (i, t) in store.trajectories.iter().enumerate() {
        println!(
            "{i:>4}  {:>20}  {:>11}  {:>10.5}  {:>10.5}",
            t.seed,
            t.checkpoints.len(),
            t.train_losses.first().copied().unwrap_or(f64::NAN),
            t.train_losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    println!("wrote {} trajectories to {}", store.len(), out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Pretrained trajectories; required by the farzi and mtt objectives.
    #[arg(long)]
    omega: Option<PathBuf>,
    /// Use only the first this many stored trajectories.
    #[arg(long)]
    omega_runs: Option<usize>,
    /// Synthetic dataset to write.
    #[arg(long)]
    out: PathBuf,
    /// Report stream as JSON lines; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// farzi, mm, dc or mtt.
    #[arg(long)]
    objective: Option<Objective>,
    /// adam or sgd.
    #[arg(long)]
    inner: Option<InnerOptimizer>,
    /// Inner-loop steps.
    #[arg(long = "T")]
    inner_steps: Option<usize>,
    #[arg(long)]
    outer_steps: Option<usize>,
    #[arg(long)]
    real_batch: Option<usize>,
    #[arg(long)]
    syn_batch: Option<usize>,
    #[arg(long)]
    outer_lr: Option<f64>,
    #[arg(long)]
    outer_weight_decay: Option<f64>,
    #[arg(long)]
    outer_clip_norm: Option<f64>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Synthetic rows.
    #[arg(long)]
    mu: Option<usize>,
    /// Synthetic sequence length.
    #[arg(long)]
    xi: Option<usize>,
    /// Latent dimension.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Stored checkpoints spanned by a matched real segment.
    #[arg(long = "M-real")]
    m_real: Option<usize>,
    /// Synthetic steps taken to match it.
    #[arg(long = "N-syn")]
    n_syn: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Record wall time and peak heap per outer step.
    #[arg(long)]
    timings: bool,
}

impl Resolve for DistillArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.corpus.apply(cfg);
        self.model.apply(cfg);
        let d = &mut cfg.distill;
        set(&mut d.objective, &self.objective);
        set(&mut d.inner, &self.inner);
        set(&mut d.inner_steps, &self.inner_steps);
        set(&mut d.outer_steps, &self.outer_steps);
        set(&mut d.real_batch, &self.real_batch);
        set(&mut d.syn_batch, &self.syn_batch);
        set(&mut d.outer_lr, &self.outer_lr);
        set(&mut d.outer_weight_decay, &self.outer_weight_decay);
        set(&mut d.outer_clip_norm, &self.outer_clip_norm);
        if let Some(lr) = self.inner_lr {
            d.adam.lr = lr;
            d.sgd.lr = lr;
        }
        set(&mut d.sgd.momentum, &self.momentum);
        set(&mut d.n_rows, &self.mu);
        set(&mut d.seq_len, &self.xi);
        set(&mut d.latent_dim, &self.d);
        set(&mut d.tau, &self.tau);
        set(&mut d.mtt_real_steps, &self.m_real);
        set(&mut d.mtt_syn_steps, &self.n_syn);
        if let Some(c) = self.checkpoint_every {
            d.checkpoint = CheckpointPolicy::every(c);
        }
        set(&mut d.eval_every, &self.eval_every);
        set(&mut d.seed, &self.seed);
        d.record_timings |= self.timings;
    }
}

pub fn distill(cfg: &RunConfig, a: &DistillArgs) -> Result<(), Failure> {
    let corpus = cfg.load_corpus()?;
    let omega = match &a.omega {
        Some(path) => {
            let store = load_store(path, Some(corpus.fingerprint()))?;
            Some(match a.omega_runs {
                Some(n) => store.truncated(n),
                None => store,
            })
        }
        None => None,
    };
    let model = match omega.as_ref().and_then(|o| o.model_config()) {
        Some(m) => m.clone(),
        None => cfg.model_config(corpus.vocab_size),
    };
    let out = cfg.output(&a.out);
    let mut report: Box<dyn Write> = match &a.report {
        Some(p) => Box::new(create(&cfg.output(p))?),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    let mut d = Distiller::new(cfg.distill.clone(), model, &corpus, omega.as_ref())?;
    for _ in 0..cfg.distill.outer_steps {
        match d.step() {
            Ok(r) => {
                serde_json::to_writer(&mut report, &r)?;
                report.write_all(b"\n")?;
            }
            Err(e) => {
                report.flush()?;
                let partial = out.with_extension("partial");
                d.syn().save(&partial)?;
                eprintln!(
                    "outer step {} failed; synthetic data after {} completed steps saved to {}",
                    d.steps_done(),
                    d.steps_done(),
                    partial.display()
                );
                return Err(e.into());
            }
        }
    }
    report.flush()?;
    d.syn().save(&out)?;
    let rank = d.syn().rank_report()?;
    if !rank.within_latent_dim() {
        warn!("materialized logits exceed the latent rank: {rank:?}");
    }
    eprintln!("wrote synthetic data to {} (logit rank {})", out.display(), rank.numerical_rank);
    Ok(())
}

#[derive(Args, Debug)]
pub struct FitEvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Synthetic dataset to train on.
    #[arg(long, conflicts_with = "data")]
    syn: Option<PathBuf>,
    /// Train on real data instead: `full`.
    #[arg(long, value_parser = ["full"])]
    data: Option<String>,
    /// Student architecture; defaults to the model architecture.
    #[arg(long)]
    student: Option<Arch>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    select_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cutoffs for HR and nDCG; values above the vocabulary are dropped.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Write the metric record as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the JSON record instead of the table.
    #[arg(long)]
    json: bool,
}

impl Resolve for FitEvalArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.corpus.apply(cfg);
        self.model.apply(cfg);
        let s = &mut cfg.student;
        if self.student.is_some() {
            s.arch = self.student;
        }
        set(&mut s.steps, &self.steps);
        set(&mut s.lr, &self.lr);
        set(&mut s.batch_size, &self.batch_size);
        set(&mut s.select_every, &self.select_every);
        set(&mut s.seed, &self.seed);
        set(&mut s.ks, &self.ks);
    }
}

#[derive(Serialize)]
struct EvalRecord {
    data: String,
    student: Arch,
    train_sequences: usize,
    report: MetricReport,
}

fn render(rec: &EvalRecord) -> String {
    let mut head = format!("{:<24} {:<20} {:>8}", "data", "student", "train");
    let r = &rec.report;
    let mut row = format!("{:<24} {:<20} {:>8}", rec.data, format!("{:?}", rec.student), rec.train_sequences);
    for (k, v) in &r.hr {
        head += &format!(" {:>9}", format!("HR@{k}"));
        row += &format!(" {v:>9.4}");
    }
    for (k, v) in &r.ndcg {
        head += &format!(" {:>9}", format!("nDCG@{k}"));
        row += &format!(" {v:>9.4}");
    }
    let opt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    head += &format!(" {:>9} {:>9} {:>9}", "AUC", "PPL", "acc");
    row += &format!(" {:>9} {:>9} {:>9}", opt(r.auc), opt(r.ppl), opt(r.top1_acc));
    format!("{head}\n{row}\n")
}

pub fn fit_eval(cfg: &RunConfig, a: &FitEvalArgs) -> Result<(), Failure> {
    let corpus = cfg.load_corpus()?;
    let v = corpus.vocab_size;
    let ks: Vec<usize> = cfg.student.ks.iter().copied().filter(|&k| k >= 1 && k <= v).collect();
    if ks.len() < cfg.student.ks.len() {
        warn!("dropping cutoffs above the {v} items");
    }
    if ks.is_empty() {
        return Err(Error::Config(format!("no ranking cutoff fits within V = {v}")).into());
    }
    let student = cfg.student_config(v);
    let training = cfg.student.training();
    let rec = match (&a.syn, a.data.as_deref()) {
        (Some(path), _) => {
            let syn = SyntheticDataset::load(path)?;
            if syn.vocab() != v {
                return Err(Error::Conformality(format!(
                    "synthetic data has V = {} but the corpus has V = {v}",
                    syn.vocab()
                ))
                .into());
            }
            EvalRecord {
                data: path.file_name().map_or_else(|| "syn".into(), |n| n.to_string_lossy().into_owned()),
                student: student.arch,
                train_sequences: syn.n_rows(),
                report: eval_student_on_synthetic(&syn, &student, &training, &corpus, &ks)?,
            }
        }
        (None, Some(_)) => EvalRecord {
            data: "full".into(),
            student: student.arch,
            train_sequences: corpus.splits.get(Split::Train).len(),
            report: eval_student_on_corpus(&student, &training, &corpus, &ks)?,
        },
        (None, None) => return Err(Error::Config("pass --syn PATH or --data full".into()).into()),
    };
    let json = serde_json::to_string(&rec)?;
    if let Some(path) = &a.out {
        let mut w = create(&cfg.output(path))?;
        writeln!(w, "{json}")?;
        w.flush()?;
    }
    if a.json {
        println!("{json}");
    } else {
        print!("{}", render(&rec));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Longest unroll checked; 1 runs only the finite-difference check.
    #[arg(long = "T")]
    steps: Option<usize>,
    /// Relative tolerance of the finite-difference check.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, hide = true)]
    flip_moment_adjoint: bool,
}

impl Resolve for GradcheckArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let g = &mut cfg.gradcheck;
        set(&mut g.steps, &self.steps);
        set(&mut g.tol, &self.tol);
        set(&mut g.instances, &self.instances);
        set(&mut g.seed, &self.seed);
        g.flip_moment_adjoint |= self.flip_moment_adjoint;
    }
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), Failure> {
    let report = run_gradcheck(&cfg.gradcheck)?;
    for c in &report.checks {
        println!(
            "{}  {:<42} worst {:>12.5e}  threshold {:>9.2e}  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.worst,
            c.threshold,
            c.detail
        );
    }
    let failed: Vec<String> = report
        .failures()
        .map(|c| format!("{}: {:.5e} against {:.2e}", c.name, c.worst, c.threshold))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Gradcheck(failed.join("; ")))
    }
}
