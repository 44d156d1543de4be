//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use seqdistill::corpus::{gen_markov_corpus, CorpusFormat, MarkovSpec, Provenance, Split, TokenCorpus};
use seqdistill::distill::{distill, DistillConfig, InnerOptimizer, MetaStepReport, Objective, SyntheticDataset};
use seqdistill::gradcheck::{
    check_finite_differences, fresh_mean_cosine, memory_probe, oracle_cosines, regression_outer_descent,
    reversal_fidelity, GradcheckConfig, Instance, WARM_MIN_COSINE,
};
use seqdistill::memory::{self, CountingAllocator};
use seqdistill::metrics::{
    corpus_ppl, eval_student_on_corpus, eval_student_on_synthetic, perplexity, rank_metrics, sentence_ppl,
    RankInstance, StudentTraining,
};
use seqdistill::models::{Arch, ModelConfig, SeqModel};
use seqdistill::optim::ReverseOptions;
use seqdistill::par::Parallelism;
use seqdistill::trajectory::{pretrain_trajectories, PretrainConfig, TrajectoryStore};
use seqdistill::Result;

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator::new();

const STUDENT_SEEDS: [u64; 3] = [11, 12, 13];

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: String) -> Self {
        Outcome { passed, detail }
    }
}

fn max(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

fn min(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(f64::INFINITY, f64::min)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn exactness() -> Result<Outcome> {
    let cfg = GradcheckConfig {
        steps: 1,
        ..Default::default()
    };
    let start = Instant::now();
    let r = check_finite_differences(&cfg)?;
    let secs = start.elapsed().as_secs_f64();
    let sizes: Vec<usize> = (0..cfg.instances)
        .map(|i| Instance::random(cfg.seed + i as u64, true).map(|inst| inst.n_params()))
        .collect::<Result<_>>()?;
    let largest = sizes.iter().copied().max().unwrap_or(0);
    Ok(Outcome::new(
        r.passed && secs < 60.0 && largest <= 1000,
        format!(
            "max relative error {:.3e} (tol {:.0e}) over {} instances, largest model {largest} params, {secs:.2}s",
            r.worst, cfg.tol, cfg.instances
        ),
    ))
}

fn reversal() -> Result<Outcome> {
    let f = reversal_fidelity(100, 25, 1000)?;
    let worst = max(f.checkpointed.iter().map(|e| e.1));
    let curve: Vec<String> = f
        .uncorrected
        .iter()
        .map(|(step, d)| format!("{step}:{d:.2e}"))
        .collect();
    Ok(Outcome::new(
        worst <= 1e-6 && f.checkpointed.len() == 4,
        format!(
            "snapshot drift {worst:.3e} at {} snapshots; uncorrected drift {}",
            f.checkpointed.len(),
            curve.join(" ")
        ),
    ))
}

fn constant_memory() -> Result<Outcome> {
    let short = memory_probe(20, 1000)?;
    let long = memory_probe(200, 1000)?;
    let ratio = long.reverse_bytes as f64 / short.reverse_bytes as f64;
    let oracle = long.oracle_bytes as f64 / short.oracle_bytes as f64;

    let lengths = [20usize, 50, 100, 200];
    let mut secs = Vec::new();
    for &t in &lengths {
        let runs: Vec<f64> = (0..7)
            .map(|_| memory_probe(t, 1000).map(|p| p.reverse_secs))
            .collect::<Result<_>>()?;
        secs.push(median(runs));
    }
    let per_step = secs[3] / 200.0;
    let linear: Vec<f64> = lengths
        .iter()
        .zip(&secs)
        .map(|(&t, s)| s / (per_step * t as f64))
        .collect();
    let linear_ok = linear.iter().all(|r| (0.8..=1.2).contains(r));
    Ok(Outcome::new(
        memory::is_installed() && ratio <= 1.5 && oracle >= 5.0 && linear_ok,
        format!(
            "reverse peak {} -> {} bytes ({ratio:.2}x), oracle {} -> {} bytes ({oracle:.1}x), time per step relative to T=200: {}",
            short.reverse_bytes,
            long.reverse_bytes,
            short.oracle_bytes,
            long.oracle_bytes,
            linear.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(" ")
        ),
    ))
}

fn approximation() -> Result<Outcome> {
    let mut passed = true;
    let mut parts = Vec::new();
    for t in [2, 5, 10] {
        let (warm, fresh) = oracle_cosines(t, 20, 1000, &ReverseOptions::default())?;
        let w = min(warm);
        let f = fresh.iter().sum::<f64>() / fresh.len() as f64;
        passed &= w >= WARM_MIN_COSINE && f >= fresh_mean_cosine(t);
        parts.push(format!("T={t} warm min {w:.4} fresh mean {f:.3}"));
    }
    let history = regression_outer_descent(50, 10, 0.05, 1000)?;
    let rises = history.windows(2).filter(|w| w[1] > w[0]).count();
    passed &= rises <= 5 && history.last() < history.first();
    parts.push(format!(
        "convex descent {:.4} -> {:.4} with {rises} rises",
        history[0],
        history[history.len() - 1]
    ));
    Ok(Outcome::new(passed, parts.join("; ")))
}

fn metric_suite() -> Result<Outcome> {
    let mut failed = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failed.push(name.to_string());
        }
    };
    let mut perfect: Vec<f64> = (0..20).map(f64::from).collect();
    perfect[0] = 100.0;
    let r = rank_metrics(
        &[RankInstance {
            scores: perfect,
            positives: vec![0],
        }],
        &[10],
    )?;
    check("perfect ranking", r.hr[&10] == 1.0 && r.ndcg[&10] == 1.0 && r.auc == Some(1.0));

    let mut second: Vec<f64> = (0..20).map(|i| -f64::from(i)).collect();
    second.swap(0, 1);
    let r = rank_metrics(
        &[RankInstance {
            scores: second,
            positives: vec![0],
        }],
        &[10],
    )?;
    check("rank-2 nDCG@10", r.ndcg[&10] == 1.0 / 3f64.log2());

    let r = rank_metrics(
        &[RankInstance {
            scores: vec![0.25; 20],
            positives: vec![5],
        }],
        &[10],
    )?;
    check("constant scores AUC", r.auc == Some(0.5));

    check("sentence PPL 100/300", corpus_ppl(&[100.0, 300.0]) == 200.0);
    check("certain model PPL", sentence_ppl(&[0.0; 5]) == 1.0);

    let v = 2000;
    let corpus = TokenCorpus::new(
        (0..40u32).map(|i| (0..6).map(|j| (i * 37 + j * 101) % v as u32).collect()).collect(),
        Some(v),
        Provenance::File {
            path: "uniform".into(),
            format: CorpusFormat::TokensTxt,
            dropped_short: 0,
        },
        0,
    )?;
    let model = SeqModel::new(ModelConfig::new(Arch::EmbedSoftmax, v, 4, 8))?;
    let params = model.init_params();
    let (ppl, _) = perplexity(&model, &params, &corpus, Split::Train)?;
    check("uniform model PPL = V", ((ppl - v as f64) / v as f64).abs() < 1e-12);

    Ok(Outcome::new(
        failed.is_empty(),
        if failed.is_empty() {
            format!("all identities hold; uniform PPL {ppl:.10}")
        } else {
            format!("failed: {}", failed.join(", "))
        },
    ))
}

/// The shared Markov toy: V=16, order 1, 2000 training sequences.
struct Toy {
    corpus: TokenCorpus,
    model: ModelConfig,
    omega: TrajectoryStore,
    full_acc: f64,
    setup_secs: f64,
    ranks: Vec<(String, usize, usize)>,
}

impl Toy {
    fn build() -> Result<Self> {
        let start = Instant::now();
        let corpus = gen_markov_corpus(&MarkovSpec {
            seed: 7,
            vocab_size: 16,
            order: 1,
            n_sequences: 2500,
            length: 9,
            concentration: 0.3,
        })?;
        assert_eq!(corpus.splits.train.len(), 2000);
        let model = ModelConfig::new(Arch::EmbedSoftmax, 16, 8, 8);
        let omega = pretrain_trajectories(&corpus, &model, &PretrainConfig::default(), Parallelism::Rayon)?;
        let full_acc = mean_over_students(|t| eval_student_on_corpus(&model, t, &corpus, &[10]).map(|r| r.top1_acc.unwrap_or(0.0)))?;
        Ok(Toy {
            corpus,
            model,
            omega,
            full_acc,
            setup_secs: start.elapsed().as_secs_f64(),
            ranks: Vec::new(),
        })
    }

    fn config(&self, objective: Objective, inner: InnerOptimizer, outer_steps: usize) -> DistillConfig {
        DistillConfig {
            objective,
            inner,
            outer_steps,
            ..DistillConfig::default()
        }
    }

    fn run(&mut self, name: &str, cfg: DistillConfig, omega_runs: usize) -> Result<(SyntheticDataset, Vec<MetaStepReport>)> {
        let omega = self.omega.truncated(omega_runs);
        let (syn, reports) = distill(cfg, self.model.clone(), &self.corpus, Some(&omega))?;
        let rank = syn.rank_report()?;
        self.ranks.push((name.to_string(), rank.numerical_rank, rank.latent_dim));
        Ok((syn, reports))
    }

    fn accuracy(&self, syn: &SyntheticDataset) -> Result<f64> {
        mean_over_students(|t| {
            eval_student_on_synthetic(syn, &self.model, t, &self.corpus, &[10]).map(|r| r.top1_acc.unwrap_or(0.0))
        })
    }
}

fn mean_over_students(f: impl Fn(&StudentTraining) -> Result<f64>) -> Result<f64> {
    let mut total = 0.0;
    for seed in STUDENT_SEEDS {
        total += f(&StudentTraining {
            seed,
            ..StudentTraining::default()
        })?;
    }
    Ok(total / STUDENT_SEEDS.len() as f64)
}

struct EndToEnd {
    sanity: Outcome,
    ordering: Outcome,
    rank: Outcome,
    trajectories: Outcome,
}

fn end_to_end() -> Result<EndToEnd> {
    let mut toy = Toy::build()?;

    let start = Instant::now();
    let (farzi, reports) = toy.run("farzi adam", toy.config(Objective::Farzi, InnerOptimizer::Adam, 500), 20)?;
    let farzi_acc = toy.accuracy(&farzi)?;
    let total = toy.setup_secs + start.elapsed().as_secs_f64();
    let ratio = farzi_acc / toy.full_acc;
    let sanity = Outcome::new(
        ratio >= 0.9 && total < 600.0 && reports.len() == 500,
        format!(
            "distilled accuracy {farzi_acc:.4} vs full data {:.4} (ratio {ratio:.3}), meta loss {:.4} -> {:.4}, {total:.1}s",
            toy.full_acc,
            reports[0].meta_loss,
            reports[reports.len() - 1].meta_loss
        ),
    );

    let (mm_sgd, _) = toy.run("mm sgd", toy.config(Objective::Mm, InnerOptimizer::Sgd, 500), 0)?;
    let sgd_acc = toy.accuracy(&mm_sgd)?;
    let mut side = Vec::new();
    for objective in [Objective::Dc, Objective::Mtt] {
        for inner in [InnerOptimizer::Adam, InnerOptimizer::Sgd] {
            let name = format!("{objective:?} {inner:?}").to_lowercase();
            let mut cfg = toy.config(objective, inner, 50);
            cfg.real_batch = 128;
            let ok = toy.run(&name, cfg, 20).is_ok();
            side.push(format!("{name} {}", if ok { "ok" } else { "failed" }));
        }
    }
    let ordering = Outcome::new(
        farzi_acc >= sgd_acc && side.iter().all(|s| s.ends_with("ok")),
        format!("farzi adam {farzi_acc:.4} vs mm sgd {sgd_acc:.4}; {}", side.join(", ")),
    );

    let (five, _) = toy.run("farzi 5 runs", toy.config(Objective::Farzi, InnerOptimizer::Adam, 500), 5)?;
    let (zero, _) = toy.run("random init", toy.config(Objective::Mm, InnerOptimizer::Adam, 500), 0)?;
    let five_acc = toy.accuracy(&five)?;
    let zero_acc = toy.accuracy(&zero)?;
    let trajectories = Outcome::new(
        five_acc > zero_acc,
        format!("5 trajectories {five_acc:.4} vs random init {zero_acc:.4}"),
    );

    let bad: Vec<String> = toy
        .ranks
        .iter()
        .filter(|(_, r, d)| r > d)
        .map(|(n, r, d)| format!("{n} rank {r} > {d}"))
        .collect();
    let rank = Outcome::new(
        bad.is_empty(),
        if bad.is_empty() {
            format!("numerical rank <= d on all {} runs", toy.ranks.len())
        } else {
            bad.join(", ")
        },
    );
    Ok(EndToEnd {
        sanity,
        ordering,
        rank,
        trajectories,
    })
}

fn cli(dir: &Path, args: &[&str]) -> std::io::Result<Vec<u8>> {
    let out = Command::new(env!("CARGO_BIN_EXE_seqdistill"))
        .current_dir(dir)
        .args(args)
        .output()?;
    if !out.status.success() {
        return Err(std::io::Error::other(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        )));
    }
    Ok(out.stdout)
}

fn reproducibility() -> std::io::Result<Outcome> {
    let mut passes = Vec::new();
    let mut rank_ok = true;
    for _ in 0..2 {
        let dir = tempfile::TempDir::new()?;
        let d = dir.path();
        let mut stdout = Vec::new();
        stdout.extend(cli(d, &["gen-corpus", "--out", "toy.txt", "--table", "table.json", "--sequences", "600", "--seed", "5"])?);
        stdout.extend(cli(d, &["pretrain", "--corpus", "toy.txt", "--runs", "4", "--epochs", "2", "--out", "omega.ftrj"])?);
        stdout.extend(cli(
            d,
            &[
                "distill", "--corpus", "toy.txt", "--omega", "omega.ftrj", "--out", "syn.fsyn", "--report", "report.jsonl",
                "--T", "10", "--outer-steps", "20", "--real-batch", "64",
            ],
        )?);
        stdout.extend(cli(
            d,
            &["fit-eval", "--corpus", "toy.txt", "--syn", "syn.fsyn", "--steps", "50", "--out", "eval.json"],
        )?);
        stdout.extend(cli(d, &["gradcheck", "--T", "1", "--instances", "4"])?);
        let syn = SyntheticDataset::load(&d.join("syn.fsyn")).map_err(std::io::Error::other)?;
        let rank = syn.rank_report().map_err(std::io::Error::other)?;
        rank_ok &= rank.within_latent_dim();
        let mut files = Vec::new();
        for name in ["toy.txt", "table.json", "omega.ftrj", "syn.fsyn", "report.jsonl", "eval.json"] {
            files.push((name, std::fs::read(d.join(name))?));
        }
        files.push(("stdout", stdout));
        passes.push(files);
    }
    let differing: Vec<&str> = passes[0]
        .iter()
        .zip(&passes[1])
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0)
        .collect();
    let bytes: usize = passes[0].iter().map(|f| f.1.len()).sum();
    Ok(Outcome::new(
        differing.is_empty() && rank_ok,
        if differing.is_empty() {
            format!("{} artifacts ({bytes} bytes) byte-identical across reruns", passes[0].len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    ))
}

fn report(id: usize, name: &str, outcome: std::result::Result<Outcome, String>) -> bool {
    let (passed, detail) = match outcome {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("{} {id:>2} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn main() -> ExitCode {
    seqdistill::par::init_threads();
    let mut all = true;
    all &= report(1, "meta-gradient exactness at T=1", exactness().map_err(|e| e.to_string()));
    all &= report(2, "reversal fidelity", reversal().map_err(|e| e.to_string()));
    all &= report(3, "constant memory", constant_memory().map_err(|e| e.to_string()));
    all &= report(4, "approximation quality", approximation().map_err(|e| e.to_string()));
    match end_to_end() {
        Ok(e) => {
            all &= report(5, "end-to-end distillation", Ok(e.sanity));
            all &= report(6, "objective and optimizer ordering", Ok(e.ordering));
            all &= report(7, "metric identities", metric_suite().map_err(|e| e.to_string()));
            all &= report(8, "rank invariant", Ok(e.rank));
            all &= report(9, "trajectory count", Ok(e.trajectories));
        }
        Err(err) => {
            for (id, name) in [(5, "end-to-end distillation"), (6, "objective and optimizer ordering")] {
                all &= report(id, name, Err(err.to_string()));
            }
            all &= report(7, "metric identities", metric_suite().map_err(|e| e.to_string()));
            for (id, name) in [(8, "rank invariant"), (9, "trajectory count")] {
                all &= report(id, name, Err(err.to_string()));
            }
        }
    }
    all &= report(10, "reproducibility", reproducibility().map_err(|e| e.to_string()));
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
