use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use seqdistill::corpus::{gen_markov_corpus, MarkovSpec};
use seqdistill::gradcheck::Instance;
use seqdistill::models::{Arch, ModelConfig};
use seqdistill::par::Parallelism;
use seqdistill::trajectory::{pretrain_trajectories, PretrainConfig};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)];

fn finite_differences(c: &mut Criterion) {
    let inst = Instance::with_arch(7, Arch::CausalAttention1L, true).unwrap();
    let mut group = c.benchmark_group("finite_differences");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| inst.finite_differences(2, 1e-5, par).unwrap())
        });
    }
    group.finish();
}

fn pretraining(c: &mut Criterion) {
    let corpus = gen_markov_corpus(&MarkovSpec {
        seed: 7,
        vocab_size: 16,
        order: 1,
        n_sequences: 1000,
        length: 9,
        concentration: 0.3,
    })
    .unwrap();
    let model = ModelConfig::new(Arch::EmbedSoftmax, 16, 8, 8);
    let cfg = PretrainConfig {
        n_runs: 8,
        epochs: 2,
        ..Default::default()
    };
    let mut group = c.benchmark_group("pretrain_trajectories");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| pretrain_trajectories(&corpus, &model, &cfg, par).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, finite_differences, pretraining);
criterion_main!(benches);
