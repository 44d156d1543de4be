use seqdistill::corpus::{gen_markov_corpus, MarkovSpec, TokenCorpus};
use seqdistill::distill::{distill, DistillConfig, InnerOptimizer, Objective, SyntheticDataset};
use seqdistill::gradcheck::Instance;
use seqdistill::models::{Arch, HardBatch, HardNll, ModelConfig, SeqModel, SoftNll};
use seqdistill::autodiff::value_and_grad;
use seqdistill::optim::*;
use seqdistill::oracle::{central_differences, exact_adam_meta_gradient};
use seqdistill::par::Parallelism;
use seqdistill::tensor::{relative_error, Tensor};
use seqdistill::trajectory::{pretrain_trajectories, PretrainConfig};

fn concat(a: &Tensor, b: &Tensor) -> Vec<f64> {
    a.data().iter().chain(b.data()).copied().collect()
}

#[test]
fn synthetic_meta_gradient_at_one_step_matches_both_oracles() {
    for seed in 0..3u64 {
        let mut inst = Instance::random(seed, true).unwrap();
        let syn = SyntheticDataset::init(4, 6, 2, 6, 1.0, seed + 10, None).unwrap();
        inst.data = syn.materialize_all().unwrap();
        let loss = SoftNll::new(&inst.model);
        let h = Instance::hyper();

        let r = inst.reverse(1, &ReverseOptions::default()).unwrap();
        let (dl, dd) = syn.backprop(&r.dx).unwrap();
        let ours = concat(&dl, &dd);

        let ex = exact_adam_meta_gradient(&inst.init, &loss, &inst.data, 1, &h, &inst.schedule, |w| inst.meta(w)).unwrap();
        let (el, ed) = syn.backprop(&ex.dx).unwrap();
        assert!(relative_error(&ours, &concat(&el, &ed), 1e-12) <= 1e-4);

        let p = syn.to_params();
        let fd = central_differences(
            |x| {
                let s = syn.with_params(&seqdistill::tensor::ParamVector::unflatten(p.layout().clone(), x.to_vec())?)?;
                let data = s.materialize_all()?;
                let u = adam_unroll(&inst.init, &loss, &data, 1, &h, CheckpointPolicy::NONE, &inst.schedule)?;
                Ok(inst.meta(&u.state.w)?.0)
            },
            p.as_slice(),
            1e-5,
            Parallelism::Rayon,
        )
        .unwrap();
        let e = relative_error(&ours, &fd, 1e-12);
        assert!(e <= 1e-4, "seed {seed}: {e:.3e}");
    }
}

#[test]
fn identity_decoder_optimizes_one_soft_sequence() {
    let v = 4;
    let seqs: Vec<Vec<u32>> = vec![vec![0, 1, 2, 3], vec![0, 1, 2, 3], vec![0, 1, 3, 2], vec![0, 1, 2, 3]];
    let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let real = HardBatch::from_sequences(&refs, 4);
    let model = SeqModel::new(ModelConfig::new(Arch::EmbedSoftmax, v, 4, 4).with_seed(3)).unwrap();
    let identity = Tensor::from_fn(&[v, v], |i| if i / v == i % v { 1.0 } else { 0.0 });
    let mut syn = SyntheticDataset::new(Tensor::zeros(&[1, 2, v]), identity.clone(), 1.0).unwrap();
    let loss = SoftNll::new(&model);
    let h = AdamHyper::with_lr(0.1);
    let schedule = BatchSchedule::full(1);
    let init = AdamState::new(model.init_params());
    let meta = |w: &seqdistill::tensor::ParamVector| value_and_grad(&HardNll::new(&model), w, &Tensor::zeros(&[0]), &real);
    let mut history = Vec::new();
    for _ in 0..50 {
        let data = syn.materialize_all().unwrap();
        let u = adam_unroll(&init, &loss, &data, 10, &h, CheckpointPolicy::default(), &schedule).unwrap();
        let (value, dl) = meta(&u.state.w).unwrap();
        history.push(value);
        let (r, _) = adam_reverse(&u.state, &dl, &loss, &data, 10, &h, &u.checkpoints, &schedule, &ReverseOptions::default()).unwrap();
        let (dlat, _) = syn.backprop(&r.dx).unwrap();
        let mut latent = syn.latent.clone();
        for (x, g) in latent.data_mut().iter_mut().zip(dlat.data()) {
            *x -= 2.0 * g;
        }
        syn = SyntheticDataset::new(latent, identity.clone(), 1.0).unwrap();
    }
    let rises = history.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(history[49] < history[0] - 0.1, "{:.4} -> {:.4}", history[0], history[49]);
    assert!(rises <= 5, "{rises} rises");
}

fn toy() -> (TokenCorpus, ModelConfig) {
    let corpus = gen_markov_corpus(&MarkovSpec {
        seed: 7,
        vocab_size: 16,
        order: 1,
        n_sequences: 500,
        length: 9,
        concentration: 0.3,
    })
    .unwrap();
    (corpus, ModelConfig::new(Arch::EmbedSoftmax, 16, 8, 8))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn gradient_matching_halves_the_distance() {
    let (corpus, model) = toy();
    for inner in [InnerOptimizer::Adam, InnerOptimizer::Sgd] {
        let cfg = DistillConfig {
            objective: Objective::Dc,
            inner,
            inner_steps: 10,
            outer_steps: 200,
            real_batch: 128,
            ..Default::default()
        };
        let (_, reports) = distill(cfg, model.clone(), &corpus, None).unwrap();
        let losses: Vec<f64> = reports.iter().map(|r| r.meta_loss).collect();
        let late = mean(&losses[190..]);
        assert!(late <= 0.5 * losses[0], "{inner:?}: {:.3} -> {late:.3}", losses[0]);
    }
}

#[test]
fn trajectory_matching_reduces_the_matching_loss() {
    let (corpus, model) = toy();
    let omega = pretrain_trajectories(
        &corpus,
        &model,
        &PretrainConfig {
            n_runs: 3,
            epochs: 3,
            checkpoint_every: 2,
            ..Default::default()
        },
        Parallelism::Rayon,
    )
    .unwrap();
    for inner in [InnerOptimizer::Adam, InnerOptimizer::Sgd] {
        let cfg = DistillConfig {
            objective: Objective::Mtt,
            inner,
            outer_steps: 100,
            ..Default::default()
        };
        let (_, reports) = distill(cfg, model.clone(), &corpus, Some(&omega)).unwrap();
        let losses: Vec<f64> = reports.iter().map(|r| r.meta_loss).collect();
        assert!(mean(&losses[90..]) < mean(&losses[..10]), "{inner:?}: {:.4} -> {:.4}", mean(&losses[..10]), mean(&losses[90..]));
    }
}
