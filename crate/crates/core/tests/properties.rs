use proptest::prelude::*;

use seqdistill::autodiff::{hvp_param, value_and_grad};
use seqdistill::corpus::{batch_iter, gen_markov_corpus, MarkovSpec, PopularityIndex, Split};
use seqdistill::distill::SyntheticDataset;
use seqdistill::metrics::{corpus_ppl, rank_metrics, stratified_report, RankInstance};
use seqdistill::models::{Arch, HardBatch, ModelConfig, SeqModel, SoftBatch, SoftNll};
use seqdistill::optim::{adam_reverse, adam_unroll, AdamHyper, AdamState, BatchSchedule, CheckpointPolicy, ReverseOptions};
use seqdistill::toy::{random_params, random_soft_data, LinearRegression};

fn arch(i: u8) -> Arch {
    [Arch::EmbedSoftmax, Arch::CausalAttention1L, Arch::RecurrentGate][i as usize % 3]
}

fn instance() -> impl Strategy<Value = RankInstance> {
    (3usize..30).prop_flat_map(|v| {
        (
            prop::collection::vec(-5.0f64..5.0, v),
            prop::collection::btree_set(0u32..v as u32, 1..v),
        )
            .prop_map(|(scores, pos)| RankInstance {
                scores,
                positives: pos.into_iter().collect(),
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hessian_vector_products_are_symmetric(seed in 0u64..1000, a in 0u8..3) {
        let m = SeqModel::new(ModelConfig::new(arch(a), 5, 3, 5).with_seed(seed)).unwrap();
        let mut w = m.init_params();
        w.axpy(1.0, &random_params(&w, 0.5, seed + 1));
        let x = random_soft_data(2, 4, 5, 1.0, seed + 2);
        let loss = SoftNll::new(&m);
        let rows = [0usize, 1];
        let u = random_params(&w, 1.0, seed + 3);
        let v = random_params(&w, 1.0, seed + 4);
        let hu = hvp_param(&loss, &w, &x, &rows[..], &u).unwrap();
        let hv = hvp_param(&loss, &w, &x, &rows[..], &v).unwrap();
        prop_assert!((v.dot(&hu) - u.dot(&hv)).abs() <= 1e-8 * (1.0 + v.dot(&hu).abs()));
    }

    #[test]
    fn one_hot_soft_path_equals_hard_path(seed in 0u64..1000, a in 0u8..3, toks in prop::collection::vec(0u32..6, 10)) {
        let m = SeqModel::new(ModelConfig::new(arch(a), 6, 4, 5).with_seed(seed)).unwrap();
        let mut w = m.init_params();
        w.axpy(1.0, &random_params(&w, 0.5, seed));
        let hard = HardBatch::from_sequences(&[&toks[..5], &toks[5..]], 5);
        let soft = SoftBatch::one_hot(&hard, 6).unwrap();
        let a = m.soft_forward(&w, &soft).unwrap();
        let b = m.hard_forward(&w, &hard).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        prop_assert!((m.soft_nll(&w, &soft).unwrap() - m.hard_nll(&w, &hard).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn materialized_rows_are_distributions_with_bounded_rank(seed in 0u64..1000, mu in 1usize..6, xi in 2usize..6, d in 1usize..4, tau in 0.2f64..3.0) {
        let syn = SyntheticDataset::init(mu, xi, d, 7, tau, seed, None).unwrap();
        let probs = syn.materialize_all().unwrap();
        for row in probs.data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        let r = syn.rank_report().unwrap();
        prop_assert!(r.numerical_rank <= d);
        prop_assert!(r.within_latent_dim());
    }

    #[test]
    fn hit_rate_at_full_depth_is_one_and_metrics_grow_with_k(inst in instance()) {
        let v = inst.scores.len();
        let ks: Vec<usize> = (1..=v).collect();
        let r = rank_metrics(std::slice::from_ref(&inst), &ks).unwrap();
        prop_assert!((r.hr[&v] - 1.0).abs() <= 1e-12);
        for k in 1..v {
            prop_assert!(r.hr[&(k + 1)] >= r.hr[&k] - 1e-12);
            prop_assert!(r.ndcg[&(k + 1)] >= r.ndcg[&k] - 1e-12);
        }
        for k in &ks {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r.ndcg[k]));
        }
    }

    #[test]
    fn auc_ignores_monotone_transforms(inst in instance(), shift in -3.0f64..3.0) {
        let t = RankInstance {
            scores: inst.scores.iter().map(|s| (s * 0.7 + shift).exp()).collect(),
            positives: inst.positives.clone(),
        };
        let a = rank_metrics(&[inst], &[1]).unwrap().auc;
        let b = rank_metrics(&[t], &[1]).unwrap().auc;
        match (a, b) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn decile_reports_merge_to_the_global_hit_rate(insts in prop::collection::vec(
        (prop::collection::vec(-1.0f64..1.0, 12), 0u32..12).prop_map(|(scores, p)| RankInstance { scores, positives: vec![p] }), 1..40),
        counts in prop::collection::vec(0u64..50, 12)) {
        let pop = PopularityIndex::from_counts(counts);
        let global = rank_metrics(&insts, &[3]).unwrap();
        let parts = stratified_report(&insts, &pop, &[3]).unwrap();
        let merged: f64 = parts.iter().flatten().map(|r| r.hr[&3] * r.n_instances as f64).sum();
        prop_assert!((merged / insts.len() as f64 - global.hr[&3]).abs() <= 1e-12);
    }

    #[test]
    fn corpus_perplexity_ignores_sentence_order(mut ppls in prop::collection::vec(1.0f64..500.0, 1..30), seed in any::<u64>()) {
        let a = corpus_ppl(&ppls);
        use rand::seq::SliceRandom;
        ppls.shuffle(&mut seqdistill::rng::rng(seed));
        prop_assert!((corpus_ppl(&ppls) - a).abs() <= 1e-9 * a);
    }

    #[test]
    fn batches_stay_in_vocabulary(seed in 0u64..500, v in 2usize..20, bs in 1usize..40) {
        let c = gen_markov_corpus(&MarkovSpec { seed, vocab_size: v, order: 1 + (seed % 2) as usize, n_sequences: 30, length: 6, concentration: 0.5 }).unwrap();
        let it = batch_iter(&c, Split::Train, bs, 4, seed).unwrap();
        for k in 0..3 {
            let b = it.batch_at(k);
            prop_assert!(b.validate(v).is_ok());
            prop_assert_eq!(b.batch, bs);
            prop_assert_eq!(&b, &it.batch_at(k));
        }
    }

    #[test]
    fn reversal_keeps_second_moments_non_negative(seed in 0u64..1000, steps in 1usize..40) {
        let lr = LinearRegression { features: 3, ridge: 0.1 };
        let planted = random_params(&lr.params(vec![0.0; 3]).unwrap(), 1.0, seed);
        let data = lr.sample_data(6, planted.as_slice(), 0.2, seed + 1);
        let init = AdamState::new(random_params(&planted, 1.0, seed + 2));
        let h = AdamHyper::with_lr(0.05);
        let sched = BatchSchedule::new(6, 3, seed).unwrap();
        let u = adam_unroll(&init, &lr, &data, steps, &h, CheckpointPolicy::every(5), &sched).unwrap();
        let (_, dl) = value_and_grad(&lr, &u.state.w, &data, &[0usize, 1, 2, 3, 4, 5][..]).unwrap();
        let (r, drift) = adam_reverse(&u.state, &dl, &lr, &data, steps, &h, &u.checkpoints, &sched, &ReverseOptions::default()).unwrap();
        prop_assert!(drift.max() <= 1e-6);
        prop_assert!(r.dx.data().iter().all(|x| x.is_finite()));
    }
}
