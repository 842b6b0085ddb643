use dfar::attention::Variant;
use dfar::data::{temporal_split, Batch, Corpus, Example, SplitDataset, SplitMode, SplitOptions, Timeline};
use dfar::dual_interest::disentangle_loss;
use dfar::evaluation::{accumulate_head_weights, auc, predict};
use dfar::model::{active_params, batch_loss, forward, DfarParams, Heads, ModelConfig};
use dfar::params::ParamGroup;
use dfar::prediction::{bce_loss, bpr_loss, joint_loss, LossWeights};
use dfar::rng::Rng;
use dfar::synth::{synth_generate, SynthSpec};
use dfar::tensor::{AdamState, Tape, Tensor};
use dfar::train::{train, train_epoch, TrainConfig};

fn small_data(users: usize) -> (SplitDataset, usize) {
    let spec = SynthSpec {
        n_users: users,
        ..SynthSpec::default()
    };
    let corpus = Corpus::densify(&synth_generate(&spec).unwrap());
    let data = temporal_split(&corpus.interactions, SplitOptions::default()).unwrap();
    (data, corpus.items.len())
}

fn small_cfg(n_items: usize) -> ModelConfig {
    ModelConfig::new(n_items, 8, 2, 8)
}

fn mean_loss(p: &DfarParams, cfg: &ModelConfig, batch: &Batch, w: &LossWeights) -> f32 {
    batch_loss(&Tape::inference(), p, cfg, batch, w).unwrap().0.total.item().unwrap()
}

pub fn one_step_on_one_batch_reduces_loss() {
    let (data, n_items) = small_data(20);
    let cfg = small_cfg(n_items);
    let mut tcfg = TrainConfig {
        batch_size: data.train.len(),
        ..TrainConfig::default()
    };
    tcfg.adam.lr = 1e-2;
    let mut p = DfarParams::init(&cfg, 1).unwrap();
    let batch = Batch::build(&data, &data.train, cfg.max_len);
    let before = mean_loss(&p, &cfg, &batch, &tcfg.weights);
    let snapshot: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut adam = AdamState::new(tcfg.adam, &snapshot);
    let mut shuffle = Rng::stream(1, "shuffle");
    train_epoch(&mut p, &mut adam, &cfg, &data, &tcfg, &mut shuffle).unwrap();
    let after = mean_loss(&p, &cfg, &batch, &tcfg.weights);
    assert!(after < before, "{before} -> {after}");
}

pub fn same_seed_same_run() {
    let (data, n_items) = small_data(30);
    let cfg = small_cfg(n_items);
    let tcfg = TrainConfig {
        epochs: 3,
        batch_size: 32,
        seed: 5,
        ..TrainConfig::default()
    };
    let a = train(&cfg, &data, &tcfg, None).unwrap();
    let b = train(&cfg, &data, &tcfg, None).unwrap();
    assert_eq!(a.history, b.history);
    for ((n, x), (_, y)) in a.params.named().into_iter().zip(b.params.named()) {
        assert_eq!(x.data(), y.data(), "{n}");
    }
}

pub fn empty_training_set_is_an_error() {
    let (mut data, n_items) = small_data(5);
    data.train.clear();
    assert!(train(&small_cfg(n_items), &data, &TrainConfig::default(), None).is_err());
}

fn grads_by_name(tape: &Tape, bound: &DfarParams, loss: &Tensor) -> Vec<(String, Option<Vec<f32>>)> {
    let g = tape.backward(loss).unwrap();
    bound
        .named()
        .into_iter()
        .map(|(n, t)| (n, g.get(t).map(|s| s.to_vec())))
        .collect()
}

pub fn without_pairwise_loss_negative_tower_gets_no_gradient() {
    let (data, n_items) = small_data(10);
    let cfg = small_cfg(n_items);
    let p = DfarParams::init(&cfg, 3).unwrap();
    let batch = Batch::build(&data, &data.train[..16], cfg.max_len);
    for (lambda_bpr, lambda_d) in [(0.0, 1e-2), (0.0, 0.0), (1e-2, 1e-2)] {
        let w = LossWeights {
            lambda_bpr,
            lambda_d,
            lambda_reg: 1e-6,
        };
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let (parts, fwd) = batch_loss(&tape, &bound, &cfg, &batch, &w).unwrap();
        assert_eq!(fwd.logit_neg.is_some(), lambda_bpr > 0.0);
        for (name, g) in grads_by_name(&tape, &bound, &parts.total) {
            if name.starts_with("tower_neg.") {
                let nonzero = g.is_some_and(|g| g.iter().any(|&v| v != 0.0));
                assert_eq!(nonzero, lambda_bpr > 0.0, "{name} with λ_bpr = {lambda_bpr}");
            }
        }
    }
}

pub fn joint_gradient_is_weighted_sum_of_parts() {
    let (data, n_items) = small_data(10);
    let cfg = small_cfg(n_items);
    let p = DfarParams::init(&cfg, 4).unwrap();
    let batch = Batch::build(&data, &data.train[..12], cfg.max_len);
    let w = LossWeights {
        lambda_bpr: 0.3,
        lambda_d: 0.2,
        lambda_reg: 0.1,
    };
    // component index: 0 bce, 1 bpr, 2 cosine, 3 norm, 4 joint
    let grads_of = |which: usize| {
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let fwd = forward(&tape, &bound, &cfg, &batch, Heads::all()).unwrap();
        let bce = bce_loss(&tape, &fwd.logit_pos, &batch.target_labels).unwrap();
        let ln = fwd.logit_neg.as_ref().unwrap();
        let bpr = bpr_loss(&tape, &fwd.logit_pos, ln, &batch.target_labels).unwrap();
        let dis = disentangle_loss(&tape, &fwd.f_pos, fwd.f_neg.as_ref().unwrap()).unwrap();
        let params = active_params(&bound, Heads::all());
        let only = |bpr_w: f32, d_w: f32, reg_w: f32, with_bce: bool| {
            let parts = joint_loss(
                &tape,
                &bce,
                Some(&bpr),
                Some(&dis),
                &params,
                &LossWeights {
                    lambda_bpr: bpr_w,
                    lambda_d: d_w,
                    lambda_reg: reg_w,
                },
            )
            .unwrap();
            if with_bce {
                parts.total
            } else {
                tape.sub(&parts.total, &tape.mean(&bce).unwrap()).unwrap()
            }
        };
        let loss = match which {
            0 => tape.mean(&bce).unwrap(),
            1 => tape.mean(&bpr).unwrap(),
            2 => tape.mean(&dis).unwrap(),
            3 => only(0.0, 0.0, 1.0, false),
            _ => only(w.lambda_bpr, w.lambda_d, w.lambda_reg, true),
        };
        grads_by_name(&tape, &bound, &loss)
    };
    let parts: Vec<_> = (0..4).map(grads_of).collect();
    let joint = grads_of(4);
    let coef = [1.0, w.lambda_bpr, w.lambda_d, w.lambda_reg];
    for (k, (name, g)) in joint.iter().enumerate() {
        let g = g.as_ref().unwrap();
        for i in 0..g.len() {
            let expect: f32 = (0..4)
                .map(|c| parts[c][k].1.as_ref().map_or(0.0, |v| v[i]) * coef[c])
                .sum();
            assert!((g[i] - expect).abs() <= 1e-6 + 1e-4 * expect.abs(), "{name}[{i}]: {} vs {expect}", g[i]);
        }
    }
}

fn single_timeline(items: Vec<usize>, feedback: Vec<u8>) -> (SplitDataset, Vec<Example>) {
    let n = items.len();
    let tl = Timeline {
        user: 0,
        timestamps: (0..n as i64).collect(),
        items,
        feedback,
        n_train: n,
        n_validation: 0,
    };
    let ex = vec![Example {
        timeline: 0,
        prefix_end: n - 1,
        target: n - 1,
    }];
    let data = SplitDataset {
        timelines: vec![tl],
        train: ex.clone(),
        validation: vec![],
        test: vec![],
        short_users: 0,
        mode: SplitMode::LastTwoDays,
    };
    (data, ex)
}

pub fn sequence_without_negatives_is_safe() {
    let (data, ex) = single_timeline(vec![1, 2, 3, 4], vec![1, 1, 1, 0]);
    let cfg = ModelConfig::new(5, 8, 2, 6);
    let p = DfarParams::init(&cfg, 2).unwrap();
    let batch = Batch::build(&data, &ex, cfg.max_len);
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let (parts, fwd) = batch_loss(&tape, &bound, &cfg, &batch, &LossWeights::default()).unwrap();
    assert!(fwd.f_neg.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(parts.disentangle, Some(0.0));
    for (name, g) in grads_by_name(&tape, &bound, &parts.total) {
        if let Some(g) = g {
            assert!(g.iter().all(|v| v.is_finite()), "{name}");
        }
    }
}

pub fn head_weights_conserve_softmax_mass() {
    let (data, n_items) = small_data(20);
    let cfg = small_cfg(n_items);
    let p = DfarParams::init(&cfg, 6).unwrap();
    let hw = accumulate_head_weights(&p, &cfg, &data, &data.validation, 64).unwrap();
    assert!(hw.raw.iter().all(|&v| v >= 0.0));
    for h1 in 0..cfg.heads {
        let mass: f64 = (0..cfg.heads).map(|h2| hw.get(h1, h2)).sum();
        assert!((mass - hw.rows[h1] as f64).abs() < 1e-4, "head {h1}: {mass} vs {}", hw.rows[h1]);
    }
    let mut mha = cfg;
    mha.variant = Variant::Mha;
    assert!(accumulate_head_weights(&p, &mha, &data, &data.validation, 64).is_err());
}

pub fn positive_only_sequence_puts_all_mass_in_positive_block() {
    let (data, ex) = single_timeline(vec![1, 2, 3, 4], vec![1, 1, 1, 1]);
    let cfg = ModelConfig::new(5, 4, 2, 5);
    let p = DfarParams::init(&cfg, 2).unwrap();
    let hw = accumulate_head_weights(&p, &cfg, &data, &ex, 8).unwrap();
    assert_eq!(hw.get(0, 0), 0.0);
    assert_eq!(hw.get(0, 1), 0.0);
    assert_eq!(hw.get(1, 0), 0.0);
    assert!((hw.get(1, 1) - 3.0).abs() < 1e-5);
}

pub fn every_ablation_arm_trains() {
    let (data, n_items) = small_data(15);
    let arms: [(Variant, f32, f32); 5] = [
        (Variant::Ffha, 1e-2, 1e-2),
        (Variant::Mha, 1e-2, 1e-2),
        (Variant::Fha, 1e-2, 1e-2),
        (Variant::Ffha, 1e-2, 0.0),
        (Variant::Ffha, 0.0, 1e-2),
    ];
    for (variant, lambda_bpr, lambda_d) in arms {
        let mut cfg = small_cfg(n_items);
        cfg.variant = variant;
        let mut tcfg = TrainConfig {
            epochs: 1,
            batch_size: 64,
            ..TrainConfig::default()
        };
        tcfg.weights.lambda_bpr = lambda_bpr;
        tcfg.weights.lambda_d = lambda_d;
        let out = train(&cfg, &data, &tcfg, None).unwrap();
        let r = &out.history[0];
        assert!(r.loss.is_finite());
        assert_eq!(r.bpr.is_some(), lambda_bpr > 0.0);
        assert_eq!(r.disentangle.is_some(), lambda_d > 0.0);
    }
}

pub fn overfits_planted_corpus() {
    let (data, n_items) = small_data(40);
    let mut cfg = ModelConfig::new(n_items, 16, 2, 12);
    cfg.variant = Variant::Ffha;
    let mut tcfg = TrainConfig {
        batch_size: 32,
        ..TrainConfig::default()
    };
    tcfg.adam.lr = 1e-2;
    tcfg.weights.lambda_reg = 0.0;
    let labels: Vec<u8> = data.train.iter().map(|e| data.target_label(e)).collect();
    let mut params = DfarParams::init(&cfg, 0).unwrap();
    let snapshot: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut adam = AdamState::new(tcfg.adam, &snapshot);
    let mut shuffle = Rng::stream(0, "shuffle");
    let mut best = 0.0;
    for _ in 0..50 {
        train_epoch(&mut params, &mut adam, &cfg, &data, &tcfg, &mut shuffle).unwrap();
        let scores = predict(&params, &cfg, &data, &data.train, 256).unwrap();
        best = auc(&scores, &labels).unwrap();
        if best > 0.95 {
            break;
        }
    }
    assert!(best > 0.95, "training AUC {best}");
}
