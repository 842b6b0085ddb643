use super::common::{gradient_error, gradient_mismatch, project};
use dfar::attention::{encode, AttentionConfig, AttentionWeights, MaskMode, Variant};
use dfar::data::{Batch, Example, SplitDataset, SplitMode, Timeline};
use dfar::dual_interest::{aggregate, disentangle_loss, target_scores, TargetMlp};
use dfar::model::{batch_loss, DfarParams, ModelConfig};
use dfar::params::{uniform, ParamGroup};
use dfar::prediction::{bce_loss, bpr_loss, joint_loss, tower_logit, LossWeights, Tower, TowerInputs};
use dfar::rng::Rng;
use dfar::tensor::Tensor;

const H: f32 = 1e-3;
const TOL: f64 = 1e-2;

fn rand(rng: &mut Rng, shape: &[usize], scale: f32) -> Tensor {
    uniform(rng, shape, scale)
}

pub fn matmul_random() {
    let mut rng = Rng::new(11);
    let a = rand(&mut rng, &[3, 4], 1.0);
    let b = rand(&mut rng, &[4, 2], 1.0);
    let err = gradient_error(&[a, b], H, |t, x| project(t, &t.matmul(&x[0], &x[1]).unwrap(), 1));
    assert!(err < 1e-3, "{err}");
}

pub fn elementwise_and_reductions() {
    let mut rng = Rng::new(12);
    let x = rand(&mut rng, &[2, 3, 4], 1.0);
    let g = Tensor::full(&[4], 1.0);
    let b = rand(&mut rng, &[4], 0.5);
    let err = gradient_error(&[x, g, b], H, |t, v| {
        let ln = t.layer_norm(&v[0], &v[1], &v[2]).unwrap();
        let sm = t.softmax(&ln).unwrap();
        let sig = t.sigmoid(&t.sum_axis(&sm, 1).unwrap());
        let sq = t.sqrt(&t.affine(&sig, 1.0, 0.5));
        project(t, &t.log(&sq), 2)
    });
    assert!(err < TOL, "{err}");
}

pub fn attention_variants() {
    let (b, t, d, h) = (2, 5, 4, 4);
    let feedback = [1, 0, 0, 1, 1, 0, 0, 1, 0, 1];
    let padded = [false, false, false, false, true, false, false, false, true, true];
    for variant in [Variant::Mha, Variant::Tha, Variant::Fha, Variant::Ffha] {
        for mode in [MaskMode::NegInf, MaskMode::Literal] {
            if mode == MaskMode::Literal && variant != Variant::Ffha {
                continue;
            }
            let mut cfg = AttentionConfig::new(d, h, t, variant);
            cfg.mask_mode = mode;
            let mut rng = Rng::new(20);
            let w = AttentionWeights::init(&cfg, &mut rng);
            let mut inputs: Vec<Tensor> = w.named().into_iter().map(|(_, t)| rand(&mut rng, t.shape(), 0.5)).collect();
            inputs.push(rand(&mut rng, &[b, t, d], 1.0));
            let err = gradient_error(&inputs, H, |tape, x| {
                let mut ww = w.clone();
                for ((_, slot), v) in ww.named_mut().into_iter().zip(x) {
                    *slot = v.clone();
                }
                let enc = encode(tape, &ww, x.last().unwrap(), &feedback, &padded, &cfg).unwrap();
                project(tape, &enc.representations, 3)
            });
            assert!(err < TOL, "{variant} {mode}: {err}");
        }
    }
}

pub fn dual_interest_path() {
    let mut rng = Rng::new(30);
    let (t, d) = (5, 4);
    let mlp = TargetMlp::init(d, Default::default(), &mut rng);
    let mut inputs: Vec<Tensor> = mlp.named().into_iter().map(|(_, t)| rand(&mut rng, t.shape(), 0.5)).collect();
    inputs.push(rand(&mut rng, &[1, d], 1.0));
    inputs.push(rand(&mut rng, &[1, t, d], 1.0));
    let invalid = [false, true, false, false, true];
    let err = gradient_error(&inputs, H, |tape, x| {
        let m = TargetMlp { w1: x[0].clone(), b1: x[1].clone(), w2: x[2].clone(), b2: x[3].clone() };
        let a = target_scores(tape, &m, &x[4], &x[5]).unwrap();
        let agg = aggregate(tape, &a, &x[5], &invalid).unwrap();
        project(tape, &agg.pooled, 4)
    });
    assert!(err < TOL, "{err}");
}

pub fn refine_then_aggregate() {
    let (t, d) = (5, 4);
    let cfg = AttentionConfig::new(d, 2, t, Variant::Fha);
    let mut rng = Rng::new(31);
    let w = AttentionWeights::init(&cfg, &mut rng);
    let mlp = TargetMlp::init(d, Default::default(), &mut rng);
    let feedback = [1, 0, 1, 1, 0];
    let padded = [false, false, false, false, true];
    let invalid = dfar::dual_interest::branch_invalid(&feedback, &padded, dfar::dual_interest::Branch::Positive);
    let mut inputs: Vec<Tensor> = w.named().into_iter().map(|(_, t)| rand(&mut rng, t.shape(), 0.7)).collect();
    inputs.push(rand(&mut rng, &[1, t, d], 1.0));
    let err = gradient_error(&inputs, H, |tape, x| {
        let mut ww = w.clone();
        for ((_, slot), v) in ww.named_mut().into_iter().zip(x) {
            *slot = v.clone();
        }
        let (s_pos, _) = dfar::dual_interest::split_by_feedback(tape, &x[4], &feedback, &padded).unwrap();
        let r = dfar::dual_interest::refine(tape, &ww, &s_pos, &invalid, &cfg).unwrap();
        let target = Tensor::full(&[1, d], 0.3);
        let a = target_scores(tape, &mlp, &target, &r).unwrap();
        let agg = aggregate(tape, &a, &r, &invalid).unwrap();
        project(tape, &tape.concat(&[&agg.pooled, &tape.sum_axis(&r, 1).unwrap()]).unwrap(), 6)
    });
    assert!(err < TOL, "{err}");
}

pub fn losses() {
    let mut rng = Rng::new(40);
    let lp = rand(&mut rng, &[6], 2.0);
    let ln = rand(&mut rng, &[6], 2.0);
    let labels = [1, 0, 1, 1, 0, 0];
    let e = gradient_error(&[lp.clone()], H, |t, x| t.mean(&bce_loss(t, &x[0], &labels).unwrap()).unwrap());
    assert!(e < TOL, "bce {e}");
    let e = gradient_error(&[lp.clone(), ln.clone()], H, |t, x| {
        t.mean(&bpr_loss(t, &x[0], &x[1], &labels).unwrap()).unwrap()
    });
    assert!(e < TOL, "bpr {e}");
    let fp = rand(&mut rng, &[3, 4], 1.0);
    let fn_ = rand(&mut rng, &[3, 4], 1.0);
    let e = gradient_error(&[fp.clone(), fn_.clone()], H, |t, x| {
        t.mean(&disentangle_loss(t, &x[0], &x[1]).unwrap()).unwrap()
    });
    assert!(e < TOL, "cosine {e}");
    let w = LossWeights { lambda_bpr: 0.3, lambda_d: 0.2, lambda_reg: 0.1 };
    let e = gradient_error(&[lp, ln, fp, fn_], H, |t, x| {
        let bce = bce_loss(t, &x[0], &labels).unwrap();
        let bpr = bpr_loss(t, &x[0], &x[1], &labels).unwrap();
        let dis = disentangle_loss(t, &x[2], &x[3]).unwrap();
        joint_loss(t, &bce, Some(&bpr), Some(&dis), &[&x[2], &x[3]], &w).unwrap().total
    });
    assert!(e < TOL, "joint {e}");
}

pub fn tower() {
    let mut rng = Rng::new(50);
    let d = 3;
    let tw = Tower::init(d, &mut rng);
    let mut inputs: Vec<Tensor> = tw.named().into_iter().map(|(_, t)| rand(&mut rng, t.shape(), 0.5)).collect();
    inputs.push(rand(&mut rng, &[2, d], 1.0));
    let err = gradient_error(&inputs, H, |tape, x| {
        let mut w = tw.clone();
        for ((_, slot), v) in w.named_mut().into_iter().zip(x) {
            *slot = v.clone();
        }
        let s = x.last().unwrap();
        let inp = TowerInputs { s: s.clone(), s_branch: s.clone(), f_branch: s.clone(), target: s.clone() };
        project(tape, &tower_logit(tape, &w, &inp).unwrap(), 5)
    });
    assert!(err < TOL, "{err}");
}

pub fn toy_dataset() -> (SplitDataset, Vec<Example>) {
    let tl = Timeline {
        user: 0,
        items: vec![1, 2, 3, 4, 5, 6],
        feedback: vec![1, 0, 0, 1, 1, 0],
        timestamps: vec![0, 1, 2, 3, 4, 5],
        n_train: 6,
        n_validation: 0,
    };
    let ex = vec![
        Example { timeline: 0, prefix_end: 2, target: 2 },
        Example { timeline: 0, prefix_end: 4, target: 4 },
        Example { timeline: 0, prefix_end: 5, target: 5 },
    ];
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

pub fn full_model_every_variant() {
    let (data, ex) = toy_dataset();
    let batch = Batch::build(&data, &ex, 4);
    let weights = LossWeights { lambda_bpr: 0.5, lambda_d: 0.5, lambda_reg: 1e-2 };
    for variant in [Variant::Mha, Variant::Tha, Variant::Fha, Variant::Ffha] {
        let mut cfg = ModelConfig::new(6, 4, 2, 4);
        cfg.variant = variant;
        let mut p = DfarParams::init(&cfg, 8).unwrap();
        // larger weights than the default init so every path carries signal
        let mut rng = Rng::new(9);
        for (name, t) in p.named_mut() {
            if name.contains("ln_") {
                continue;
            }
            let shape = t.shape().to_vec();
            *t = rand(&mut rng, &shape, 0.5);
        }
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let inputs: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        let errs = gradient_mismatch(&inputs, 1e-3, 4.0, TOL, |tape, x| {
            let mut q = p.clone();
            for ((_, slot), v) in q.named_mut().into_iter().zip(x) {
                *slot = v.clone();
            }
            batch_loss(tape, &q, &cfg, &batch, &weights).unwrap().0.total
        });
        let bad: Vec<(&String, &f64)> = names.iter().zip(&errs).filter(|(_, &e)| e >= 1.0).collect();
        assert!(bad.is_empty(), "{variant}: {bad:?}");
    }
}
