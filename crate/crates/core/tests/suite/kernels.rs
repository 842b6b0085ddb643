use super::common::brute_attention;
use dfar::attention::{fha, ffha, head_half, mha, tha, AttentionConfig, AttentionWeights, Variant};
use dfar::params::{uniform, ParamGroup};
use dfar::rng::Rng;
use dfar::tensor::{Tape, Tensor};

struct Case {
    t: usize,
    d: usize,
    heads: usize,
    x: Tensor,
    padded: Vec<bool>,
    feedback: Vec<u8>,
    w: AttentionWeights,
}

fn case(seed: u64, t: usize, d: usize, heads: usize, variant: Variant) -> Case {
    let mut rng = Rng::new(seed);
    let cfg = AttentionConfig::new(d, heads, t, variant);
    let mut w = AttentionWeights::init(&cfg, &mut rng);
    for (_, p) in w.named_mut() {
        let shape = p.shape().to_vec();
        *p = uniform(&mut rng, &shape, 0.8);
    }
    let real = 1 + rng.below(t);
    let padded: Vec<bool> = (0..t).map(|i| i >= real).collect();
    let feedback: Vec<u8> = (0..t).map(|i| if i < real { rng.below(2) as u8 } else { 0 }).collect();
    let x = uniform(&mut rng, &[1, t, d], 1.0);
    Case {
        t,
        d,
        heads,
        x,
        padded,
        feedback,
        w,
    }
}

fn cfg_of(c: &Case, variant: Variant) -> AttentionConfig {
    AttentionConfig::new(c.d, c.heads, c.t, variant)
}

fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max)
}

pub fn fha_with_one_head_is_mha() {
    for seed in 0..20 {
        let c = case(seed, 6, 4, 1, Variant::Fha);
        let tape = Tape::inference();
        let a = fha(&tape, &c.w, &c.x, &c.x, &c.x, &c.padded, &cfg_of(&c, Variant::Fha)).unwrap();
        let b = mha(&tape, &c.w, &c.x, &c.x, &c.x, &c.padded, &cfg_of(&c, Variant::Mha)).unwrap();
        let diff = a
            .output
            .data()
            .iter()
            .zip(b.output.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(diff <= 1e-6, "seed {seed}: {diff}");
    }
}

pub fn tha_with_identity_mixing_is_mha_exactly() {
    for seed in 0..20 {
        let mut c = case(seed, 5, 4, 2, Variant::Tha);
        c.w.mix_pre = Some(Tensor::eye(2));
        c.w.mix_post = Some(Tensor::eye(2));
        let tape = Tape::inference();
        let a = tha(&tape, &c.w, &c.x, &c.x, &c.x, &c.padded, &cfg_of(&c, Variant::Tha)).unwrap();
        let b = mha(&tape, &c.w, &c.x, &c.x, &c.x, &c.padded, &cfg_of(&c, Variant::Mha)).unwrap();
        assert_eq!(a.output.data(), b.output.data(), "seed {seed}");
        assert_eq!(a.weights.data(), b.weights.data(), "seed {seed}");
    }
}

fn brute(c: &Case, factorized: bool, allowed: impl Fn(usize, usize, usize, usize) -> bool) -> (Vec<f64>, Vec<Vec<Vec<Vec<f64>>>>) {
    brute_attention(
        c.x.data(),
        c.t,
        c.d,
        c.heads,
        c.w.query.data(),
        c.w.key.data(),
        c.w.value.data(),
        c.w.output.data(),
        &c.padded,
        factorized,
        allowed,
    )
}

/// Compares a `[1, H·t, H·t]` weight tensor with the `[h1][i][h2][j]` oracle.
fn factorized_weight_diff(c: &Case, weights: &Tensor, oracle: &[Vec<Vec<Vec<f64>>>]) -> f64 {
    let n = c.heads * c.t;
    let mut worst: f64 = 0.0;
    for h1 in 0..c.heads {
        for i in 0..c.t {
            for h2 in 0..c.heads {
                for j in 0..c.t {
                    let got = weights.data()[(h1 * c.t + i) * n + h2 * c.t + j] as f64;
                    worst = worst.max((got - oracle[h1][i][h2][j]).abs());
                }
            }
        }
    }
    worst
}

pub fn mha_matches_loop_oracle() {
    for seed in 0..20 {
        let c = case(100 + seed, 5, 4, 2, Variant::Mha);
        let out = mha(&Tape::inference(), &c.w, &c.x, &c.x, &c.x, &c.padded, &cfg_of(&c, Variant::Mha)).unwrap();
        let (o, _) = brute(&c, false, |_, _, _, _| true);
        assert!(max_diff(out.output.data(), &o) < 1e-5, "seed {seed}");
    }
}

pub fn fha_matches_quadruple_loop_on_fifty_seeds() {
    for seed in 0..50 {
        let heads = [1, 2, 4][seed as usize % 3];
        let c = case(200 + seed, 1 + seed as usize % 6, 4, heads, Variant::Fha);
        let out = fha(&Tape::inference(), &c.w, &c.x, &c.x, &c.x, &c.padded, &cfg_of(&c, Variant::Fha)).unwrap();
        let (o, a) = brute(&c, true, |_, _, _, _| true);
        let d_out = max_diff(out.output.data(), &o);
        let d_w = factorized_weight_diff(&c, &out.weights, &a);
        assert!(d_out < 1e-5 && d_w < 1e-5, "seed {seed}: output {d_out}, weights {d_w}");
    }
}

pub fn ffha_matches_masked_loop_oracle() {
    for seed in 0..50 {
        let heads = [2, 4][seed as usize % 2];
        let c = case(300 + seed, 1 + seed as usize % 6, 4, heads, Variant::Ffha);
        let out = ffha(
            &Tape::inference(),
            &c.w,
            &c.x,
            &c.x,
            &c.x,
            &c.padded,
            &c.feedback,
            &cfg_of(&c, Variant::Ffha),
        )
        .unwrap();
        let (fb, pd) = (c.feedback.clone(), c.padded.clone());
        let (o, a) = brute(&c, true, |h1, i, h2, j| {
            !pd[i] && head_half(h1, heads) == fb[i] && head_half(h2, heads) == fb[j]
        });
        let d_out = max_diff(out.output.data(), &o);
        let d_w = factorized_weight_diff(&c, &out.weights, &a);
        assert!(d_out < 1e-5 && d_w < 1e-5, "seed {seed}: output {d_out}, weights {d_w}");
    }
}

pub fn ffha_mask_is_sound_on_random_sequences() {
    let mut rng = Rng::new(77);
    for trial in 0..100 {
        let heads = [2, 4][trial % 2];
        let t = 1 + rng.below(8);
        let mut c = case(1000 + trial as u64, t, 4, heads, Variant::Ffha);
        c.feedback = (0..t).map(|i| if c.padded[i] { 0 } else { rng.below(2) as u8 }).collect();
        let out = ffha(
            &Tape::inference(),
            &c.w,
            &c.x,
            &c.x,
            &c.x,
            &c.padded,
            &c.feedback,
            &cfg_of(&c, Variant::Ffha),
        )
        .unwrap();
        let n = heads * t;
        let w = out.weights.data();
        for h1 in 0..heads {
            for i in 0..t {
                let row = &w[(h1 * t + i) * n..(h1 * t + i + 1) * n];
                let active = !c.padded[i] && head_half(h1, heads) == c.feedback[i];
                if !active {
                    assert!(row.iter().all(|&v| v == 0.0), "trial {trial}: inactive row has mass");
                    continue;
                }
                let mut total = 0.0;
                for h2 in 0..heads {
                    for j in 0..t {
                        let v = row[h2 * t + j];
                        if c.padded[j] || head_half(h2, heads) != c.feedback[j] {
                            assert_eq!(v, 0.0, "trial {trial}: masked cell ({h1},{i},{h2},{j}) = {v}");
                        }
                        total += v;
                    }
                }
                assert!((total - 1.0).abs() < 1e-5, "trial {trial}: row mass {total}");
            }
        }
    }
}

pub fn parameter_counts() {
    for (d, h) in [(4, 2), (8, 4), (32, 2)] {
        let mut rng = Rng::new(1);
        let count = |v: Variant, rng: &mut Rng| {
            let cfg = AttentionConfig::new(d, h, 10, v);
            let n = AttentionWeights::init(&cfg, rng).parameter_count();
            assert_eq!(n, cfg.parameter_count());
            n
        };
        let mha_n = count(Variant::Mha, &mut rng);
        assert_eq!(mha_n, 3 * h * d * d + h * d * d);
        assert_eq!(count(Variant::Fha, &mut rng), mha_n);
        assert_eq!(count(Variant::Ffha, &mut rng), mha_n);
        assert_eq!(count(Variant::Tha, &mut rng), mha_n + 2 * h * h);
    }
}

pub fn fha_exposes_all_head_pair_blocks() {
    let c = case(5, 6, 4, 4, Variant::Fha);
    let out = fha(&Tape::inference(), &c.w, &c.x, &c.x, &c.x, &c.padded, &cfg_of(&c, Variant::Fha)).unwrap();
    let (h, t) = (c.heads, c.t);
    assert_eq!(out.weights.shape(), &[1, h * t, h * t]);
    for h1 in 0..h {
        for h2 in 0..h {
            let mass: f32 = (0..t)
                .flat_map(|i| (0..t).map(move |j| (i, j)))
                .map(|(i, j)| out.weights.data()[(h1 * t + i) * h * t + h2 * t + j])
                .sum();
            assert!(mass > 0.0, "block ({h1},{h2}) is empty");
        }
    }
}
