//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use dfar::tensor::{Tape, Tensor};

/// Central-difference check of every input of a scalar function.
///
/// Returns the worst per-input relative error
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-3)`.
pub fn gradient_error(inputs: &[Tensor], h: f32, f: impl Fn(&Tape, &[Tensor]) -> Tensor) -> f64 {
    gradient_errors(inputs, h, 1e-3, f).into_iter().fold(0.0, f64::max)
}

/// Relative error per input. Gradients whose norm is below `floor` are
/// compared against `floor` instead: f32 rounding of a unit-scale loss
/// limits central differences to roughly 1e-5 per element.
pub fn gradient_errors(inputs: &[Tensor], h: f32, floor: f64, f: impl Fn(&Tape, &[Tensor]) -> Tensor) -> Vec<f64> {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&tape, &leaves);
    let grads = tape.backward(&loss).expect("scalar loss");
    let eval = |xs: &[Tensor]| -> f64 {
        let t = Tape::inference();
        f(&t, xs).item().unwrap() as f64
    };
    let mut errors = Vec::with_capacity(leaves.len());
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(leaf) {
            Some(g) => g.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; leaf.len()],
        };
        let mut numeric = vec![0.0; leaf.len()];
        for i in 0..leaf.len() {
            let mut xs: Vec<Tensor> = inputs.to_vec();
            xs[k].data_mut()[i] += h;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * h;
            let down = eval(&xs);
            numeric[i] = (up - down) / (2.0 * h as f64);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        errors.push(diff / na.max(nn).max(floor));
    }
    errors
}

/// Per-element check for losses evaluated in f32, where rounding of the
/// loss itself makes every central difference uncertain by `ulp(L) / 2h`
/// per unit of last place. Returns per input the worst
/// `|analytic − numeric| / (ulps·ulp(L)/2h + rtol·|numeric|)`; values below
/// 1 pass.
pub fn gradient_mismatch(
    inputs: &[Tensor],
    h: f32,
    ulps: f64,
    rtol: f64,
    f: impl Fn(&Tape, &[Tensor]) -> Tensor,
) -> Vec<f64> {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&tape, &leaves);
    let grads = tape.backward(&loss).expect("scalar loss");
    let ulp = loss.item().unwrap().abs() as f64 * f32::EPSILON as f64;
    let atol = ulps * ulp / (2.0 * h as f64);
    let eval = |xs: &[Tensor]| -> f64 {
        let t = Tape::inference();
        f(&t, xs).item().unwrap() as f64
    };
    let mut worst = Vec::with_capacity(leaves.len());
    for (k, leaf) in leaves.iter().enumerate() {
        let g = grads.get(leaf);
        let mut w: f64 = 0.0;
        for i in 0..leaf.len() {
            let a = g.map_or(0.0, |g| g[i] as f64);
            let mut xs: Vec<Tensor> = inputs.to_vec();
            xs[k].data_mut()[i] += h;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * h;
            let down = eval(&xs);
            let n = (up - down) / (2.0 * h as f64);
            w = w.max((a - n).abs() / (atol + rtol * n.abs()));
        }
        worst.push(w);
    }
    worst
}

/// Fixed random projection `Σ x ⊙ c`, turning any tensor into a scalar loss
/// with a non-trivial gradient.
pub fn project(tape: &Tape, x: &Tensor, seed: u64) -> Tensor {
    let mut rng = dfar::rng::Rng::new(seed);
    let c = Tensor::new(x.shape().to_vec(), (0..x.len()).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
    tape.sum(&tape.mul(x, &c).unwrap())
}

fn at(m: &[f32], cols: usize, r: usize, c: usize) -> f64 {
    m[r * cols + c] as f64
}

/// Row `i` of `x · W[:, h·D..(h+1)·D]` for a `[t, D]` sequence.
fn head_proj(x: &[f32], w: &[f32], d: usize, heads: usize, h: usize, i: usize) -> Vec<f64> {
    (0..d)
        .map(|c| (0..d).map(|k| at(x, d, i, k) * at(w, heads * d, k, h * d + c)).sum())
        .collect()
}

/// Attention of one sequence by explicit loops. `allowed(h1, i, h2, j)`
/// decides admissible cells; with `factorized` each query head attends over
/// all (key head, key position) pairs, otherwise only over its own head.
/// Returns the `[t, D]` output (padded rows zero) and the attention weights
/// indexed `[h1][i][h2][j]`.
#[allow(clippy::too_many_arguments)]
pub fn brute_attention(
    x: &[f32],
    t: usize,
    d: usize,
    heads: usize,
    wq: &[f32],
    wk: &[f32],
    wv: &[f32],
    wo: &[f32],
    padded: &[bool],
    factorized: bool,
    allowed: impl Fn(usize, usize, usize, usize) -> bool,
) -> (Vec<f64>, Vec<Vec<Vec<Vec<f64>>>>) {
    let scale = 1.0 / (d as f64).sqrt();
    let q: Vec<Vec<Vec<f64>>> = (0..heads).map(|h| (0..t).map(|i| head_proj(x, wq, d, heads, h, i)).collect()).collect();
    let k: Vec<Vec<Vec<f64>>> = (0..heads).map(|h| (0..t).map(|i| head_proj(x, wk, d, heads, h, i)).collect()).collect();
    let v: Vec<Vec<Vec<f64>>> = (0..heads).map(|h| (0..t).map(|i| head_proj(x, wv, d, heads, h, i)).collect()).collect();
    let mut weights = vec![vec![vec![vec![0.0; t]; heads]; t]; heads];
    let mut ctx = vec![vec![vec![0.0; d]; t]; heads];
    for h1 in 0..heads {
        for i in 0..t {
            let mut cells = Vec::new();
            for h2 in 0..heads {
                if !factorized && h2 != h1 {
                    continue;
                }
                for j in 0..t {
                    if padded[j] || !allowed(h1, i, h2, j) {
                        continue;
                    }
                    let dot: f64 = (0..d).map(|c| q[h1][i][c] * k[h2][j][c]).sum();
                    cells.push((h2, j, dot * scale));
                }
            }
            if cells.is_empty() {
                continue;
            }
            let m = cells.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = cells.iter().map(|c| (c.2 - m).exp()).sum();
            for &(h2, j, l) in &cells {
                let a = (l - m).exp() / z;
                weights[h1][i][h2][j] = a;
                for c in 0..d {
                    ctx[h1][i][c] += a * v[h2][j][c];
                }
            }
        }
    }
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        if padded[i] {
            continue;
        }
        for c in 0..d {
            out[i * d + c] = (0..heads)
                .map(|h| (0..d).map(|e| ctx[h][i][e] * at(wo, d, h * d + e, c)).sum::<f64>())
                .sum();
        }
    }
    (out, weights)
}

/// AUC by comparing every positive with every negative.
pub fn pair_count_auc(scores: &[f32], labels: &[u8]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// One `#[test]` per named check of the included `suite` module.
#[allow(unused_macros)]
macro_rules! suite_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                suite::$name()
            }
        )*
    };
}
