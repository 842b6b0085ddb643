//! Prediction towers and the training objective.

use serde::{Deserialize, Serialize};

use crate::attention::keep_rows;
use crate::error::{DfarError, Result};
use crate::param_group;
use crate::params::{uniform, INIT_BOUND};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Sum of the non-padded rows of `[B, t, D]`, giving `[B, D]`.
pub fn sum_pool(tape: &Tape, s: &Tensor, padded: &[bool]) -> Result<Tensor> {
    let d = *s.shape().last().unwrap_or(&0);
    if s.ndim() != 3 || padded.len() * d != s.len() {
        return Err(DfarError::Data(format!(
            "sum_pool of {:?} with {} padding flags",
            s.shape(),
            padded.len()
        )));
    }
    let kept = tape.mul(s, &keep_rows(padded, d, s.shape()))?;
    Ok(tape.sum_axis(&kept, 1)?)
}

/// `LN(4D) → Linear(4D, 2D) → ReLU → LN(2D) → Linear(2D, 1)`.
#[derive(Debug, Clone)]
pub struct Tower {
    pub ln_in_gamma: Tensor,
    pub ln_in_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub ln_mid_gamma: Tensor,
    pub ln_mid_beta: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

param_group!(Tower { ln_in_gamma, ln_in_beta, w1, b1, ln_mid_gamma, ln_mid_beta, w2, b2 });

impl Tower {
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        Self {
            ln_in_gamma: Tensor::full(&[4 * dim], 1.0),
            ln_in_beta: Tensor::zeros(&[4 * dim]),
            w1: uniform(rng, &[4 * dim, 2 * dim], INIT_BOUND),
            b1: Tensor::zeros(&[2 * dim]),
            ln_mid_gamma: Tensor::full(&[2 * dim], 1.0),
            ln_mid_beta: Tensor::zeros(&[2 * dim]),
            w2: uniform(rng, &[2 * dim, 1], INIT_BOUND),
            b2: Tensor::zeros(&[1]),
        }
    }

    /// All weights and biases zero, normalization gains one.
    pub fn zeros(dim: usize) -> Self {
        Self {
            ln_in_gamma: Tensor::full(&[4 * dim], 1.0),
            ln_in_beta: Tensor::zeros(&[4 * dim]),
            w1: Tensor::zeros(&[4 * dim, 2 * dim]),
            b1: Tensor::zeros(&[2 * dim]),
            ln_mid_gamma: Tensor::full(&[2 * dim], 1.0),
            ln_mid_beta: Tensor::zeros(&[2 * dim]),
            w2: Tensor::zeros(&[2 * dim, 1]),
            b2: Tensor::zeros(&[1]),
        }
    }
}

/// Tower inputs for one branch, each `[B, D]`.
#[derive(Debug, Clone)]
pub struct TowerInputs {
    /// Sum-pooled encoder output.
    pub s: Tensor,
    /// Sum-pooled refined branch.
    pub s_branch: Tensor,
    /// Target-aware branch interest.
    pub f_branch: Tensor,
    /// Target item embedding plus the branch label embedding.
    pub target: Tensor,
}

/// One logit per example, `[B]`.
pub fn tower_logit(tape: &Tape, tower: &Tower, inputs: &TowerInputs) -> Result<Tensor> {
    let x = tape.concat(&[&inputs.s, &inputs.s_branch, &inputs.f_branch, &inputs.target])?;
    let b = x.shape()[0];
    let x = tape.layer_norm(&x, &tower.ln_in_gamma, &tower.ln_in_beta)?;
    let h = tape.relu(&tape.add(&tape.matmul(&x, &tower.w1)?, &tower.b1)?);
    let h = tape.layer_norm(&h, &tower.ln_mid_gamma, &tower.ln_mid_beta)?;
    let out = tape.add(&tape.matmul(&h, &tower.w2)?, &tower.b2)?;
    Ok(tape.reshape(&out, &[b])?)
}

fn label_tensor(labels: &[u8], len: usize, op: &str) -> Result<Tensor> {
    if labels.len() != len {
        return Err(DfarError::Data(format!("{op}: {} labels for {len} logits", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(DfarError::Data(format!("{op}: label {bad} is not binary")));
    }
    Ok(Tensor::vector(labels.iter().map(|&y| y as f32).collect()))
}

/// Pair-wise loss `−log σ(±(logit_P − logit_N))`, signed by the label, `[B]`.
pub fn bpr_loss(tape: &Tape, logit_pos: &Tensor, logit_neg: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let y = label_tensor(labels, logit_pos.len(), "bpr_loss")?;
    let sign = tape.affine(&y, 2.0, -1.0);
    let diff = tape.sub(logit_pos, logit_neg)?;
    let signed = tape.mul(&diff, &sign)?;
    Ok(tape.scale(&tape.log(&tape.sigmoid(&signed)), -1.0))
}

/// Binary cross-entropy of `σ(logit)` against the label, `[B]`.
pub fn bce_loss(tape: &Tape, logit: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let y = label_tensor(labels, logit.len(), "bce_loss")?;
    let p = tape.sigmoid(logit);
    let log_p = tape.log(&p);
    let log_q = tape.log(&tape.affine(&p, -1.0, 1.0));
    let pos = tape.mul(&log_p, &y)?;
    let neg = tape.mul(&log_q, &tape.affine(&y, -1.0, 1.0))?;
    Ok(tape.scale(&tape.add(&pos, &neg)?, -1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_bpr: f32,
    pub lambda_d: f32,
    pub lambda_reg: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_bpr: 1e-2,
            lambda_d: 1e-2,
            lambda_reg: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_bpr", self.lambda_bpr),
            ("lambda_d", self.lambda_d),
            ("lambda_reg", self.lambda_reg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DfarError::Config(format!("{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss terms of one batch, each a mean over examples.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub bce: f32,
    pub bpr: Option<f32>,
    pub disentangle: Option<f32>,
    pub reg: f32,
}

/// `mean(bce) + λ_bpr·mean(bpr) + λ_d·mean(dis) + λ·‖Θ‖₂`.
///
/// A term whose per-example tensor is `None` (its arm is switched off) is
/// left out. `params` are the tensors covered by the norm.
pub fn joint_loss(
    tape: &Tape,
    bce: &Tensor,
    bpr: Option<&Tensor>,
    dis: Option<&Tensor>,
    params: &[&Tensor],
    w: &LossWeights,
) -> Result<LossParts> {
    w.validate()?;
    let bce_mean = tape.mean(bce)?;
    let mut total = bce_mean.clone();
    let mut bpr_mean = None;
    if let Some(bpr) = bpr {
        let m = tape.mean(bpr)?;
        bpr_mean = Some(m.item()?);
        total = tape.add(&total, &tape.scale(&m, w.lambda_bpr))?;
    }
    let mut dis_mean = None;
    if let Some(dis) = dis {
        let m = tape.mean(dis)?;
        dis_mean = Some(m.item()?);
        total = tape.add(&total, &tape.scale(&m, w.lambda_d))?;
    }
    let mut reg = 0.0;
    if w.lambda_reg > 0.0 && !params.is_empty() {
        let mut sq = tape.sum_squares(params[0]);
        for p in &params[1..] {
            sq = tape.add(&sq, &tape.sum_squares(p))?;
        }
        let norm = tape.sqrt(&sq);
        reg = norm.item()?;
        total = tape.add(&total, &tape.scale(&norm, w.lambda_reg))?;
    }
    Ok(LossParts {
        bce: bce_mean.item()?,
        total,
        bpr: bpr_mean,
        disentangle: dis_mean,
        reg,
    })
}
