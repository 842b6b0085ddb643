//! Positive/negative interest branches built from the encoded sequence.
//!
//! Each branch keeps only the rows of its own feedback, refines them with an
//! unmasked factorization-heads attention of its own, scores every row
//! against the target item and pools the rows into one interest vector.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{fha, keep_rows, mha, tha, AttentionConfig, AttentionWeights, Variant};
use crate::error::{DfarError, Result};
use crate::param_group;
use crate::params::{uniform, INIT_BOUND};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// How target-aware scores weight the branch rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// One score per (position, feature); softmax over positions per feature.
    #[default]
    Dimension,
    /// One score per position shared by all features.
    Scalar,
}

impl FromStr for Aggregation {
    type Err = DfarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dimension" => Ok(Aggregation::Dimension),
            "scalar" => Ok(Aggregation::Scalar),
            other => Err(DfarError::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Dimension => "dimension",
            Aggregation::Scalar => "scalar",
        })
    }
}

/// Branch of a dual representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Positive,
    Negative,
}

impl Branch {
    pub fn label(self) -> u8 {
        match self {
            Branch::Positive => 1,
            Branch::Negative => 0,
        }
    }
}

/// Positions outside `branch`: padding and rows with the other feedback.
pub fn branch_invalid(feedback: &[u8], padded: &[bool], branch: Branch) -> Vec<bool> {
    let y = branch.label();
    feedback
        .iter()
        .zip(padded)
        .map(|(&f, &p)| p || f != y)
        .collect()
}

/// Splits `[B, t, D]` into the positive and negative sub-sequences. Rows of
/// the other feedback and padded rows are zero in each part.
pub fn split_by_feedback(
    tape: &Tape,
    s: &Tensor,
    feedback: &[u8],
    padded: &[bool],
) -> Result<(Tensor, Tensor)> {
    let d = *s.shape().last().unwrap_or(&0);
    if feedback.len() != padded.len() || feedback.len() * d != s.len() {
        return Err(DfarError::Data(format!(
            "split of {:?} with {} feedback labels",
            s.shape(),
            feedback.len()
        )));
    }
    let pos = keep_rows(&branch_invalid(feedback, padded, Branch::Positive), d, s.shape());
    let neg = keep_rows(&branch_invalid(feedback, padded, Branch::Negative), d, s.shape());
    Ok((tape.mul(s, &pos)?, tape.mul(s, &neg)?))
}

/// Refines one branch with self-attention; `invalid` rows neither attend nor
/// are attended to. Factorization heads without a label mask unless `cfg`
/// selects multi-head or talking-heads attention.
pub fn refine(
    tape: &Tape,
    w: &AttentionWeights,
    s_branch: &Tensor,
    invalid: &[bool],
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    let x = s_branch;
    let out = match cfg.variant {
        Variant::Mha => mha(tape, w, x, x, x, invalid, cfg)?,
        Variant::Tha => tha(tape, w, x, x, x, invalid, cfg)?,
        Variant::Fha | Variant::Ffha => fha(tape, w, x, x, x, invalid, cfg)?,
    };
    Ok(out.output)
}

/// Two-layer scorer `2D → D → D` (or `→ 1` for scalar aggregation).
#[derive(Debug, Clone)]
pub struct TargetMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

param_group!(TargetMlp { w1, b1, w2, b2 });

impl TargetMlp {
    pub fn init(dim: usize, aggregation: Aggregation, rng: &mut Rng) -> Self {
        let out = match aggregation {
            Aggregation::Dimension => dim,
            Aggregation::Scalar => 1,
        };
        Self {
            w1: uniform(rng, &[2 * dim, dim], INIT_BOUND),
            b1: Tensor::zeros(&[dim]),
            w2: uniform(rng, &[dim, out], INIT_BOUND),
            b2: Tensor::zeros(&[out]),
        }
    }

    pub fn zeros(dim: usize, out: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[2 * dim, dim]),
            b1: Tensor::zeros(&[dim]),
            w2: Tensor::zeros(&[dim, out]),
            b2: Tensor::zeros(&[out]),
        }
    }
}

/// Target-aware scores `A[b, j] = MLP(target[b] ‖ S[b, j])`.
///
/// `target` is `[B, D]` (item embedding plus the branch label embedding) and
/// `s_branch` is `[B, t, D]`. Returns `[B, t, D]`, or `[B, t, 1]` for a
/// scalar scorer.
pub fn target_scores(tape: &Tape, mlp: &TargetMlp, target: &Tensor, s_branch: &Tensor) -> Result<Tensor> {
    let (b, t, d) = dims3(s_branch)?;
    if target.shape() != [b, d] {
        return Err(DfarError::Data(format!(
            "target {:?} does not match sequence {:?}",
            target.shape(),
            s_branch.shape()
        )));
    }
    let rows: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, t)).collect();
    let expanded = tape.index_select(target, &rows)?;
    let flat = tape.reshape(s_branch, &[b * t, d])?;
    let x = tape.concat(&[&expanded, &flat])?;
    let h = tape.relu(&tape.add(&tape.matmul(&x, &mlp.w1)?, &mlp.b1)?);
    let out = tape.add(&tape.matmul(&h, &mlp.w2)?, &mlp.b2)?;
    let width = out.shape()[1];
    Ok(tape.reshape(&out, &[b, t, width])?)
}

/// Weighted rows and their sum.
#[derive(Debug, Clone)]
pub struct Aggregated {
    /// `[B, t, D]`.
    pub weighted: Tensor,
    /// `[B, D]`.
    pub pooled: Tensor,
}

/// Softmax over valid positions of `scores` (per feature for `[B, t, D]`
/// scores, shared for `[B, t, 1]`), times `s_branch`, summed over positions.
/// A sequence without valid positions pools to zero.
pub fn aggregate(tape: &Tape, scores: &Tensor, s_branch: &Tensor, invalid: &[bool]) -> Result<Aggregated> {
    let (b, t, d) = dims3(s_branch)?;
    let width = scores.shape().get(2).copied().unwrap_or(0);
    if scores.ndim() != 3 || scores.shape()[..2] != [b, t] || (width != d && width != 1) {
        return Err(DfarError::Data(format!(
            "scores {:?} do not match sequence {:?}",
            scores.shape(),
            s_branch.shape()
        )));
    }
    if invalid.len() != b * t {
        return Err(DfarError::Data("aggregation mask length mismatch".into()));
    }
    let weights = if width == d {
        // [B, t, D] → [B, D, t], softmax over t, back.
        let moved = tape.permute(scores, &[0, 2, 1])?;
        let mut mask = Vec::with_capacity(b * d * t);
        for bi in 0..b {
            for _ in 0..d {
                mask.extend_from_slice(&invalid[bi * t..(bi + 1) * t]);
            }
        }
        let masked = tape.masked_fill(&moved, &Arc::new(mask), f32::NEG_INFINITY)?;
        let sm = tape.softmax(&masked)?;
        tape.permute(&sm, &[0, 2, 1])?
    } else {
        let flat = tape.reshape(scores, &[b, t])?;
        let masked = tape.masked_fill(&flat, &Arc::new(invalid.to_vec()), f32::NEG_INFINITY)?;
        let sm = tape.reshape(&tape.softmax(&masked)?, &[b * t, 1])?;
        let spread = tape.matmul(&sm, &Tensor::full(&[1, d], 1.0))?;
        tape.reshape(&spread, &[b, t, d])?
    };
    let weighted = tape.mul(&weights, s_branch)?;
    let pooled = tape.sum_axis(&weighted, 1)?;
    Ok(Aggregated { weighted, pooled })
}

/// Cosine similarity of the two interest vectors per example, `[B]`.
pub fn disentangle_loss(tape: &Tape, f_pos: &Tensor, f_neg: &Tensor) -> Result<Tensor> {
    Ok(tape.cosine(f_pos, f_neg)?)
}

fn dims3(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, t, d] => Ok((b, t, d)),
        _ => Err(DfarError::Data(format!("expected [B, t, D], got {:?}", x.shape()))),
    }
}
