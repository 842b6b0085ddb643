//! The full recommender: embeddings, encoder, dual-interest branches and
//! prediction towers.

use serde::{Deserialize, Serialize};

use crate::attention::{embed_batch, encode, AttentionConfig, AttentionWeights, MaskMode, Variant};
use crate::data::Batch;
use crate::dual_interest::{
    aggregate, branch_invalid, disentangle_loss, refine, split_by_feedback, target_scores, Aggregation,
    Branch, TargetMlp,
};
use crate::error::{DfarError, Result};
use crate::params::{prefixed, prefixed_mut, uniform, ParamGroup, INIT_BOUND};
use crate::prediction::{bce_loss, bpr_loss, joint_loss, sum_pool, tower_logit, LossParts, LossWeights, Tower, TowerInputs};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Real items; the item table has one extra padding row.
    pub n_items: usize,
    pub dim: usize,
    pub heads: usize,
    pub mix_heads: usize,
    pub max_len: usize,
    pub variant: Variant,
    pub mask_mode: MaskMode,
    pub aggregation: Aggregation,
    /// Positive and negative refinement share one set of weights.
    pub share_refine: bool,
}

impl ModelConfig {
    pub fn new(n_items: usize, dim: usize, heads: usize, max_len: usize) -> Self {
        Self {
            n_items,
            dim,
            heads,
            mix_heads: heads,
            max_len,
            variant: Variant::Ffha,
            mask_mode: MaskMode::NegInf,
            aggregation: Aggregation::Dimension,
            share_refine: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 {
            return Err(DfarError::Config("n_items must be ≥ 1".into()));
        }
        self.encoder().validate()
    }

    pub fn encoder(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.dim,
            heads: self.heads,
            mix_heads: self.mix_heads,
            max_len: self.max_len,
            variant: self.variant,
            mask_mode: self.mask_mode,
        }
    }

    /// Branch refinement follows the encoder family: factorization heads for
    /// FHA/FFHA, otherwise the encoder's own variant.
    pub fn refiner(&self) -> AttentionConfig {
        let variant = match self.variant {
            Variant::Fha | Variant::Ffha => Variant::Fha,
            v => v,
        };
        self.encoder().with_variant(variant)
    }

    pub fn item_rows(&self) -> usize {
        self.n_items + 1
    }
}

#[derive(Debug, Clone)]
pub struct DfarParams {
    /// `[n_items + 1, D]`, row 0 is the zero padding embedding.
    pub item_emb: Tensor,
    /// `[2, D]`, row `y` embeds feedback `y`.
    pub label_emb: Tensor,
    pub encoder: AttentionWeights,
    pub refine_pos: AttentionWeights,
    /// `None` when refinement weights are shared.
    pub refine_neg: Option<AttentionWeights>,
    pub mlp_pos: TargetMlp,
    pub mlp_neg: TargetMlp,
    pub tower_pos: Tower,
    pub tower_neg: Tower,
}

impl DfarParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::stream(seed, "init");
        let mut item_emb = uniform(&mut rng, &[cfg.item_rows(), cfg.dim], INIT_BOUND);
        item_emb.data_mut()[..cfg.dim].fill(0.0);
        let label_emb = uniform(&mut rng, &[2, cfg.dim], INIT_BOUND);
        let encoder = AttentionWeights::init(&cfg.encoder(), &mut rng);
        let refine_pos = AttentionWeights::init(&cfg.refiner(), &mut rng);
        let refine_neg = (!cfg.share_refine).then(|| AttentionWeights::init(&cfg.refiner(), &mut rng));
        Ok(Self {
            item_emb,
            label_emb,
            encoder,
            refine_pos,
            refine_neg,
            mlp_pos: TargetMlp::init(cfg.dim, cfg.aggregation, &mut rng),
            mlp_neg: TargetMlp::init(cfg.dim, cfg.aggregation, &mut rng),
            tower_pos: Tower::init(cfg.dim, &mut rng),
            tower_neg: Tower::init(cfg.dim, &mut rng),
        })
    }

    pub fn refine_neg_weights(&self) -> &AttentionWeights {
        self.refine_neg.as_ref().unwrap_or(&self.refine_pos)
    }
}

impl ParamGroup for DfarParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("item_emb".to_string(), &self.item_emb),
            ("label_emb".to_string(), &self.label_emb),
        ];
        out.extend(prefixed("encoder", self.encoder.named()));
        out.extend(prefixed("refine_pos", self.refine_pos.named()));
        if let Some(w) = &self.refine_neg {
            out.extend(prefixed("refine_neg", w.named()));
        }
        out.extend(prefixed("mlp_pos", self.mlp_pos.named()));
        out.extend(prefixed("mlp_neg", self.mlp_neg.named()));
        out.extend(prefixed("tower_pos", self.tower_pos.named()));
        out.extend(prefixed("tower_neg", self.tower_neg.named()));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("item_emb".to_string(), &mut self.item_emb),
            ("label_emb".to_string(), &mut self.label_emb),
        ];
        out.extend(prefixed_mut("encoder", self.encoder.named_mut()));
        out.extend(prefixed_mut("refine_pos", self.refine_pos.named_mut()));
        if let Some(w) = &mut self.refine_neg {
            out.extend(prefixed_mut("refine_neg", w.named_mut()));
        }
        out.extend(prefixed_mut("mlp_pos", self.mlp_pos.named_mut()));
        out.extend(prefixed_mut("mlp_neg", self.mlp_neg.named_mut()));
        out.extend(prefixed_mut("tower_pos", self.tower_pos.named_mut()));
        out.extend(prefixed_mut("tower_neg", self.tower_neg.named_mut()));
        out
    }
}

/// Which parts of the graph a forward pass builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    /// Negative tower logit (needed by the pair-wise loss).
    pub negative_tower: bool,
    /// Negative interest vector (needed by the negative tower or the
    /// disentangling loss).
    pub negative_branch: bool,
}

impl Heads {
    pub fn all() -> Self {
        Self {
            negative_tower: true,
            negative_branch: true,
        }
    }

    pub fn positive_only() -> Self {
        Self {
            negative_tower: false,
            negative_branch: false,
        }
    }

    pub fn for_weights(w: &LossWeights) -> Self {
        let negative_tower = w.lambda_bpr > 0.0;
        Self {
            negative_tower,
            negative_branch: negative_tower || w.lambda_d > 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B]`.
    pub logit_pos: Tensor,
    pub logit_neg: Option<Tensor>,
    /// `[B, D]`.
    pub f_pos: Tensor,
    pub f_neg: Option<Tensor>,
    /// Encoder attention weights (layout depends on the variant).
    pub attention: Tensor,
}

pub fn forward(tape: &Tape, p: &DfarParams, cfg: &ModelConfig, batch: &Batch, heads: Heads) -> Result<Forward> {
    let (b, t) = (batch.size, batch.len);
    if let Some(&bad) = batch.target_ids.iter().find(|&&id| id == 0 || id > cfg.n_items) {
        return Err(DfarError::Data(format!(
            "target item {bad} outside 1..={}",
            cfg.n_items
        )));
    }
    let x = embed_batch(
        tape,
        &p.item_emb,
        &p.label_emb,
        &batch.item_ids,
        &batch.feedback,
        &batch.padded,
        b,
        t,
    )?;
    let enc = encode(tape, &p.encoder, &x, &batch.feedback, &batch.padded, &cfg.encoder())?;
    let s = enc.representations;
    let (s_pos, s_neg) = split_by_feedback(tape, &s, &batch.feedback, &batch.padded)?;
    let pooled = sum_pool(tape, &s, &batch.padded)?;
    let target_item = tape.index_select(&p.item_emb, &batch.target_ids)?;
    let refiner = cfg.refiner();

    let branch = |branch: Branch, s_x: &Tensor, w: &AttentionWeights, mlp: &TargetMlp| -> Result<(TowerInputs, Tensor)> {
        let invalid = branch_invalid(&batch.feedback, &batch.padded, branch);
        let refined = refine(tape, w, s_x, &invalid, &refiner)?;
        let label = tape.index_select(&p.label_emb, &vec![branch.label() as usize; b])?;
        let target = tape.add(&target_item, &label)?;
        let scores = target_scores(tape, mlp, &target, &refined)?;
        let agg = aggregate(tape, &scores, &refined, &invalid)?;
        let s_branch = sum_pool(tape, &refined, &invalid)?;
        Ok((
            TowerInputs {
                s: pooled.clone(),
                s_branch,
                f_branch: agg.pooled.clone(),
                target,
            },
            agg.pooled,
        ))
    };

    let (pos_in, f_pos) = branch(Branch::Positive, &s_pos, &p.refine_pos, &p.mlp_pos)?;
    let logit_pos = tower_logit(tape, &p.tower_pos, &pos_in)?;
    let (mut logit_neg, mut f_neg) = (None, None);
    if heads.negative_branch || heads.negative_tower {
        let (neg_in, f) = branch(Branch::Negative, &s_neg, p.refine_neg_weights(), &p.mlp_neg)?;
        if heads.negative_tower {
            logit_neg = Some(tower_logit(tape, &p.tower_neg, &neg_in)?);
        }
        f_neg = Some(f);
    }
    Ok(Forward {
        logit_pos,
        logit_neg,
        f_pos,
        f_neg,
        attention: enc.attention,
    })
}

/// Parameters touched by a forward pass with `heads`; the regularizer only
/// covers these.
pub fn active_params<'a>(p: &'a DfarParams, heads: Heads) -> Vec<&'a Tensor> {
    p.named()
        .into_iter()
        .filter(|(name, _)| {
            let neg_branch = name.starts_with("refine_neg.") || name.starts_with("mlp_neg.");
            let neg_tower = name.starts_with("tower_neg.");
            (heads.negative_branch || !neg_branch) && (heads.negative_tower || !neg_tower)
        })
        .map(|(_, t)| t)
        .collect()
}

/// Joint objective of one batch. Arms with a zero weight are not built.
pub fn batch_loss(
    tape: &Tape,
    p: &DfarParams,
    cfg: &ModelConfig,
    batch: &Batch,
    weights: &LossWeights,
) -> Result<(LossParts, Forward)> {
    let heads = Heads::for_weights(weights);
    let fwd = forward(tape, p, cfg, batch, heads)?;
    let bce = bce_loss(tape, &fwd.logit_pos, &batch.target_labels)?;
    let bpr = match &fwd.logit_neg {
        Some(ln) => Some(bpr_loss(tape, &fwd.logit_pos, ln, &batch.target_labels)?),
        None => None,
    };
    let dis = match (&fwd.f_neg, weights.lambda_d > 0.0) {
        (Some(f_neg), true) => Some(disentangle_loss(tape, &fwd.f_pos, f_neg)?),
        _ => None,
    };
    let parts = joint_loss(tape, &bce, bpr.as_ref(), dis.as_ref(), &active_params(p, heads), weights)?;
    Ok((parts, fwd))
}
