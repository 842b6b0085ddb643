//! Feedback-aware embedding and the four self-attention kernels.
//!
//! All kernels take batched inputs `[B, t, D]` plus a padding mask of length
//! `B·t` (`true` = padded position) and return `[B, t, D]` with padded rows
//! zeroed. Per-head projections are stored side by side: `query`, `key` and
//! `value` are `[D, H·D]` (columns `h·D..(h+1)·D` belong to head `h`) and
//! `output` is `[H·D, D]`. Logits are scaled by `1/√D`.
//!
//! Heads `0..H/2` are the negative-feedback heads and `H/2..H` the positive
//! ones; the label mask admits a (query head, key head) pair for positions
//! `(i, j)` only when each head lies in the half matching that position's
//! feedback.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{DfarError, Result};
use crate::param_group;
use crate::params::{uniform, INIT_BOUND};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mha,
    Tha,
    Fha,
    Ffha,
}

impl FromStr for Variant {
    type Err = DfarError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mha" => Ok(Variant::Mha),
            "tha" => Ok(Variant::Tha),
            "fha" => Ok(Variant::Fha),
            "ffha" => Ok(Variant::Ffha),
            other => Err(DfarError::Config(format!("unknown attention variant `{other}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Mha => "mha",
            Variant::Tha => "tha",
            Variant::Fha => "fha",
            Variant::Ffha => "ffha",
        })
    }
}

/// How the label mask is applied to FFHA logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Inadmissible logits become `-inf` and receive zero attention.
    #[default]
    NegInf,
    /// Logits are multiplied by the 0/1 mask, as the formula is written.
    Literal,
}

impl FromStr for MaskMode {
    type Err = DfarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neg-inf" => Ok(MaskMode::NegInf),
            "literal" => Ok(MaskMode::Literal),
            other => Err(DfarError::Config(format!("unknown mask mode `{other}`"))),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::NegInf => "neg-inf",
            MaskMode::Literal => "literal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    /// Intermediate head count of talking-heads mixing.
    pub mix_heads: usize,
    pub max_len: usize,
    pub variant: Variant,
    pub mask_mode: MaskMode,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize, max_len: usize, variant: Variant) -> Self {
        Self {
            dim,
            heads,
            mix_heads: heads,
            max_len,
            variant,
            mask_mode: MaskMode::NegInf,
        }
    }

    pub fn with_variant(self, variant: Variant) -> Self {
        Self { variant, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(DfarError::Config("dim must be ≥ 1".into()));
        }
        if self.heads == 0 || self.mix_heads == 0 {
            return Err(DfarError::Config("heads must be ≥ 1".into()));
        }
        if self.max_len == 0 {
            return Err(DfarError::Config("max_len must be ≥ 1".into()));
        }
        if self.variant == Variant::Ffha && self.heads % 2 != 0 {
            return Err(DfarError::Config(format!(
                "ffha splits heads by feedback and needs an even head count, got {}",
                self.heads
            )));
        }
        Ok(())
    }

    /// Learnable scalars for this configuration: `4·H·D²`, plus `2·H·H′`
    /// mixing weights for talking heads.
    pub fn parameter_count(&self) -> usize {
        let base = 4 * self.heads * self.dim * self.dim;
        match self.variant {
            Variant::Tha => base + 2 * self.heads * self.mix_heads,
            _ => base,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
    /// `[H′, H]`, talking heads only.
    pub mix_pre: Option<Tensor>,
    /// `[H, H′]`, talking heads only.
    pub mix_post: Option<Tensor>,
}

param_group!(AttentionWeights { query, key, value, output } optional { mix_pre, mix_post });

impl AttentionWeights {
    pub fn init(cfg: &AttentionConfig, rng: &mut Rng) -> Self {
        let (d, h, hm) = (cfg.dim, cfg.heads, cfg.mix_heads);
        let query = uniform(rng, &[d, h * d], INIT_BOUND);
        let key = uniform(rng, &[d, h * d], INIT_BOUND);
        let value = uniform(rng, &[d, h * d], INIT_BOUND);
        let output = uniform(rng, &[h * d, d], INIT_BOUND);
        let (mix_pre, mix_post) = if cfg.variant == Variant::Tha {
            (
                Some(uniform(rng, &[hm, h], INIT_BOUND)),
                Some(uniform(rng, &[h, hm], INIT_BOUND)),
            )
        } else {
            (None, None)
        };
        Self {
            query,
            key,
            value,
            output,
            mix_pre,
            mix_post,
        }
    }
}

/// Result of an attention kernel.
///
/// `weights` holds the post-softmax attention: `[B·H, t, t]` for MHA and
/// THA (rows are query positions), `[B, H·t, H·t]` for FHA and FFHA where row
/// `h₁·t + i` and column `h₂·t + j` index (query head, position) and (key
/// head, position).
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Tensor,
    pub weights: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncodedSequence {
    /// `[B, t, D]`.
    pub representations: Tensor,
    pub attention: Tensor,
}

/// Feedback label mask of one sequence, laid out `[H, H, t, t]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub heads: usize,
    pub len: usize,
    bits: Vec<bool>,
}

impl LabelMask {
    pub fn get(&self, h1: usize, h2: usize, i: usize, j: usize) -> bool {
        let (h, t) = (self.heads, self.len);
        self.bits[((h1 * h + h2) * t + i) * t + j]
    }
}

/// Half (0 = negative, 1 = positive) that head `h` belongs to.
pub fn head_half(h: usize, heads: usize) -> u8 {
    u8::from(h >= heads / 2)
}

pub fn build_label_mask(feedback: &[u8], padded: &[bool], heads: usize) -> Result<LabelMask> {
    if heads % 2 != 0 || heads == 0 {
        return Err(DfarError::Config(format!(
            "label mask needs an even head count, got {heads}"
        )));
    }
    if feedback.len() != padded.len() {
        return Err(DfarError::Data("feedback and padding lengths differ".into()));
    }
    let t = feedback.len();
    let mut bits = vec![false; heads * heads * t * t];
    for h1 in 0..heads {
        for h2 in 0..heads {
            for i in 0..t {
                for j in 0..t {
                    bits[((h1 * heads + h2) * t + i) * t + j] = !padded[i]
                        && !padded[j]
                        && head_half(h1, heads) == feedback[i]
                        && head_half(h2, heads) == feedback[j];
                }
            }
        }
    }
    Ok(LabelMask {
        heads,
        len: t,
        bits,
    })
}

/// `[B·t·D]` 0/1 tensor zeroing padded rows.
pub(crate) fn keep_rows(padded: &[bool], dim: usize, shape: &[usize]) -> Tensor {
    let data = padded
        .iter()
        .flat_map(|&p| std::iter::repeat_n(if p { 0.0 } else { 1.0 }, dim))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("mask shape")
}

/// Looks up `E[item] + L[feedback]` for every position of a padded batch.
/// `items`, `feedback` and `padded` are `B·t` long; padded rows are zero.
pub fn embed_batch(
    tape: &Tape,
    item_table: &Tensor,
    label_table: &Tensor,
    items: &[usize],
    feedback: &[u8],
    padded: &[bool],
    batch: usize,
    len: usize,
) -> Result<Tensor> {
    let d = item_table.shape()[1];
    let rows = item_table.shape()[0];
    if items.len() != batch * len || feedback.len() != items.len() || padded.len() != items.len() {
        return Err(DfarError::Data(format!(
            "batch layout {batch}×{len} does not match {} ids",
            items.len()
        )));
    }
    if let Some(&bad) = items.iter().find(|&&id| id >= rows) {
        return Err(DfarError::Data(format!(
            "item id {bad} outside a table of {rows} rows"
        )));
    }
    if let Some(&bad) = feedback.iter().find(|&&y| y > 1) {
        return Err(DfarError::Data(format!("feedback label {bad} is not binary")));
    }
    let labels: Vec<usize> = feedback.iter().map(|&y| y as usize).collect();
    let e = tape.index_select(item_table, items)?;
    let l = tape.index_select(label_table, &labels)?;
    let sum = tape.add(&e, &l)?;
    let keep = keep_rows(padded, d, &[batch * len, d]);
    let masked = tape.mul(&sum, &keep)?;
    Ok(tape.reshape(&masked, &[batch, len, d])?)
}

/// Single-sequence embedding padded to `max_len` (recent-first truncation is
/// the caller's job).
pub fn embed_sequence(
    tape: &Tape,
    item_table: &Tensor,
    label_table: &Tensor,
    items: &[usize],
    feedback: &[u8],
    max_len: usize,
) -> Result<Tensor> {
    if items.len() != feedback.len() {
        return Err(DfarError::Data("items and feedback lengths differ".into()));
    }
    if items.len() > max_len {
        return Err(DfarError::Data(format!(
            "sequence of {} items exceeds max length {max_len}",
            items.len()
        )));
    }
    let mut ids = items.to_vec();
    let mut fb = feedback.to_vec();
    let mut padded = vec![false; items.len()];
    ids.resize(max_len, 0);
    fb.resize(max_len, 0);
    padded.resize(max_len, true);
    let out = embed_batch(tape, item_table, label_table, &ids, &fb, &padded, 1, max_len)?;
    Ok(tape.reshape(&out, &[max_len, item_table.shape()[1]])?)
}

fn check_input(x: &Tensor, padded: &[bool], cfg: &AttentionConfig) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[2] != cfg.dim || padded.len() != s[0] * s[1] {
        return Err(DfarError::Data(format!(
            "attention input {:?} does not match dim {} and {} padding flags",
            s,
            cfg.dim,
            padded.len()
        )));
    }
    Ok((s[0], s[1]))
}

/// `[B, t, D] · [D, H·D]` → `[B, H, t, D]`.
fn project_heads(tape: &Tape, x: &Tensor, w: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let flat = tape.reshape(x, &[b * t, d])?;
    let proj = tape.matmul(&flat, w)?;
    let split = tape.reshape(&proj, &[b, t, heads, d])?;
    Ok(tape.permute(&split, &[0, 2, 1, 3])?)
}

/// `[B, H, t, D]` → concat heads → `· W₀` → `[B, t, D]` with padded rows zeroed.
fn merge_heads(tape: &Tape, ctx: &Tensor, w0: &Tensor, padded: &[bool]) -> Result<Tensor> {
    let (b, h, t, d) = (ctx.shape()[0], ctx.shape()[1], ctx.shape()[2], ctx.shape()[3]);
    let moved = tape.permute(ctx, &[0, 2, 1, 3])?;
    let concat = tape.reshape(&moved, &[b * t, h * d])?;
    let out = tape.matmul(&concat, w0)?;
    let keep = keep_rows(padded, d, &[b * t, d]);
    let out = tape.mul(&out, &keep)?;
    Ok(tape.reshape(&out, &[b, t, d])?)
}

/// Key-padding mask for `groups` score blocks of `t×t` per sequence.
fn key_padding_mask(padded: &[bool], batch: usize, groups: usize, t: usize) -> Arc<Vec<bool>> {
    let mut mask = Vec::with_capacity(batch * groups * t * t);
    for b in 0..batch {
        let row = &padded[b * t..(b + 1) * t];
        for _ in 0..groups * t {
            mask.extend_from_slice(row);
        }
    }
    Arc::new(mask)
}

fn scale_factor(cfg: &AttentionConfig) -> f32 {
    1.0 / (cfg.dim as f32).sqrt()
}

/// Multi-head attention.
pub fn mha(
    tape: &Tape,
    w: &AttentionWeights,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    padded: &[bool],
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    let (b, t) = check_input(q, padded, cfg)?;
    let h = cfg.heads;
    let d = cfg.dim;
    let qh = tape.reshape(&project_heads(tape, q, &w.query, h)?, &[b * h, t, d])?;
    let kh = tape.reshape(&project_heads(tape, k, &w.key, h)?, &[b * h, t, d])?;
    let vh = tape.reshape(&project_heads(tape, v, &w.value, h)?, &[b * h, t, d])?;
    let logits = tape.scale(&tape.bmm_nt(&qh, &kh)?, scale_factor(cfg));
    let mask = key_padding_mask(padded, b, h, t);
    let masked = tape.masked_fill(&logits, &mask, f32::NEG_INFINITY)?;
    let attn = tape.softmax(&masked)?;
    let ctx = tape.bmm(&attn, &vh)?;
    let ctx = tape.reshape(&ctx, &[b, h, t, d])?;
    let output = merge_heads(tape, &ctx, &w.output, padded)?;
    Ok(AttentionOutput {
        output,
        weights: attn,
    })
}

/// Mixes the head axis of `[B, Hin, t, t]` scores by `mix: [Hout, Hin]`.
fn mix_heads(tape: &Tape, scores: &Tensor, mix: &Tensor, b: usize, t: usize) -> Result<Tensor> {
    let (hout, hin) = (mix.shape()[0], mix.shape()[1]);
    let s = tape.reshape(scores, &[b, hin, t * t])?;
    let s = tape.permute(&s, &[1, 0, 2])?;
    let s = tape.reshape(&s, &[hin, b * t * t])?;
    let mixed = tape.matmul(mix, &s)?;
    let mixed = tape.reshape(&mixed, &[hout, b, t * t])?;
    let mixed = tape.permute(&mixed, &[1, 0, 2])?;
    Ok(tape.reshape(&mixed, &[b * hout, t, t])?)
}

/// Talking-heads attention: logits mixed `H → H′` before the softmax and
/// the attention maps mixed `H′ → H` after it.
pub fn tha(
    tape: &Tape,
    w: &AttentionWeights,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    padded: &[bool],
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    let (b, t) = check_input(q, padded, cfg)?;
    let (h, hm, d) = (cfg.heads, cfg.mix_heads, cfg.dim);
    let (Some(pre), Some(post)) = (&w.mix_pre, &w.mix_post) else {
        return Err(DfarError::Capability(
            "talking-heads attention needs mixing weights".into(),
        ));
    };
    if pre.shape() != [hm, h] || post.shape() != [h, hm] {
        return Err(DfarError::Config(format!(
            "mixing shapes {:?} / {:?} do not match H={h}, H′={hm}",
            pre.shape(),
            post.shape()
        )));
    }
    let qh = tape.reshape(&project_heads(tape, q, &w.query, h)?, &[b * h, t, d])?;
    let kh = tape.reshape(&project_heads(tape, k, &w.key, h)?, &[b * h, t, d])?;
    let vh = tape.reshape(&project_heads(tape, v, &w.value, h)?, &[b * h, t, d])?;
    let logits = tape.scale(&tape.bmm_nt(&qh, &kh)?, scale_factor(cfg));
    // Mixing happens on finite logits; padding is masked afterwards.
    let mixed = mix_heads(tape, &logits, pre, b, t)?;
    let mask = key_padding_mask(padded, b, hm, t);
    let masked = tape.masked_fill(&mixed, &mask, f32::NEG_INFINITY)?;
    let probs = tape.softmax(&masked)?;
    let attn = mix_heads(tape, &probs, post, b, t)?;
    let ctx = tape.bmm(&attn, &vh)?;
    let ctx = tape.reshape(&ctx, &[b, h, t, d])?;
    let output = merge_heads(tape, &ctx, &w.output, padded)?;
    Ok(AttentionOutput {
        output,
        weights: attn,
    })
}

/// Admissibility of every `(h₁, i) × (h₂, j)` cell, `[B, H·t, H·t]`.
fn factorized_label_bits(feedback: &[u8], padded: &[bool], b: usize, h: usize, t: usize) -> Vec<bool> {
    let n = h * t;
    let mut bits = vec![false; b * n * n];
    for bi in 0..b {
        let fb = &feedback[bi * t..(bi + 1) * t];
        let pd = &padded[bi * t..(bi + 1) * t];
        for h1 in 0..h {
            for i in 0..t {
                let row_ok = !pd[i] && head_half(h1, h) == fb[i];
                if !row_ok {
                    continue;
                }
                let base = bi * n * n + (h1 * t + i) * n;
                for h2 in 0..h {
                    for j in 0..t {
                        bits[base + h2 * t + j] = !pd[j] && head_half(h2, h) == fb[j];
                    }
                }
            }
        }
    }
    bits
}

fn factorized(
    tape: &Tape,
    w: &AttentionWeights,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    padded: &[bool],
    feedback: Option<&[u8]>,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    let (b, t) = check_input(q, padded, cfg)?;
    let (h, d) = (cfg.heads, cfg.dim);
    let n = h * t;
    // [B, H, t, D] is already laid out as [B, (h, t), D].
    let qh = tape.reshape(&project_heads(tape, q, &w.query, h)?, &[b, n, d])?;
    let kh = tape.reshape(&project_heads(tape, k, &w.key, h)?, &[b, n, d])?;
    let vh = tape.reshape(&project_heads(tape, v, &w.value, h)?, &[b, n, d])?;
    let logits = tape.scale(&tape.bmm_nt(&qh, &kh)?, scale_factor(cfg));
    let key_pad = {
        let mut m = Vec::with_capacity(b * n * n);
        for bi in 0..b {
            let pd = &padded[bi * t..(bi + 1) * t];
            for _ in 0..n {
                for _ in 0..h {
                    m.extend_from_slice(pd);
                }
            }
        }
        m
    };
    let masked = match feedback {
        None => tape.masked_fill(&logits, &Arc::new(key_pad), f32::NEG_INFINITY)?,
        Some(fb) => {
            if fb.len() != padded.len() {
                return Err(DfarError::Data("feedback and padding lengths differ".into()));
            }
            let bits = factorized_label_bits(fb, padded, b, h, t);
            match cfg.mask_mode {
                MaskMode::NegInf => {
                    let blocked: Vec<bool> = bits.iter().map(|&ok| !ok).collect();
                    tape.masked_fill(&logits, &Arc::new(blocked), f32::NEG_INFINITY)?
                }
                MaskMode::Literal => {
                    let m: Vec<f32> = bits.iter().map(|&ok| if ok { 1.0 } else { 0.0 }).collect();
                    let m = Tensor::new(vec![b, n, n], m)?;
                    let scaled = tape.mul(&logits, &m)?;
                    tape.masked_fill(&scaled, &Arc::new(key_pad), f32::NEG_INFINITY)?
                }
            }
        }
    };
    let attn = tape.softmax(&masked)?;
    let ctx = tape.bmm(&attn, &vh)?;
    let ctx = tape.reshape(&ctx, &[b, h, t, d])?;
    let output = merge_heads(tape, &ctx, &w.output, padded)?;
    Ok(AttentionOutput {
        output,
        weights: attn,
    })
}

/// Factorization-heads attention: each query head attends jointly over
/// every (key head, key position) pair, so `H` heads realize `H×H` head
/// relations with the parameter budget of multi-head attention.
pub fn fha(
    tape: &Tape,
    w: &AttentionWeights,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    padded: &[bool],
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    factorized(tape, w, q, k, v, padded, None, cfg)
}

/// Factorization-heads attention restricted by the feedback label mask.
/// A query head outside the half of its row's feedback attends nowhere and
/// contributes a zero block.
#[allow(clippy::too_many_arguments)]
pub fn ffha(
    tape: &Tape,
    w: &AttentionWeights,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    padded: &[bool],
    feedback: &[u8],
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    if cfg.heads % 2 != 0 {
        return Err(DfarError::Config(format!(
            "ffha needs an even head count, got {}",
            cfg.heads
        )));
    }
    factorized(tape, w, q, k, v, padded, Some(feedback), cfg)
}

/// Self-attention encoding of feedback-aware embeddings with the configured
/// variant.
pub fn encode(
    tape: &Tape,
    w: &AttentionWeights,
    embedded: &Tensor,
    feedback: &[u8],
    padded: &[bool],
    cfg: &AttentionConfig,
) -> Result<EncodedSequence> {
    let x = embedded;
    let out = match cfg.variant {
        Variant::Mha => mha(tape, w, x, x, x, padded, cfg)?,
        Variant::Tha => tha(tape, w, x, x, x, padded, cfg)?,
        Variant::Fha => fha(tape, w, x, x, x, padded, cfg)?,
        Variant::Ffha => ffha(tape, w, x, x, x, padded, feedback, cfg)?,
    };
    Ok(EncodedSequence {
        representations: out.output,
        attention: out.weights,
    })
}
