//! Metrics and analyses over trained models.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::Variant;
use crate::data::{batch_iter, epoch_order, Batch, Example, SplitDataset};
use crate::error::{DfarError, Result};
use crate::model::{forward, DfarParams, Heads, ModelConfig};
use crate::prediction::LossWeights;
use crate::rng::Rng;
use crate::tensor::Tape;

/// Fixed-point formatting used by every CSV writer.
pub fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt6).unwrap_or_else(|| "NA".to_string())
}

/// Area under the ROC curve as the Mann-Whitney statistic with tied scores
/// credited one half. `None` unless both classes are present.
pub fn auc(scores: &[f32], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum_pos += avg * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Per-user AUC weighted by the user's example count; users with a single
/// class are left out of both sums.
pub fn gauc(users: &[usize], scores: &[f32], labels: &[u8]) -> Option<f64> {
    let mut groups: BTreeMap<usize, (Vec<f32>, Vec<u8>)> = BTreeMap::new();
    for ((&u, &s), &y) in users.iter().zip(scores).zip(labels) {
        let g = groups.entry(u).or_default();
        g.0.push(s);
        g.1.push(y);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (s, y) in groups.values() {
        if let Some(a) = auc(s, y) {
            num += a * s.len() as f64;
            den += s.len() as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Relevance flags of one query's candidates, best-ranked first.
pub type RankedHits = Vec<bool>;

fn check_queries(queries: &[RankedHits]) -> Result<()> {
    if queries.is_empty() || queries.iter().any(|q| q.is_empty()) {
        return Err(DfarError::Data("ranking metric over an empty candidate list".into()));
    }
    Ok(())
}

/// Mean reciprocal rank of the first hit within the top `k`.
pub fn mrr_at_k(queries: &[RankedHits], k: usize) -> Result<f64> {
    check_queries(queries)?;
    let total: f64 = queries
        .iter()
        .map(|q| match q.iter().take(k).position(|&h| h) {
            Some(p) => 1.0 / (p + 1) as f64,
            None => 0.0,
        })
        .sum();
    Ok(total / queries.len() as f64)
}

/// Mean NDCG with binary gains and `1 / log₂(rank + 1)` discounts.
pub fn ndcg_at_k(queries: &[RankedHits], k: usize) -> Result<f64> {
    check_queries(queries)?;
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let mut total = 0.0;
    for q in queries {
        let dcg: f64 = q
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, &h)| h)
            .map(|(i, _)| discount(i + 1))
            .sum();
        let relevant = q.iter().filter(|&&h| h).count();
        let idcg: f64 = (1..=relevant.min(k)).map(discount).sum();
        if idcg > 0.0 {
            total += dcg / idcg;
        }
    }
    Ok(total / queries.len() as f64)
}

/// Hit list of a single relevant item scored `target` among `others`.
/// Ties rank the relevant item below its equals.
pub fn single_hit_ranking(target: f32, others: &[f32]) -> RankedHits {
    let above = others.iter().filter(|&&s| s >= target).count();
    let mut hits = vec![false; others.len() + 1];
    hits[above] = true;
    hits
}

/// Positive-tower probabilities for `examples`, in order.
pub fn predict(
    params: &DfarParams,
    cfg: &ModelConfig,
    data: &SplitDataset,
    examples: &[Example],
    batch_size: usize,
) -> Result<Vec<f32>> {
    let order = epoch_order(examples.len(), None);
    let mut out = Vec::with_capacity(examples.len());
    for batch in batch_iter(data, examples, &order, batch_size, cfg.max_len) {
        out.extend(score_batch(params, cfg, &batch)?);
    }
    Ok(out)
}

pub fn score_batch(params: &DfarParams, cfg: &ModelConfig, batch: &Batch) -> Result<Vec<f32>> {
    let tape = Tape::inference();
    let fwd = forward(&tape, params, cfg, batch, Heads::positive_only())?;
    Ok(fwd
        .logit_pos
        .data()
        .iter()
        .map(|&z| crate::tensor::sigmoid(z))
        .collect())
}

/// Negatives drawn for a positive target whose user has no test negatives.
pub const FALLBACK_CANDIDATES: usize = 99;

pub const RANKING_PROTOCOL: &str = "each positive target ranked against the same user's negative \
targets of the split (same history); users without negatives use 99 seeded unseen items; ties rank \
the positive last";

/// Ranking queries for the positive targets of `examples` given their
/// scores.
pub fn ranking_queries(
    params: &DfarParams,
    cfg: &ModelConfig,
    data: &SplitDataset,
    examples: &[Example],
    scores: &[f32],
    seed: u64,
    batch_size: usize,
) -> Result<Vec<RankedHits>> {
    let mut by_user: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        by_user.entry(ex.timeline).or_default().push(i);
    }
    let mut rng = Rng::stream(seed, "fallback-candidates");
    let mut queries = Vec::new();
    for (&tl, idxs) in &by_user {
        let negatives: Vec<f32> = idxs
            .iter()
            .filter(|&&i| data.target_label(&examples[i]) == 0)
            .map(|&i| scores[i])
            .collect();
        for &i in idxs.iter().filter(|&&i| data.target_label(&examples[i]) == 1) {
            let others = if !negatives.is_empty() {
                negatives.clone()
            } else {
                let seen: BTreeSet<usize> = data.timelines[tl].items.iter().copied().collect();
                let unseen: Vec<usize> = (1..=cfg.n_items).filter(|it| !seen.contains(it)).collect();
                if unseen.is_empty() {
                    continue;
                }
                let picks: Vec<usize> = (0..FALLBACK_CANDIDATES).map(|_| unseen[rng.below(unseen.len())]).collect();
                let mut out = Vec::with_capacity(picks.len());
                for chunk in picks.chunks(batch_size.max(1)) {
                    let ex = vec![examples[i]; chunk.len()];
                    let mut batch = Batch::build(data, &ex, cfg.max_len);
                    batch.target_ids = chunk.to_vec();
                    out.extend(score_batch(params, cfg, &batch)?);
                }
                out
            };
            queries.push(single_hit_ranking(scores[i], &others));
        }
    }
    Ok(queries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: usize,
    /// Exclusive; `None` is unbounded.
    pub hi: Option<usize>,
    pub count: usize,
    pub auc: Option<f64>,
}

/// Default history-length boundaries.
pub const DEFAULT_EDGES: [usize; 4] = [5, 15, 50, 100];

/// Groups examples by history length at the interior boundaries `edges`:
/// `[0, e₁), [e₁, e₂), …, [eₙ, ∞)`, so `n` edges give `n + 1` groups.
pub fn bucket_by_length(lengths: &[usize], scores: &[f32], labels: &[u8], edges: &[usize]) -> Result<Vec<Bucket>> {
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DfarError::Config(format!("bucket edges {edges:?} are not strictly increasing")));
    }
    let mut bounds = vec![0];
    bounds.extend_from_slice(edges);
    let mut out = Vec::with_capacity(bounds.len());
    for (b, &lo) in bounds.iter().enumerate() {
        let hi = bounds.get(b + 1).copied();
        let inside = |l: usize| l >= lo && hi.is_none_or(|h| l < h);
        let (mut s, mut y) = (Vec::new(), Vec::new());
        for i in 0..lengths.len() {
            if inside(lengths[i]) {
                s.push(scores[i]);
                y.push(labels[i]);
            }
        }
        out.push(Bucket {
            lo,
            hi,
            count: s.len(),
            auc: auc(&s, &y),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
    pub mrr_at_k: Option<f64>,
    pub ndcg_at_k: Option<f64>,
    pub k: usize,
    pub n_examples: usize,
    pub n_queries: usize,
    pub per_bucket: Vec<Bucket>,
    pub protocol: String,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "auc,{}", fmt_opt(self.auc));
        let _ = writeln!(s, "gauc,{}", fmt_opt(self.gauc));
        let _ = writeln!(s, "mrr@{},{}", self.k, fmt_opt(self.mrr_at_k));
        let _ = writeln!(s, "ndcg@{},{}", self.k, fmt_opt(self.ndcg_at_k));
        let _ = writeln!(s, "examples,{}", self.n_examples);
        let _ = writeln!(s, "ranking_queries,{}", self.n_queries);
        let _ = writeln!(s, "ranking_protocol,\"{}\"", self.protocol);
        s
    }

    pub fn buckets_csv(&self) -> String {
        let mut s = String::from("lo,hi,count,auc\n");
        for b in &self.per_bucket {
            let hi = b.hi.map(|h| h.to_string()).unwrap_or_else(|| "inf".into());
            let _ = writeln!(s, "{},{},{},{}", b.lo, hi, b.count, fmt_opt(b.auc));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub k: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 10,
            batch_size: 256,
            seed: 0,
        }
    }
}

pub fn evaluate(
    params: &DfarParams,
    cfg: &ModelConfig,
    data: &SplitDataset,
    examples: &[Example],
    edges: &[usize],
    opts: EvalOptions,
) -> Result<MetricsReport> {
    let scores = predict(params, cfg, data, examples, opts.batch_size)?;
    let labels: Vec<u8> = examples.iter().map(|e| data.target_label(e)).collect();
    let users: Vec<usize> = examples.iter().map(|e| data.timelines[e.timeline].user).collect();
    let lengths: Vec<usize> = examples.iter().map(|e| e.prefix_end).collect();
    let queries = ranking_queries(params, cfg, data, examples, &scores, opts.seed, opts.batch_size)?;
    let (mrr, ndcg) = if queries.is_empty() {
        (None, None)
    } else {
        (Some(mrr_at_k(&queries, opts.k)?), Some(ndcg_at_k(&queries, opts.k)?))
    };
    Ok(MetricsReport {
        auc: auc(&scores, &labels),
        gauc: gauc(&users, &scores, &labels),
        mrr_at_k: mrr,
        ndcg_at_k: ndcg,
        k: opts.k,
        n_examples: examples.len(),
        n_queries: queries.len(),
        per_bucket: bucket_by_length(&lengths, &scores, &labels, edges)?,
        protocol: RANKING_PROTOCOL.to_string(),
    })
}

/// Attention mass accumulated per (query head, key head) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub heads: usize,
    /// Row-major `H × H` sums.
    pub raw: Vec<f64>,
    /// Query rows that attended anywhere, per query head.
    pub rows: Vec<usize>,
}

impl HeadWeights {
    pub fn get(&self, h1: usize, h2: usize) -> f64 {
        self.raw[h1 * self.heads + h2]
    }

    /// Each query head's row divided by its total (zero rows stay zero).
    pub fn normalized(&self) -> Vec<f64> {
        let h = self.heads;
        let mut out = self.raw.clone();
        for r in 0..h {
            let total: f64 = self.raw[r * h..(r + 1) * h].iter().sum();
            if total > 0.0 {
                for v in &mut out[r * h..(r + 1) * h] {
                    *v /= total;
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let norm = self.normalized();
        let mut s = String::from("h1,h2,weight,normalized\n");
        for h1 in 0..self.heads {
            for h2 in 0..self.heads {
                let i = h1 * self.heads + h2;
                let _ = writeln!(s, "{h1},{h2},{},{}", fmt6(self.raw[i]), fmt6(norm[i]));
            }
        }
        s
    }
}

/// Sums feedback-aware factorization attention over every non-padded query
/// position of `examples`.
pub fn accumulate_head_weights(
    params: &DfarParams,
    cfg: &ModelConfig,
    data: &SplitDataset,
    examples: &[Example],
    batch_size: usize,
) -> Result<HeadWeights> {
    if cfg.variant != Variant::Ffha {
        return Err(DfarError::Capability(format!(
            "head-pair weights need an ffha encoder, model uses {}",
            cfg.variant
        )));
    }
    let (h, t) = (cfg.heads, cfg.max_len);
    let n = h * t;
    let mut acc = HeadWeights {
        heads: h,
        raw: vec![0.0; h * h],
        rows: vec![0; h],
    };
    let order = epoch_order(examples.len(), None);
    for batch in batch_iter(data, examples, &order, batch_size, t) {
        let tape = Tape::inference();
        let fwd = forward(&tape, params, cfg, &batch, Heads::positive_only())?;
        let w = fwd.attention.data();
        for b in 0..batch.size {
            for h1 in 0..h {
                for i in 0..t {
                    if batch.padded[b * t + i] {
                        continue;
                    }
                    let row = &w[(b * n + h1 * t + i) * n..(b * n + h1 * t + i + 1) * n];
                    let mut any = false;
                    for h2 in 0..h {
                        let mass: f64 = row[h2 * t..(h2 + 1) * t].iter().map(|&v| v as f64).sum();
                        any |= mass > 0.0;
                        acc.raw[h1 * h + h2] += mass;
                    }
                    acc.rows[h1] += usize::from(any);
                }
            }
        }
    }
    Ok(acc)
}

/// Which loss weights a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxes {
    Bpr,
    Disentangle,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_bpr: f32,
    pub lambda_d: f32,
    pub validation_auc: Option<f64>,
    pub error: Option<String>,
}

/// Standard loss-weight grid.
pub const DEFAULT_GRID: [f32; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

/// Runs `train` once per grid point; a failing cell is recorded and the
/// sweep moves on.
pub fn sweep_loss_weights(
    grid: &[f32],
    axes: SweepAxes,
    base: LossWeights,
    mut train: impl FnMut(LossWeights) -> Result<Option<f64>>,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(DfarError::Config("sweep grid is empty".into()));
    }
    let points: Vec<(f32, f32)> = match axes {
        SweepAxes::Bpr => grid.iter().map(|&g| (g, base.lambda_d)).collect(),
        SweepAxes::Disentangle => grid.iter().map(|&g| (base.lambda_bpr, g)).collect(),
        SweepAxes::Both => grid.iter().flat_map(|&a| grid.iter().map(move |&b| (a, b))).collect(),
    };
    let mut rows = Vec::with_capacity(points.len());
    for (lambda_bpr, lambda_d) in points {
        let w = LossWeights {
            lambda_bpr,
            lambda_d,
            ..base
        };
        let (validation_auc, error) = match train(w) {
            Ok(a) => (a, None),
            Err(e) => (None, Some(e.to_string())),
        };
        rows.push(SweepRow {
            lambda_bpr,
            lambda_d,
            validation_auc,
            error,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda_bpr,lambda_d,validation_auc,error\n");
    for r in rows {
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(
            s,
            "{},{},{},{}",
            fmt6(r.lambda_bpr as f64),
            fmt6(r.lambda_d as f64),
            fmt_opt(r.validation_auc),
            err
        );
    }
    s
}
