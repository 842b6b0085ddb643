//! Mini-batch training with early stopping on validation AUC.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, epoch_order, SplitDataset};
use crate::error::{DfarError, Result};
use crate::evaluation::{auc, fmt6, fmt_opt, predict};
use crate::model::{batch_loss, DfarParams, ModelConfig};
use crate::params::ParamGroup;
use crate::prediction::LossWeights;
use crate::rng::Rng;
use crate::tensor::{AdamConfig, AdamState, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 200,
            eval_batch_size: 512,
            patience: 2,
            seed: 0,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(DfarError::Config("batch sizes must be ≥ 1".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(DfarError::Config(format!("lr must be > 0, got {}", self.adam.lr)));
        }
        if self.patience == 0 {
            return Err(DfarError::Config("patience must be ≥ 1".into()));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub bce: f64,
    pub bpr: Option<f64>,
    pub disentangle: Option<f64>,
    pub validation_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the best validation epoch (the last epoch when validation
    /// AUC is undefined throughout).
    pub params: DfarParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_auc: Option<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,bce,bpr,disentangle,validation_auc\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch,
            fmt6(r.loss),
            fmt6(r.bce),
            fmt_opt(r.bpr),
            fmt_opt(r.disentangle),
            fmt_opt(r.validation_auc)
        );
    }
    s
}

/// One optimizer step on every batch of `data.train`.
pub fn train_epoch(
    params: &mut DfarParams,
    adam: &mut AdamState,
    cfg: &ModelConfig,
    data: &SplitDataset,
    tcfg: &TrainConfig,
    shuffle: &mut Rng,
) -> Result<(f64, f64, Option<f64>, Option<f64>)> {
    let order = epoch_order(data.train.len(), Some(shuffle));
    let (mut loss, mut bce, mut bpr, mut dis) = (0.0, 0.0, 0.0, 0.0);
    let (mut has_bpr, mut has_dis) = (false, false);
    let mut n = 0usize;
    for batch in batch_iter(data, &data.train, &order, tcfg.batch_size, cfg.max_len) {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let (parts, _) = batch_loss(&tape, &bound, cfg, &batch, &tcfg.weights)?;
        let grads = tape.backward(&parts.total)?;
        let g: Vec<Option<&[f32]>> = bound.named().iter().map(|(_, t)| grads.get(t)).collect();
        let mut targets: Vec<_> = params.named_mut().into_iter().map(|(_, t)| t).collect();
        adam.step(&mut targets, &g)?;

        let w = batch.size as f64;
        loss += parts.total.item()? as f64 * w;
        bce += parts.bce as f64 * w;
        if let Some(v) = parts.bpr {
            bpr += v as f64 * w;
            has_bpr = true;
        }
        if let Some(v) = parts.disentangle {
            dis += v as f64 * w;
            has_dis = true;
        }
        n += batch.size;
    }
    let n = n as f64;
    Ok((loss / n, bce / n, has_bpr.then(|| bpr / n), has_dis.then(|| dis / n)))
}

pub fn validation_auc(params: &DfarParams, cfg: &ModelConfig, data: &SplitDataset, batch_size: usize) -> Result<Option<f64>> {
    if data.validation.is_empty() {
        return Ok(None);
    }
    let scores = predict(params, cfg, data, &data.validation, batch_size)?;
    let labels: Vec<u8> = data.validation.iter().map(|e| data.target_label(e)).collect();
    Ok(auc(&scores, &labels))
}

/// Trains from `init` (or a fresh seeded initialization).
pub fn train(
    cfg: &ModelConfig,
    data: &SplitDataset,
    tcfg: &TrainConfig,
    init: Option<DfarParams>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if data.train.is_empty() {
        return Err(DfarError::Data("training set is empty".into()));
    }
    let mut params = match init {
        Some(p) => p,
        None => DfarParams::init(cfg, tcfg.seed)?,
    };
    let snapshot: Vec<_> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut adam = AdamState::new(tcfg.adam, &snapshot);
    let mut shuffle = Rng::stream(tcfg.seed, "shuffle");
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, DfarParams)> = None;
    let mut stale = 0;
    for epoch in 1..=tcfg.epochs {
        let (loss, bce, bpr, dis) = train_epoch(&mut params, &mut adam, cfg, data, tcfg, &mut shuffle)?;
        if !loss.is_finite() {
            return Err(DfarError::Tensor(crate::tensor::TensorError::Numeric {
                op: "train",
                msg: format!("loss became {loss} in epoch {epoch}"),
            }));
        }
        let val = validation_auc(&params, cfg, data, tcfg.eval_batch_size)?;
        history.push(EpochRecord {
            epoch,
            loss,
            bce,
            bpr,
            disentangle: dis,
            validation_auc: val,
        });
        let Some(v) = val else { continue };
        match &best {
            Some((b, _, _)) if v <= *b => {
                stale += 1;
                if stale >= tcfg.patience {
                    break;
                }
            }
            _ => {
                best = Some((v, epoch, params.clone()));
                stale = 0;
            }
        }
    }
    Ok(match best {
        Some((v, epoch, p)) => TrainOutcome {
            params: p,
            history,
            best_epoch: epoch,
            best_validation_auc: Some(v),
        },
        None => TrainOutcome {
            params,
            best_epoch: history.len(),
            history,
            best_validation_auc: None,
        },
    })
}
