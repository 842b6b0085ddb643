//! Run configuration: built-in defaults, overridden by a flat `key = value`
//! file, overridden by command-line flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dfar::attention::{MaskMode, Variant};
use dfar::data::{Format, SplitMode, SplitOptions};
use dfar::dual_interest::Aggregation;
use dfar::model::ModelConfig;
use dfar::prediction::LossWeights;
use dfar::tensor::AdamConfig;
use dfar::train::TrainConfig;
use dfar::{DfarError, Result};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "DFAR_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Interaction TSV; the bundled synthetic corpus when absent.
    pub data: Option<PathBuf>,
    pub format: Format,
    pub split: SplitMode,
    pub last_target_only: bool,
    pub max_len: usize,
    pub dim: usize,
    pub heads: usize,
    /// Talking-heads intermediate head count; `heads` when absent.
    pub mix_heads: Option<usize>,
    pub variant: Variant,
    pub mask_mode: MaskMode,
    pub aggregation: Aggregation,
    pub share_refine: bool,
    /// Ablation: factorization heads without the feedback label mask.
    pub no_mask_op: bool,
    /// Ablation: drop the disentangling loss.
    pub no_idl: bool,
    /// Ablation: drop the pair-wise loss and the negative tower.
    pub no_ibl: bool,
    pub lambda_bpr: f32,
    pub lambda_d: f32,
    pub lambda_reg: f32,
    pub lr: f32,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub k: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let t = TrainConfig::default();
        Self {
            data: None,
            format: Format::Feedback,
            split: SplitMode::LastTwoDays,
            last_target_only: false,
            max_len: 20,
            dim: 32,
            heads: 2,
            mix_heads: None,
            variant: Variant::Ffha,
            mask_mode: MaskMode::NegInf,
            aggregation: Aggregation::Dimension,
            share_refine: false,
            no_mask_op: false,
            no_idl: false,
            no_ibl: false,
            lambda_bpr: w.lambda_bpr,
            lambda_d: w.lambda_d,
            lambda_reg: w.lambda_reg,
            lr: AdamConfig::default().lr,
            batch_size: t.batch_size,
            eval_batch_size: t.eval_batch_size,
            epochs: t.epochs,
            patience: t.patience,
            seed: 0,
            k: 10,
            out: PathBuf::from("out"),
        }
    }
}

pub const KEYS: [&str; 27] = [
    "data",
    "format",
    "split",
    "last_target_only",
    "max_len",
    "dim",
    "heads",
    "mix_heads",
    "variant",
    "mask_mode",
    "aggregation",
    "share_refine",
    "no_mask_op",
    "no_idl",
    "no_ibl",
    "lambda_bpr",
    "lambda_d",
    "lambda_reg",
    "lr",
    "batch_size",
    "eval_batch_size",
    "epochs",
    "patience",
    "seed",
    "k",
    "out",
    "config",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| DfarError::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(DfarError::Config(format!("{key}: expected true or false, got `{value}`"))),
    }
}

/// Field values together with the set of keys given explicitly.
#[derive(Debug, Clone, Default)]
pub struct Resolved {
    pub config: RunConfig,
    pub explicit: BTreeSet<String>,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "format" => self.format = v.parse()?,
            "split" => self.split = v.parse()?,
            "last_target_only" => self.last_target_only = parse_bool(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "mix_heads" => self.mix_heads = Some(parse(key, v)?),
            "variant" => self.variant = v.parse()?,
            "mask_mode" => self.mask_mode = v.parse()?,
            "aggregation" => self.aggregation = v.parse()?,
            "share_refine" => self.share_refine = parse_bool(key, v)?,
            "no_mask_op" => self.no_mask_op = parse_bool(key, v)?,
            "no_idl" => self.no_idl = parse_bool(key, v)?,
            "no_ibl" => self.no_ibl = parse_bool(key, v)?,
            "lambda_bpr" => self.lambda_bpr = parse(key, v)?,
            "lambda_d" => self.lambda_d = parse(key, v)?,
            "lambda_reg" => self.lambda_reg = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            other => return Err(DfarError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Effective variant after the ablation flags.
    pub fn effective_variant(&self) -> Variant {
        if self.no_mask_op {
            Variant::Fha
        } else {
            self.variant
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_bpr: if self.no_ibl { 0.0 } else { self.lambda_bpr },
            lambda_d: if self.no_idl { 0.0 } else { self.lambda_d },
            lambda_reg: self.lambda_reg,
        }
    }

    pub fn split_options(&self) -> SplitOptions {
        SplitOptions {
            mode: self.split,
            last_target_only: self.last_target_only,
        }
    }

    pub fn model(&self, n_items: usize) -> ModelConfig {
        ModelConfig {
            n_items,
            dim: self.dim,
            heads: self.heads,
            mix_heads: self.mix_heads.unwrap_or(self.heads),
            max_len: self.max_len,
            variant: self.effective_variant(),
            mask_mode: self.mask_mode,
            aggregation: self.aggregation,
            share_refine: self.share_refine,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
            patience: self.patience,
            seed: self.seed,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            weights: self.weights(),
        }
    }

    /// Checks every field before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.no_mask_op && self.variant != Variant::Ffha {
            return Err(DfarError::Config(format!(
                "no_mask_op removes the label mask of ffha but variant is {}",
                self.variant
            )));
        }
        if self.k == 0 {
            return Err(DfarError::Config("k must be ≥ 1".into()));
        }
        if self.epochs == 0 {
            return Err(DfarError::Config("epochs must be ≥ 1".into()));
        }
        self.model(1).validate()?;
        self.train_config().validate()
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| DfarError::Parse {
            line: i + 1,
            msg: format!("expected key = value, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Layers `file` (if any), then `flags` over `base` (the defaults when
/// absent). Without a base, the seed falls back to `DFAR_SEED` when neither
/// file nor flags set it.
pub fn resolve(
    base: Option<RunConfig>,
    file: Option<&Path>,
    flags: &[(String, String)],
    env_seed: Option<String>,
) -> Result<Resolved> {
    let has_base = base.is_some();
    let mut r = Resolved {
        config: base.unwrap_or_default(),
        explicit: BTreeSet::new(),
    };
    let mut pairs = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for (k, v) in parse_pairs(&text)? {
            // paths in a config file are relative to the file
            let v = if (k == "data" || k == "out") && !v.is_empty() && Path::new(&v).is_relative() {
                base.join(&v).to_string_lossy().into_owned()
            } else {
                v
            };
            pairs.push((k, v));
        }
    }
    pairs.extend(flags.iter().cloned());
    for (k, v) in &pairs {
        r.config.set(k, v)?;
        r.explicit.insert(k.clone());
    }
    if !has_base && !r.explicit.contains("seed") {
        if let Some(s) = env_seed {
            r.config.set("seed", &s).map_err(|_| DfarError::Config(format!("{SEED_ENV}: cannot parse `{s}`")))?;
            r.explicit.insert("seed".into());
        }
    }
    r.config.validate()?;
    Ok(r)
}
