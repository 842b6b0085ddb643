//! Library half of the `dfar` command: every subcommand is a function from a
//! resolved configuration to files in the output directory.

pub mod config;

use std::fs;
use std::io;
use std::path::Path;

use dfar::checkpoint::{self, CheckpointMeta};
use dfar::data::{content_hash, parse_interactions, temporal_split, write_interactions, Corpus, Interaction, SplitDataset};
use dfar::evaluation::{
    accumulate_head_weights, evaluate, sweep_csv, sweep_loss_weights, EvalOptions, HeadWeights, DEFAULT_EDGES, MetricsReport, SweepAxes,
    SweepRow,
};
use dfar::model::{DfarParams, ModelConfig};
use dfar::synth::{synth_generate, SynthSpec};
use dfar::train::{history_csv, train, TrainOutcome};
use dfar::{DfarError, Result};
use serde::{Deserialize, Serialize};

pub use config::{resolve, Resolved, RunConfig};

/// Generator spec of the corpus used when no `data` path is given.
pub const BUNDLED_SPEC: &str = include_str!("../data/planted.spec");

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BUCKETS_FILE: &str = "buckets.csv";
pub const HEAD_WEIGHTS_FILE: &str = "head_weights.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

pub fn exit_code(e: &DfarError) -> i32 {
    match e {
        DfarError::Config(_) => 2,
        DfarError::Compatibility(_) | DfarError::Capability(_) => 3,
        DfarError::Parse { .. } | DfarError::Data(_) | DfarError::DegenerateSplit(_) => 4,
        DfarError::Tensor(_) | DfarError::Io(_) => 1,
    }
}

fn with_path(path: &Path, e: io::Error) -> DfarError {
    DfarError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| with_path(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| with_path(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| with_path(path, e))
}

/// Corpus TSV preceded by the generating spec as `#` comment lines.
pub fn synth_tsv(spec: &SynthSpec, rows: &[Interaction]) -> Result<Vec<u8>> {
    let mut out = b"# dfar synthetic corpus\n".to_vec();
    for line in spec.to_lines() {
        out.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    write_interactions(&mut out, rows)?;
    Ok(out)
}

pub fn bundled_spec() -> SynthSpec {
    SynthSpec::parse(BUNDLED_SPEC).expect("bundled spec is valid")
}

pub struct Dataset {
    pub corpus: Corpus,
    pub split: SplitDataset,
    /// SHA-256 of the TSV bytes.
    pub content_hash: String,
}

impl Dataset {
    pub fn item_fingerprint(&self) -> String {
        self.corpus.items.fingerprint()
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let (rows, bytes) = match &cfg.data {
        Some(path) => {
            let bytes = read_file(path)?;
            (parse_interactions(bytes.as_slice(), cfg.format)?, bytes)
        }
        None => {
            let spec = bundled_spec();
            let rows = synth_generate(&spec)?;
            let bytes = synth_tsv(&spec, &rows)?;
            (rows, bytes)
        }
    };
    let corpus = Corpus::densify(&rows);
    let split = temporal_split(&corpus.interactions, cfg.split_options())?;
    Ok(Dataset {
        corpus,
        split,
        content_hash: content_hash(&bytes),
    })
}

/// Everything needed to rerun a training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub seed: u64,
    pub dataset_hash: String,
    pub item_fingerprint: String,
    pub model: ModelConfig,
    pub best_epoch: usize,
    pub best_validation_auc: Option<f64>,
    pub final_loss: Option<f64>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        serde_json::from_slice(&bytes).map_err(|e| DfarError::Config(format!("{}: {e}", path.display())))
    }
}

pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub manifest: Manifest,
}

/// Trains and writes the checkpoint, history and manifest into `cfg.out`.
/// With `expect_hash`, the dataset must match a previous run's.
pub fn run_train(cfg: &RunConfig, expect_hash: Option<&str>) -> Result<TrainRun> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    if let Some(h) = expect_hash {
        if h != data.content_hash {
            return Err(DfarError::Compatibility(format!(
                "dataset hash {} differs from the manifest's {h}",
                data.content_hash
            )));
        }
    }
    let model = cfg.model(data.corpus.items.len());
    let outcome = train(&model, &data.split, &cfg.train_config(), None)?;
    let manifest = Manifest {
        config: cfg.clone(),
        seed: cfg.seed,
        dataset_hash: data.content_hash.clone(),
        item_fingerprint: data.item_fingerprint(),
        model,
        best_epoch: outcome.best_epoch,
        best_validation_auc: outcome.best_validation_auc,
        final_loss: outcome.history.last().map(|r| r.loss),
    };
    let meta = CheckpointMeta {
        model,
        item_fingerprint: manifest.item_fingerprint.clone(),
    };
    let mut ckpt = Vec::new();
    checkpoint::save(&mut ckpt, &outcome.params, &meta)?;
    write_file(&cfg.out.join(CHECKPOINT_FILE), &ckpt)?;
    write_file(&cfg.out.join(HISTORY_FILE), history_csv(&outcome.history).as_bytes())?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| DfarError::Config(e.to_string()))?;
    write_file(&cfg.out.join(MANIFEST_FILE), format!("{json}\n").as_bytes())?;
    Ok(TrainRun { outcome, manifest })
}

/// Manifest written next to a checkpoint, if any.
pub fn sibling_manifest(checkpoint: &Path) -> Result<Option<Manifest>> {
    let path = checkpoint.parent().unwrap_or(Path::new("")).join(MANIFEST_FILE);
    if path.is_file() {
        Manifest::read(&path).map(Some)
    } else {
        Ok(None)
    }
}

pub struct Loaded {
    pub params: DfarParams,
    pub model: ModelConfig,
    pub data: Dataset,
}

/// Loads a checkpoint and the configured dataset and checks they belong
/// together. Model settings given explicitly must match the checkpoint's.
pub fn load_compatible(checkpoint_path: &Path, r: &Resolved) -> Result<Loaded> {
    let bytes = read_file(checkpoint_path)?;
    let (meta, params) = checkpoint::load(bytes.as_slice())?;
    let m = meta.model;
    let c = &r.config;
    let given = |k: &str| r.explicit.contains(k);
    let checks = [
        ("dim", given("dim"), c.dim.to_string(), m.dim.to_string()),
        ("heads", given("heads"), c.heads.to_string(), m.heads.to_string()),
        ("max_len", given("max_len"), c.max_len.to_string(), m.max_len.to_string()),
        (
            "variant",
            given("variant") || given("no_mask_op"),
            c.effective_variant().to_string(),
            m.variant.to_string(),
        ),
    ];
    for (key, _, want, have) in checks.iter().filter(|c| c.1) {
        if want != have {
            return Err(DfarError::Compatibility(format!(
                "{key} = {want} but the checkpoint was trained with {have}"
            )));
        }
    }
    let data = load_dataset(c)?;
    let fp = data.item_fingerprint();
    if fp != meta.item_fingerprint {
        return Err(DfarError::Compatibility(format!(
            "item id space {} does not match the checkpoint's {}",
            &fp[..12],
            &meta.item_fingerprint[..meta.item_fingerprint.len().min(12)]
        )));
    }
    Ok(Loaded { params, model: m, data })
}

pub struct EvalRun {
    pub validation: MetricsReport,
    pub test: MetricsReport,
}

fn prefixed(split: &str, csv: &str) -> String {
    csv.lines().skip(1).map(|l| format!("{split},{l}\n")).collect()
}

pub fn metrics_csv(run: &EvalRun) -> String {
    let mut s = String::from("split,metric,value\n");
    s += &prefixed("validation", &run.validation.to_csv());
    s += &prefixed("test", &run.test.to_csv());
    s
}

pub fn buckets_csv(run: &EvalRun) -> String {
    let mut s = String::from("split,lo,hi,count,auc\n");
    s += &prefixed("validation", &run.validation.buckets_csv());
    s += &prefixed("test", &run.test.buckets_csv());
    s
}

/// Scores validation and test and writes the metric and bucket tables.
pub fn run_eval(checkpoint_path: &Path, r: &Resolved) -> Result<EvalRun> {
    let l = load_compatible(checkpoint_path, r)?;
    let opts = EvalOptions {
        k: r.config.k,
        batch_size: r.config.eval_batch_size,
        seed: r.config.seed,
    };
    let split = &l.data.split;
    let run = EvalRun {
        validation: evaluate(&l.params, &l.model, split, &split.validation, &DEFAULT_EDGES, opts)?,
        test: evaluate(&l.params, &l.model, split, &split.test, &DEFAULT_EDGES, opts)?,
    };
    write_file(&r.config.out.join(METRICS_FILE), metrics_csv(&run).as_bytes())?;
    write_file(&r.config.out.join(BUCKETS_FILE), buckets_csv(&run).as_bytes())?;
    Ok(run)
}

/// Head-pair attention mass over the test examples.
pub fn run_export_attention(checkpoint_path: &Path, r: &Resolved) -> Result<HeadWeights> {
    let l = load_compatible(checkpoint_path, r)?;
    let split = &l.data.split;
    let hw = accumulate_head_weights(&l.params, &l.model, split, &split.test, r.config.eval_batch_size)?;
    write_file(&r.config.out.join(HEAD_WEIGHTS_FILE), hw.to_csv().as_bytes())?;
    Ok(hw)
}

/// Generates a corpus from `spec_text` (the bundled spec when `None`).
pub fn run_synth(spec_text: Option<&str>, out: Option<&Path>) -> Result<Vec<u8>> {
    let spec = SynthSpec::parse(spec_text.unwrap_or(BUNDLED_SPEC))?;
    let bytes = synth_tsv(&spec, &synth_generate(&spec)?)?;
    if let Some(path) = out {
        write_file(path, &bytes)?;
    }
    Ok(bytes)
}

pub fn parse_grid(text: &str) -> Result<Vec<f32>> {
    text.split(',')
        .map(|v| {
            let v = v.trim();
            v.parse::<f32>()
                .ok()
                .filter(|g| g.is_finite() && *g >= 0.0)
                .ok_or_else(|| DfarError::Config(format!("grid: `{v}` is not a non-negative number")))
        })
        .collect()
}

pub fn parse_axes(text: &str) -> Result<SweepAxes> {
    match text {
        "bpr" => Ok(SweepAxes::Bpr),
        "disentangle" => Ok(SweepAxes::Disentangle),
        "both" => Ok(SweepAxes::Both),
        other => Err(DfarError::Config(format!("axes: expected bpr, disentangle or both, got `{other}`"))),
    }
}

/// One training run per grid cell; writes the validation AUC table.
pub fn run_sweep(cfg: &RunConfig, grid: &[f32], axes: SweepAxes) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let model = cfg.model(data.corpus.items.len());
    let base = cfg.train_config();
    let rows = sweep_loss_weights(grid, axes, base.weights, |weights| {
        let tcfg = dfar::train::TrainConfig { weights, ..base };
        Ok(train(&model, &data.split, &tcfg, None)?.best_validation_auc)
    })?;
    write_file(&cfg.out.join(SWEEP_FILE), sweep_csv(&rows).as_bytes())?;
    Ok(rows)
}
