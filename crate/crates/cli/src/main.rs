use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};
use dfar::{DfarError, Result};
use dfar_cli::config::{self, Resolved, KEYS, SEED_ENV};
use dfar_cli::{
    exit_code, parse_axes, parse_grid, run_eval, run_export_attention, run_sweep, run_synth, run_train,
    sibling_manifest, Manifest, RunConfig,
};

const BOOL_KEYS: [&str; 5] = ["last_target_only", "share_refine", "no_mask_op", "no_idl", "no_ibl"];

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn run_args(cmd: Command) -> Command {
    KEYS.iter().fold(cmd, |cmd, &key| {
        let arg = Arg::new(key).long(flag(key)).value_name("VALUE").allow_negative_numbers(true);
        let arg = if BOOL_KEYS.contains(&key) {
            arg.num_args(0..=1).default_missing_value("true").value_name("BOOL")
        } else {
            arg
        };
        cmd.arg(arg)
    })
}

fn checkpoint_arg() -> Arg {
    Arg::new("checkpoint").long("checkpoint").value_name("FILE").required(true)
}

fn cli() -> Command {
    Command::new("dfar")
        .about("Feedback-aware sequential recommender with factorization-heads attention")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            run_args(Command::new("train").about("Train a model; writes checkpoint, history and manifest"))
                .arg(Arg::new("manifest").long("manifest").value_name("FILE").help("Rerun a previous training job")),
        )
        .subcommand(
            run_args(Command::new("eval").about("Validation and test metrics of a checkpoint")).arg(checkpoint_arg()),
        )
        .subcommand(
            run_args(Command::new("export-attention").about("Head-pair attention mass of an ffha checkpoint"))
                .arg(checkpoint_arg()),
        )
        .subcommand(
            Command::new("synth")
                .about("Generate a synthetic corpus (the bundled spec by default)")
                .arg(Arg::new("spec").long("spec").value_name("FILE"))
                .arg(Arg::new("out").long("out").value_name("FILE").help("Output TSV; stdout when absent")),
        )
        .subcommand(
            run_args(Command::new("sweep").about("Train once per loss-weight grid point"))
                .arg(Arg::new("grid").long("grid").value_name("LIST").default_value("1e-4,1e-3,1e-2,1e-1"))
                .arg(Arg::new("axes").long("axes").value_name("AXES").default_value("both")),
        )
}

fn flags(m: &ArgMatches) -> Vec<(String, String)> {
    KEYS.iter()
        .filter(|&&k| k != "config")
        .filter_map(|&k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect()
}

fn resolved(m: &ArgMatches, base: Option<RunConfig>) -> Result<Resolved> {
    let file = m.get_one::<String>("config").map(PathBuf::from);
    config::resolve(base, file.as_deref(), &flags(m), std::env::var(SEED_ENV).ok())
}

fn checkpoint_and_config(m: &ArgMatches) -> Result<(PathBuf, Resolved)> {
    let ckpt = PathBuf::from(m.get_one::<String>("checkpoint").expect("required"));
    let mut r = resolved(m, sibling_manifest(&ckpt)?.map(|man| man.config))?;
    if !r.explicit.contains("out") {
        r.config.out = ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
    }
    Ok((ckpt, r))
}

fn dispatch(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("train", sub)) => {
            let manifest = sub.get_one::<String>("manifest").map(|p| Manifest::read(Path::new(p))).transpose()?;
            let expect = manifest.as_ref().map(|man| man.dataset_hash.clone());
            let r = resolved(sub, manifest.map(|man| man.config))?;
            let run = run_train(&r.config, expect.as_deref())?;
            for rec in &run.outcome.history {
                eprintln!(
                    "epoch {:>3}  loss {:.6}  validation auc {}",
                    rec.epoch,
                    rec.loss,
                    rec.validation_auc.map_or("-".into(), |a| format!("{a:.6}"))
                );
            }
            println!(
                "best epoch {} validation auc {} -> {}",
                run.outcome.best_epoch,
                run.outcome.best_validation_auc.map_or("-".into(), |a| format!("{a:.6}")),
                r.config.out.display()
            );
        }
        Some(("eval", sub)) => {
            let (ckpt, r) = checkpoint_and_config(sub)?;
            let run = run_eval(&ckpt, &r)?;
            print!("{}", dfar_cli::metrics_csv(&run));
        }
        Some(("export-attention", sub)) => {
            let (ckpt, r) = checkpoint_and_config(sub)?;
            print!("{}", run_export_attention(&ckpt, &r)?.to_csv());
        }
        Some(("synth", sub)) => {
            let spec = sub
                .get_one::<String>("spec")
                .map(|p| dfar_cli::read_file(Path::new(p)))
                .transpose()?
                .map(|b| String::from_utf8(b).map_err(|_| DfarError::Config("spec file is not UTF-8".into())))
                .transpose()?;
            let out = sub.get_one::<String>("out").map(PathBuf::from);
            let bytes = run_synth(spec.as_deref(), out.as_deref())?;
            if out.is_none() {
                std::io::stdout().write_all(&bytes)?;
            }
        }
        Some(("sweep", sub)) => {
            let r = resolved(sub, None)?;
            let grid = parse_grid(sub.get_one::<String>("grid").expect("default"))?;
            let axes = parse_axes(sub.get_one::<String>("axes").expect("default"))?;
            let rows = run_sweep(&r.config, &grid, axes)?;
            print!("{}", dfar::evaluation::sweep_csv(&rows));
        }
        _ => unreachable!("subcommand required"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let m = cli().get_matches();
    match dispatch(&m) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dfar: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
