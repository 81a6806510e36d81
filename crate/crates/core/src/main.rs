//! Command-line front end: dataset generation, training, evaluation,
//! ablations, the theory-oracle suite, and feature export.
//!
//! Exit codes: 0 on success, 1 on configuration errors (bad flags, bad
//! config file), 2 on runtime errors. The output root comes from `--out`,
//! else the `RCA_OUT_ROOT` environment variable, else `./rca-runs`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use rca::config::{parse_config, ExperimentConfig, Mode};
use rca::data::{load_csv, save_csv, DomainTag};
use rca::error::Error;
use rca::networks::ParamSet;
use rca::report::{
    export_features, fresh_run_dir, resolve_out_root, run_ablations, run_experiment,
};
use rca::theory::run_oracle_suite;
use rca::trainer::{evaluate, EvalHead};

#[derive(Parser)]
#[command(
    name = "rca",
    version,
    about = "Domain adaptation by regularized conditional alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured source/target datasets as CSV files.
    Gen {
        /// JSON experiment config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output root directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train per the config and write report, metrics history, checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config mode: full | source-only | target-only.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate a saved checkpoint on a labeled CSV dataset.
    Eval {
        /// Parameter file written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Labeled CSV (class index in the last column).
        #[arg(long)]
        data: PathBuf,
        /// Inference head: class | joint.
        #[arg(long, default_value = "class")]
        which: String,
    },
    /// Run the ablation table: five loss-removal rows plus the source-only
    /// and full references, same seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the theory-oracle suite and emit one JSON record per check.
    Oracle {
        #[arg(long)]
        seed: Option<u64>,
        /// Write records to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export encoder features and a 2-d PCA projection for the configured
    /// datasets under a trained model.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(
    path: Option<&Path>,
    seed: Option<u64>,
    mode: Option<&str>,
) -> Result<ExperimentConfig, Error> {
    let mut cfg = match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            parse_config(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(mode) = mode {
        cfg.mode = match mode {
            "full" => Mode::Full,
            "source-only" => Mode::SourceOnly,
            "target-only" => Mode::TargetOnly,
            "ablation" => Mode::Ablation,
            other => {
                return Err(Error::Config {
                    path: "--mode".into(),
                    message: format!(
                        "unknown mode `{other}` (expected full, source-only, target-only, ablation)"
                    ),
                })
            }
        };
    }
    Ok(cfg)
}

fn run_command(command: Command) -> Result<(), Error> {
    match command {
        Command::Gen { config, out, seed } => {
            let cfg = load_config(config.as_deref(), seed, None)?;
            let (src, tgt) = cfg.build_datasets()?;
            let root = resolve_out_root(out.as_deref());
            let dir = fresh_run_dir(&root, &format!("data-{}", &cfg.digest()[..8]))?;
            let src_path = dir.join("source.csv");
            let tgt_path = dir.join("target.csv");
            save_csv(&src, &src_path)?;
            save_csv(&tgt, &tgt_path)?;
            println!(
                "{}",
                serde_json::json!({
                    "source": src_path.display().to_string(),
                    "target": tgt_path.display().to_string(),
                    "n_source": src.n(),
                    "n_target": tgt.n(),
                })
            );
            Ok(())
        }
        Command::Train {
            config,
            out,
            seed,
            mode,
        } => {
            let cfg = load_config(config.as_deref(), seed, mode.as_deref())?;
            let root = resolve_out_root(out.as_deref());
            if cfg.mode == Mode::Ablation {
                let table = run_ablations(&cfg, &root)?;
                for (row, report) in &table {
                    println!(
                        "{}",
                        serde_json::json!({"row": row, "acc_class": report.final_acc_class})
                    );
                }
                return Ok(());
            }
            let report = run_experiment(&cfg, &root)?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
            Ok(())
        }
        Command::Eval { model, data, which } => {
            let params = ParamSet::load(&model)?;
            let ds = load_csv(&data, true, params.arch.k, DomainTag::Target)?;
            let head = match which.as_str() {
                "class" => EvalHead::ClassPredictor,
                "joint" => EvalHead::JointPredictor,
                other => {
                    return Err(Error::Config {
                        path: "--which".into(),
                        message: format!("unknown head `{other}` (expected class or joint)"),
                    })
                }
            };
            let acc = evaluate(&params, &ds, head)?;
            println!(
                "{}",
                serde_json::json!({"accuracy": acc, "which": which, "n": ds.n()})
            );
            Ok(())
        }
        Command::Ablate { config, out, seed } => {
            let cfg = load_config(config.as_deref(), seed, None)?;
            let root = resolve_out_root(out.as_deref());
            let table = run_ablations(&cfg, &root)?;
            println!("row,acc_class,acc_joint");
            for (row, report) in &table {
                println!(
                    "{row},{},{}",
                    report.final_acc_class, report.final_acc_joint
                );
            }
            Ok(())
        }
        Command::Oracle { seed, out } => {
            let records = run_oracle_suite(seed.unwrap_or(7))?;
            let mut text = String::new();
            for r in &records {
                text.push_str(&serde_json::to_string(r).unwrap());
                text.push('\n');
            }
            match out {
                Some(path) => {
                    std::fs::write(&path, &text)
                        .map_err(|e| Error::io(path.display().to_string(), e))?;
                }
                None => print!("{text}"),
            }
            let failed: Vec<&str> = records
                .iter()
                .filter(|r| !r.pass)
                .map(|r| r.check.as_str())
                .collect();
            if failed.is_empty() {
                eprintln!("oracle suite: {} checks passed", records.len());
                Ok(())
            } else {
                Err(Error::invalid(
                    "oracle suite",
                    format!("failed checks: {failed:?}"),
                ))
            }
        }
        Command::Export { model, config, out } => {
            let cfg = load_config(config.as_deref(), None, None)?;
            let params = ParamSet::load(&model)?;
            let (src, tgt) = cfg.build_datasets()?;
            let root = resolve_out_root(out.as_deref());
            let dir = fresh_run_dir(&root, "export")?;
            export_features(&params, &[&src, &tgt], &dir)?;
            println!(
                "{}",
                serde_json::json!({
                    "features": dir.join("features.csv").display().to_string(),
                    "pca": dir.join("pca.csv").display().to_string(),
                })
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
