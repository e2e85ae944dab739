//! Command-line entry points.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 for
//! runtime failures (I/O, corrupt data, checkpoint/config mismatch).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::json;

use crate::dataio::{generate_synthetic_dataset, SynthConfig};
use crate::error::{CfcmlError, Result};
use crate::metrics::{compute_gap_report, EvalReport};
use crate::trainer::{
    cross_validate, evaluate, load_manifest, model_from_checkpoint, prepare_split, run_training, Checkpoint,
    RunConfig,
};

/// Overrides `train.seed` when set.
pub const SEED_ENV: &str = "CFCML_SEED";

#[derive(Parser, Debug)]
#[command(name = "cfcml", version, about = "Coarse-to-fine crossmodal learning on image + tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multimodal dataset
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Training samples per class; validation gets half as many
        #[arg(long, default_value_t = 60)]
        per_class: usize,
        /// Image modalities
        #[arg(long, default_value_t = 2)]
        modalities: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        attribute_noise: Option<f64>,
        /// Peak blob amplitude
        #[arg(long)]
        signal: Option<f64>,
    },
    /// Train a model; writes the epoch log and checkpoints to the out dir
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split and write an evaluation report
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write the modality-gap report of a checkpoint
    Gap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// K-fold cross-validation over the train and validation splits
    Cv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        folds: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let (mut cfg, _) = RunConfig::load(path)?;
    if let Ok(raw) = std::env::var(SEED_ENV) {
        cfg.train.seed = raw
            .trim()
            .parse()
            .map_err(|_| CfcmlError::Config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
    }
    Ok(cfg)
}

fn write_report(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CfcmlError::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, text).map_err(|e| CfcmlError::io(format!("writing {}", path.display()), e))
}

fn restored(config: &Path, checkpoint: &Path, split: &str) -> Result<(RunConfig, crate::trainer::Evaluation)> {
    let cfg = load_config(config)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let manifest = load_manifest(&cfg)?;
    let model = model_from_checkpoint(&cfg, &manifest, &ckpt)?;
    let samples = prepare_split(&model, &manifest, split)?;
    let ev = evaluate(&model, &samples)?;
    Ok((cfg, ev))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            classes,
            per_class,
            modalities,
            seed,
            attribute_noise,
            signal,
        } => {
            let defaults = SynthConfig::default();
            let cfg = SynthConfig {
                n_classes: classes,
                train_per_class: per_class,
                val_per_class: (per_class / 2).max(1),
                modalities,
                seed,
                attribute_noise: attribute_noise.unwrap_or(defaults.attribute_noise),
                signal: signal.unwrap_or(defaults.signal),
                ..defaults
            };
            cfg.validate()?;
            let manifest = generate_synthetic_dataset(&cfg, &out)?;
            println!(
                "{}",
                json!({"out": out, "samples": manifest.samples.len(), "classes": manifest.classes})
            );
        }
        Command::Train { config, resume } => {
            let cfg = load_config(&config)?;
            let ckpt = resume.as_deref().map(Checkpoint::load).transpose()?;
            let (outcome, out_dir) = run_training(&cfg, ckpt.as_ref())?;
            let last = outcome.log.last();
            println!(
                "{}",
                json!({
                    "out_dir": out_dir,
                    "epochs": outcome.last.epoch,
                    "val_acc": last.and_then(|r| r.val_acc),
                    "val_auc": last.and_then(|r| r.val_auc),
                    "total_loss": last.map(|r| r.loss.total),
                })
            );
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            report,
        } => {
            let (cfg, ev) = restored(&config, &checkpoint, &split)?;
            let rep = EvalReport::build(&split, &ev.labels, &ev.probs, &cfg.to_toml())?;
            write_report(&report, &rep.to_json())?;
            println!("{}", json!({"report": report, "acc": rep.multiclass.acc, "auc": rep.multiclass.auc_macro_ovr}));
        }
        Command::Gap {
            config,
            checkpoint,
            report,
            split,
        } => {
            let (cfg, ev) = restored(&config, &checkpoint, &split)?;
            let manifest = load_manifest(&cfg)?;
            let gap = compute_gap_report(&ev.pooled, &ev.labels, manifest.modalities.len() + 1)?;
            write_report(&report, &gap.to_json())?;
            println!("{}", json!({"report": report, "gap": gap.gap}));
        }
        Command::Cv { config, folds, report } => {
            let cfg = load_config(&config)?;
            let cv = cross_validate(&cfg, &cfg.to_toml(), folds)?;
            let text = serde_json::to_string_pretty(&cv).expect("report serializes");
            match report {
                Some(path) => write_report(&path, &text)?,
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}
