//! `hooknet`: synthesize scenes, train, infer, delineate fronts, evaluate
//! and run ablation sweeps.
//!
//! Every command accepts `--config FILE` (flat `key = value` lines) and
//! `--set KEY=VALUE`; dedicated flags override both. Each command writes a
//! `manifest.txt` next to its outputs.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 missing input,
//! 4 numeric failure.

mod ablate;
mod error;
mod jobs;
mod manifest;
mod pipeline;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hooknet_core::Variant;

use crate::error::CliResult;
use crate::settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "hooknet", version, about = "Glacier calving-front segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic SAR-like scenes with zone labels and fronts.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory, one subdirectory per scene.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long)]
        n: Option<usize>,
        /// Probability that a scene is a winter scene with ice mélange.
        #[arg(long)]
        melange_prob: Option<f64>,
    },
    /// Train a model; writes model.ckpt and report.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Scene directory from `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Architecture variant.
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Desk-scale defaults: base 8 channels, 64-pixel patches, 30 epochs, batch 8.
        #[arg(long)]
        toy: bool,
    },
    /// Predict per-scene zone rasters with a trained checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Patch side; must match training.
        #[arg(long)]
        patch: Option<usize>,
        /// Worker threads for per-scene inference.
        #[arg(long)]
        jobs: Option<usize>,
        /// Write raw attention weights under `<scene>/attention/`.
        #[arg(long)]
        dump_attention: bool,
        /// Use the desk-scale patch size.
        #[arg(long)]
        toy: bool,
    },
    /// Extract 1-pixel calving fronts from zone rasters.
    Delineate {
        #[command(flatten)]
        common: Common,
        /// Directory of zone rasters (from `infer`, or scenes).
        #[arg(long)]
        zones: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Compare predicted fronts and zones with ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Delineated predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Ground truth: scenes or delineated ground-truth zones.
        #[arg(long)]
        gt: PathBuf,
        /// Directory for metrics.csv and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Add one row per value of this scene tag.
        #[arg(long)]
        group_by: Option<String>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Train every ablation variant and tabulate mean ± std test metrics.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Held-out scenes; defaults to each repeat's validation split.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
        /// Comma-separated subset of variants, in table order.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Desk-scale defaults, as for `train`.
        #[arg(long)]
        toy: bool,
    },
}

fn settings(common: &Common) -> CliResult<Settings> {
    let mut s = Settings::new(common.config.as_deref(), &common.set)?;
    s.flag("seed", common.seed);
    Ok(s)
}

fn toy_flag(on: bool) -> Option<bool> {
    on.then_some(true)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth {
            common,
            out,
            n,
            melange_prob,
        } => {
            let mut s = settings(&common)?;
            s.flag("n", n);
            s.flag("melange_prob", melange_prob);
            pipeline::synth(&mut s, &out)
        }
        Command::Train {
            common,
            data,
            out,
            variant,
            epochs,
            toy,
        } => {
            let mut s = settings(&common)?;
            s.flag("variant", variant);
            s.flag("epochs", epochs);
            s.flag("toy", toy_flag(toy));
            pipeline::train_cmd(&mut s, &data, &out)
        }
        Command::Infer {
            common,
            checkpoint,
            data,
            out,
            patch,
            jobs,
            dump_attention,
            toy,
        } => {
            let mut s = settings(&common)?;
            s.flag("patch", patch);
            s.flag("jobs", jobs);
            s.flag("toy", toy_flag(toy));
            pipeline::infer(&mut s, &checkpoint, &data, &out, dump_attention)
        }
        Command::Delineate { common, zones, out, jobs } => {
            let mut s = settings(&common)?;
            s.flag("jobs", jobs);
            pipeline::delineate_cmd(&mut s, &zones, &out)
        }
        Command::Evaluate {
            common,
            pred,
            gt,
            out,
            group_by,
            jobs,
        } => {
            let mut s = settings(&common)?;
            s.flag("group_by", group_by);
            s.flag("jobs", jobs);
            pipeline::evaluate(&mut s, &pred, &gt, &out)
        }
        Command::Ablate {
            common,
            data,
            test,
            out,
            repeats,
            variants,
            epochs,
            toy,
        } => {
            let mut s = settings(&common)?;
            s.flag("repeats", repeats);
            s.flag("variants", variants);
            s.flag("epochs", epochs);
            s.flag("toy", toy_flag(toy));
            ablate::ablate(&mut s, &data, test.as_deref(), &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { error::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
