//! `nicomp`: data generation, training, evaluation, probing, verification
//! and sweeps for neuron-interaction composition experiments.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nicomp::transformer::{HeadComposition, LayerComposition};
use nicomp::verify::Suite;
use nicomp::Error;

use commands::Axis;
use config::{ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "nicomp", version, about = "Neuron-interaction composition experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    #[arg(long, value_name = "top|linear|ni")]
    layer_comp: Option<LayerComposition>,
    #[arg(long, value_name = "linear|ni")]
    head_comp: Option<HeadComposition>,
    #[arg(long)]
    rank: Option<usize>,
    /// Drop the appended constant (first-order terms) from NI composition.
    #[arg(long)]
    no_first_order: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate task and probe datasets plus a manifest.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes report, summary, checkpoint and manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Baseline checkpoint to initialise shared parameters from.
        #[arg(long)]
        warm_start: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Greedy-decode a split and score it.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Source-length bucket boundaries, e.g. 10,20,30.
        #[arg(long, value_delimiter = ',')]
        by_length: Option<Vec<usize>>,
    },
    /// Measure training and decoding throughput.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train probing classifiers on a frozen encoder.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the self-check suites.
    Verify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Suites to run (default: all).
        #[arg(long, value_delimiter = ',')]
        suite: Vec<Suite>,
    },
    /// Train one model per value along an axis and tabulate the results.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long, value_name = "rank|first-order|composition-mode")]
        axis: Axis,
        /// Comma-separated values, e.g. 4,8,16,32 or ni:ni,linear:top.
        #[arg(long)]
        values: Option<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn overrides(common: &Common, model: Option<&ModelFlags>) -> Overrides {
    let m = model.cloned().unwrap_or_default();
    Overrides {
        seed: common.seed,
        out: common.out.clone(),
        layer_comp: m.layer_comp,
        head_comp: m.head_comp,
        rank: m.rank,
        no_first_order: m.no_first_order,
        set: common.set.clone(),
        ..Overrides::default()
    }
}

fn load(common: &Common, ov: &Overrides) -> Result<ExperimentConfig, Error> {
    ExperimentConfig::load(common.config.as_deref(), ov)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.cmd {
        Cmd::Gen { common } => commands::cmd_gen(&load(&common, &overrides(&common, None))?),
        Cmd::Train {
            common,
            model,
            warm_start,
            steps,
        } => {
            let ov = Overrides {
                warm_start,
                steps,
                ..overrides(&common, Some(&model))
            };
            commands::cmd_train(&load(&common, &ov)?)
        }
        Cmd::Eval {
            common,
            checkpoint,
            by_length,
        } => {
            let ov = Overrides {
                by_length,
                ..overrides(&common, None)
            };
            commands::cmd_eval(&load(&common, &ov)?, checkpoint.as_deref())
        }
        Cmd::Bench {
            common,
            model,
            checkpoint,
        } => commands::cmd_bench(&load(&common, &overrides(&common, Some(&model)))?, checkpoint.as_deref()),
        Cmd::Probe { common, checkpoint } => {
            commands::cmd_probe(&load(&common, &overrides(&common, None))?, checkpoint.as_deref())
        }
        Cmd::Verify { common, model, suite } => {
            commands::cmd_verify(common.config.as_deref(), &overrides(&common, Some(&model)), &suite)
        }
        Cmd::Sweep {
            common,
            model,
            axis,
            values,
            jobs,
            steps,
        } => {
            let ov = Overrides {
                steps,
                ..overrides(&common, Some(&model))
            };
            commands::cmd_sweep(&load(&common, &ov)?, axis, values.as_deref(), jobs)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Generation(_) | Error::Input(_) => 2,
        Error::NonFinite { .. } => 3,
        Error::ChecksumChanged { .. } => commands::EXIT_VERIFY,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
