//! `direid` — experiment front-end for the degradation-invariant
//! re-identification pipeline.
//!
//! Every pipeline subcommand resolves its configuration from the TOML
//! file, the `--set` overrides, and its own flags, then writes the
//! resolved document next to its outputs so the run can be reproduced
//! exactly.

mod commands;
mod config;
mod preset;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use direid_core::eval::FeatureVariant;

use crate::preset::Preset;

#[derive(Parser)]
#[command(
    name = "direid",
    version,
    about = "Train and evaluate the degradation-invariant re-identification pipeline"
)]
struct Cli {
    /// Experiment configuration file (TOML); built-in defaults when
    /// omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dotted-path config override, e.g. --set train.ddgan.iterations=5000
    /// (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output root; overrides both the config file and DIREID_OUT.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a procedurally generated pedestrian corpus.
    GenerateData {
        /// Number of identities.
        #[arg(long)]
        ids: Option<usize>,
        /// Images per identity.
        #[arg(long)]
        per_id: Option<usize>,
        /// Number of cameras (round-robin over instances).
        #[arg(long)]
        cameras: Option<usize>,
        /// Corpus seed; defaults to the global seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Target directory; defaults to dataset.root.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Builds the degraded-query / clean-gallery evaluation split.
    Degrade {
        /// Corpus directory; defaults to dataset.root.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Camera whose images become the queries.
        #[arg(long)]
        query_camera: Option<u32>,
    },
    /// Stage 0: pretrains the identity encoder.
    PretrainId {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Stage 1: trains the content/degradation decomposition GAN.
    TrainDdgan {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Stage-0 checkpoint; defaults to the configured pretrain
        /// output.
        #[arg(long, value_name = "CKPT")]
        stage0: Option<PathBuf>,
        /// Resume from a stage-1 checkpoint instead of starting fresh.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Stage 2: trains the dual-feature identity network.
    TrainDfen {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Stage-0 checkpoint; defaults to the configured pretrain
        /// output.
        #[arg(long, value_name = "CKPT")]
        stage0: Option<PathBuf>,
        /// Stage-1 checkpoint; defaults to the configured GAN output.
        #[arg(long, value_name = "CKPT")]
        stage1: Option<PathBuf>,
        /// Force attention weights to one.
        #[arg(long)]
        no_attention: bool,
        /// Skip the stage-1 weights: random content encoder.
        #[arg(long)]
        random_content: bool,
    },
    /// Extracts features from a stage-2 checkpoint and reports CMC/mAP.
    Evaluate {
        /// Stage-2 checkpoint to evaluate.
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Split directory (query.csv / gallery.csv); defaults to
        /// <out>/split.
        #[arg(long, value_name = "DIR")]
        split: Option<PathBuf>,
        /// Representation to rank with.
        #[arg(long, value_enum, default_value_t = VariantArg::Fused)]
        variant: VariantArg,
        /// Force attention weights to one during extraction.
        #[arg(long)]
        no_attention: bool,
    },
    /// Runs one ablation preset end to end (trains what is missing,
    /// reuses what exists).
    Ablate {
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Renders a comparison table from metrics files.
    Report {
        /// Metrics JSON files; deltas are taken against the first.
        #[arg(required = true, value_name = "METRICS")]
        metrics: Vec<PathBuf>,
    },
}

/// CLI spelling of the feature variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Fused,
    FInv,
    FSen,
}

impl VariantArg {
    fn to_variant(self) -> FeatureVariant {
        match self {
            VariantArg::Fused => FeatureVariant::Fused,
            VariantArg::FInv => FeatureVariant::FInv,
            VariantArg::FSen => FeatureVariant::FSenWeighted,
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenerateData { .. } => "generate-data",
            Command::Degrade { .. } => "degrade",
            Command::PretrainId { .. } => "pretrain-id",
            Command::TrainDdgan { .. } => "train-ddgan",
            Command::TrainDfen { .. } => "train-dfen",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::Report { .. } => "report",
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = config::load(cli.config.as_deref(), &cli.set)?;
    if let Ok(dir) = std::env::var("DIREID_OUT") {
        if !dir.is_empty() {
            cfg.out_dir = PathBuf::from(dir);
        }
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }

    // `report` only reads; every other subcommand leaves a resolved
    // config next to its outputs first, so aborted runs still record
    // what they were asked to do.
    if !matches!(cli.command, Command::Report { .. }) {
        config::write_resolved(&cfg, cli.command.name(), &cfg.out_dir)?;
    }

    match cli.command {
        Command::GenerateData {
            ids,
            per_id,
            cameras,
            seed,
            data,
        } => {
            if let Some(v) = ids {
                cfg.dataset.ids = v;
            }
            if let Some(v) = per_id {
                cfg.dataset.per_id = v;
            }
            if let Some(v) = cameras {
                cfg.dataset.cameras = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            // Re-record with the flag overrides folded in.
            config::write_resolved(&cfg, "generate-data", &cfg.out_dir)?;
            commands::generate_data(&cfg, data.as_deref())
        }
        Command::Degrade { data, query_camera } => {
            let out = commands::split_dir(&cfg.out_dir);
            commands::degrade(&cfg, data.as_deref(), query_camera, &out)
        }
        Command::PretrainId { data } => commands::pretrain_id(&cfg, data.as_deref()),
        Command::TrainDdgan {
            data,
            stage0,
            resume,
        } => commands::cmd_train_ddgan(&cfg, data.as_deref(), stage0.as_deref(), resume.as_deref()),
        Command::TrainDfen {
            data,
            stage0,
            stage1,
            no_attention,
            random_content,
        } => commands::cmd_train_dfen(
            &cfg,
            data.as_deref(),
            stage0.as_deref(),
            stage1.as_deref(),
            no_attention,
            random_content,
        ),
        Command::Evaluate {
            checkpoint,
            split,
            variant,
            no_attention,
        } => commands::evaluate(
            &cfg,
            &checkpoint,
            split.as_deref(),
            variant.to_variant(),
            no_attention,
        ),
        Command::Ablate { preset, data } => commands::ablate(&cfg, preset, data.as_deref()),
        Command::Report { metrics } => {
            let reports = report::load_reports(&metrics)?;
            print!("{}", report::render(&reports));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(config::exit_code_for(&err))
        }
    }
}
