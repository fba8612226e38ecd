//! Command-line interface.
//!
//! Subcommands mirror the experiment stages: `gen` builds the benchmark,
//! `pretrain` trains the shared backbone, `tune` runs one tuning job,
//! `eval` scores a checkpoint, `analyze` produces representation metrics
//! and projections, and `report` aggregates per-seed metric files.

pub mod checkpoint_io;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::Result;
use crate::synthlang::Split;
use crate::tuning::TuneMode;

#[derive(Parser)]
#[command(
    name = "xptlab",
    version,
    about = "Prompt tuning versus full fine-tuning on a synthetic cross-lingual benchmark"
)]
struct Cli {
    /// Worker threads for forward/backward passes; defaults to all cores
    /// (or the XPTLAB_THREADS environment variable).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Prompt tuning: frozen backbone, trainable prompts and head.
    Pt,
    /// Full fine-tuning: everything trainable.
    Ft,
}

impl From<ModeArg> for TuneMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Pt => TuneMode::PromptTune,
            ModeArg::Ft => TuneMode::FullFinetune,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    Analysis,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
            SplitArg::Analysis => Split::Analysis,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multilingual benchmark into a directory.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the shared backbone with masked-language modeling.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "pretrain.ckpt")]
        out: PathBuf,
    },
    /// Tune a pretrained checkpoint on the paired task.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "pretrain.ckpt")]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split, per language.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "pretrain.ckpt")]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Representation metrics, projections, and per-seed report CSV.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "pretrain.ckpt")]
        pretrain: PathBuf,
        #[arg(long)]
        ft: PathBuf,
        #[arg(long)]
        pt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate per-seed report files into a mean/std summary.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Per-seed report CSV files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen { config, out, force } => commands::cmd_gen(&config, &out, force),
        Cmd::Pretrain { config, data, out } => commands::cmd_pretrain(&config, &data, &out),
        Cmd::Tune { config, data, ckpt, mode, seed, out } => {
            commands::cmd_tune(&config, &data, &ckpt, mode.into(), seed, &out)
        }
        Cmd::Eval { config, data, ckpt, split } => {
            commands::cmd_eval(&config, &data, &ckpt, split.into())
        }
        Cmd::Analyze { config, data, pretrain, ft, pt, out, seed } => {
            commands::cmd_analyze(&config, &data, &pretrain, &ft, &pt, &out, seed)
        }
        Cmd::Report { out, inputs } => commands::cmd_report(&out, &inputs),
    }
}

/// Parse arguments, run, and map errors to process exit codes.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init()
        .ok();
    let cli = Cli::parse();

    let threads = cli.threads.or_else(|| {
        std::env::var("XPTLAB_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }

    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}
