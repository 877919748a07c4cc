//! `vtx`: generate data, train, evaluate, ablate and summarize runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::commands::EvalFlags;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "vtx", version, about = "Weakly supervised attribute value extraction at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` override, applied after the environment.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = RunConfig::resolve(self.config.as_deref())?;
        for item in &self.overrides {
            config.apply_text(item, "--set")?;
        }
        if let Some(seed) = self.seed {
            config.set("seed", &seed.to_string())?;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write train/test JSONL splits and the vocabulary.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and write a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        no_s1: bool,
        #[arg(long)]
        no_s2: bool,
        #[arg(long)]
        no_s3: bool,
        /// Also write every per-epoch reliability table as JSON.
        #[arg(long)]
        dump_weights: bool,
    },
    /// Score a checkpoint on an annotated split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Vocabulary for class names; defaults to the one next to the test file.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        source_aware: bool,
        #[arg(long)]
        retrieval: bool,
        /// Number of leading test pairs used for retrieval.
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        dump_masks: bool,
    },
    /// Full model against each single-scheme ablation.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train each variant in its own process, concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Summarize every report.json under a directory.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn with_data(mut config: RunConfig, data: Option<PathBuf>, epochs: Option<usize>) -> RunConfig {
    if data.is_some() {
        config.data = data;
    }
    if let Some(e) = epochs {
        config.train.epochs = e;
    }
    config
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::GenerateData { common } => commands::generate(&common.resolve()?, &common.out),
        Cmd::Train { common, data, epochs, no_s1, no_s2, no_s3, dump_weights } => {
            let mut config = with_data(common.resolve()?, data, epochs);
            let t = &mut config.train.toggles;
            t.s1 &= !no_s1;
            t.s2 &= !no_s2;
            t.s3 &= !no_s3;
            commands::train_run(&config, &common.out, dump_weights).map(|_| ())
        }
        Cmd::Evaluate { checkpoint, test, vocab, out, source_aware, retrieval, pairs, dump_masks } => {
            let flags = EvalFlags { source_aware, retrieval, dump_masks, pairs };
            commands::evaluate(&checkpoint, &test, vocab.as_deref(), &out, &flags).map(|_| ())
        }
        Cmd::Ablate { common, data, seeds, epochs, parallel } => {
            let config = with_data(common.resolve()?, data, epochs);
            commands::ablate(&config, &seeds, &common.out, parallel).map(|_| ())
        }
        Cmd::Report { input, out } => commands::summarize(&input, &out).map(|_| ()),
    }
}

/// 2 for failures that point at a bug or numerical blow-up, 1 for everything the user can fix.
fn exit_code(err: &anyhow::Error) -> u8 {
    let internal = err.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<vtx_core::Error>(),
            Some(vtx_core::Error::Diverged { .. } | vtx_core::Error::Shape { .. })
        )
    });
    if internal {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
        Err(_) => ExitCode::from(2),
    }
}
