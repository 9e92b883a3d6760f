//! Command-line surface for the two-phase QA pipeline.
//!
//! Subcommands mirror the pipeline stages: `gen-corpus`, `train-mrc`,
//! `gen-reflection-data`, `train-reflection`, `predict`, `eval`, `ensemble`.
//! Failures exit with stage-specific codes (see [`exit_code`]).

pub mod config;
pub mod pipeline;

use clap::{Parser, Subcommand, ValueEnum};
use config::PipelineConfig;
use deskqa_core::error::{Error, Result};
use deskqa_core::evalkit::Stream;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "deskqa",
    version,
    about = "Windowed span/type QA with second-phase answer confidence"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StreamArg {
    Long,
    Short,
}

impl From<StreamArg> for Stream {
    fn from(s: StreamArg) -> Stream {
        match s {
            StreamArg::Long => Stream::Long,
            StreamArg::Short => Stream::Short,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (documents + vocabulary) from a config.
    GenCorpus {
        /// Pipeline config TOML; the [corpus] table drives generation.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory (corpus.jsonl, vocab.txt, meta.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the first-phase answer model.
    TrainMrc {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the trained first-phase model over its training corpus and write
    /// the confidence-model datasets plus feature statistics.
    GenReflectionData {
        #[arg(long)]
        mrc: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stream's confidence model (or the features-only variant
    /// when the config's [train.reflection] phase is "fnn").
    TrainReflection {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        stream: StreamArg,
    },
    /// Decode answers for a corpus. Confidence is the heuristic span score,
    /// or the confidence model's probability where a checkpoint is given.
    Predict {
        #[arg(long)]
        mrc: PathBuf,
        #[arg(long)]
        reflection_long: Option<PathBuf>,
        #[arg(long)]
        reflection_short: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also dump the winning window's head outputs per question.
        #[arg(long)]
        dump_windows: Option<PathBuf>,
    },
    /// Score predictions against a corpus and write the metric report.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge prediction files by summing confidences of identical answers.
    Ensemble {
        #[arg(long = "pred", required = true, num_args = 1..)]
        preds: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Stage-specific exit codes, one per error family.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Input(_) | Error::MalformedLine { .. } => 4,
        Error::FingerprintMismatch { .. } => 5,
        Error::Numeric(_) => 6,
        Error::Checkpoint(_) => 7,
        Error::Usage(_) => 8,
        Error::Io(_) => 9,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { spec, out } => {
            let cfg = PipelineConfig::load(&spec)?;
            pipeline::gen_corpus(&cfg, &out)?;
            println!("corpus written to {}", out.display());
        }
        Command::TrainMrc { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let summary = pipeline::train_mrc(&cfg)?;
            report_training("first-phase", &summary);
            println!("checkpoint written to {}", cfg.paths.mrc_checkpoint.display());
        }
        Command::GenReflectionData { mrc, corpus, out } => {
            pipeline::gen_reflection_data(&mrc, &corpus, &out)?;
            println!("confidence datasets written to {}", out.display());
        }
        Command::TrainReflection { config, stream } => {
            let cfg = PipelineConfig::load(&config)?;
            let stream: Stream = stream.into();
            let summary = pipeline::train_reflection(&cfg, stream)?;
            report_training(&format!("confidence ({stream})"), &summary);
        }
        Command::Predict {
            mrc,
            reflection_long,
            reflection_short,
            corpus,
            out,
            dump_windows,
        } => {
            pipeline::predict(&pipeline::PredictArgs {
                mrc: &mrc,
                reflection_long: reflection_long.as_deref(),
                reflection_short: reflection_short.as_deref(),
                corpus: &corpus,
                out: &out,
                dump_windows: dump_windows.as_deref(),
            })?;
            println!("predictions written to {}", out.display());
        }
        Command::Eval { pred, gold, out } => {
            let report = pipeline::eval(&pred, &gold, &out)?;
            print!("{}", report.render_table());
            println!("report written to {}", out.display());
        }
        Command::Ensemble { preds, out } => {
            pipeline::ensemble(&preds, &out)?;
            println!("ensemble written to {}", out.display());
        }
    }
    Ok(())
}

fn report_training(label: &str, summary: &pipeline::TrainSummary) {
    println!("{label}: {} optimizer steps", summary.steps);
    for (i, loss) in summary.epoch_mean_losses.iter().enumerate() {
        println!("  epoch {i}: mean loss {loss:.6}");
    }
    if let Some((epoch, f1)) = summary.best_dev {
        println!("  selected epoch {epoch} by dev F1 {f1:.4}");
    }
}
