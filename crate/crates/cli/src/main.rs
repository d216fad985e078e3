//! Command-line front end: schema suggestion, extraction, needle infusion,
//! MINEA evaluation, positional probing and model comparison.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

mod artifacts;
mod commands;
mod config;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "needlegauge", version, about = "Measure how completely an LLM extracts entities from long documents")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ask the model which entity types suit each document
    SuggestSchema {
        #[arg(required = true)]
        docs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract entities from text files or infusion manifests
    Extract {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also score every iteration count up to the configured one
        #[arg(long)]
        study: bool,
    },
    /// Generate, annotate and insert needles
    Infuse {
        #[arg(required = true)]
        docs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Needles to insert instead of generating them
        #[arg(long)]
        needles: Option<PathBuf>,
        /// Check needle types against this schema
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Comma-separated needle types to generate
        #[arg(long, value_delimiter = ',')]
        types: Vec<String>,
        /// Needles generated per type
        #[arg(long)]
        count: Option<usize>,
    },
    /// Match needles against extraction runs and compute MINEA
    Evaluate {
        #[arg(long = "run", required_unless_present = "criterion_table")]
        runs: Vec<PathBuf>,
        #[arg(long = "infused")]
        infused: Vec<PathBuf>,
        /// Runs over the original documents, for the score comparison
        #[arg(long = "baseline")]
        baselines: Vec<PathBuf>,
        /// Needed for the score vectors
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Per-criterion ratios per type, instead of runs
        #[arg(long, conflicts_with_all = ["runs", "infused", "baselines"])]
        criterion_table: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-feed each piece at the end of the thread and measure recall
    ProbeLitm {
        #[arg(required = true)]
        docs: Vec<PathBuf>,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        pieces: usize,
        /// Comma-separated 1-based positions; all when omitted
        #[arg(long, value_delimiter = ',')]
        positions: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank models by overall MINEA
    Compare {
        /// evaluation.json files
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = RunConfig::load(&cli.overrides)?;
    match cli.command {
        Command::SuggestSchema { docs, out } => commands::suggest_schema(&cfg, &docs, &out),
        Command::Extract { inputs, schema, out, study } => commands::extract(&cfg, &inputs, &schema, &out, study),
        Command::Infuse { docs, out, needles, schema, types, count } => {
            if !types.is_empty() {
                cfg.needle_types = types;
            }
            if let Some(c) = count {
                cfg.needles_per_type = c;
            }
            commands::infuse(&cfg, &docs, needles.as_deref(), schema.as_deref(), &out)
        }
        Command::Evaluate { runs, infused, baselines, schema, criterion_table, out } => match criterion_table {
            Some(table) => commands::evaluate_table(&cfg, &table, &out),
            None => commands::evaluate(
                &cfg,
                commands::EvaluateInputs {
                    runs: &runs,
                    infused: &infused,
                    baselines: &baselines,
                    schema: schema.as_deref(),
                },
                &out,
            ),
        },
        Command::ProbeLitm { docs, schema, pieces, positions, out } => {
            commands::probe_litm(&cfg, &docs, &schema, pieces, positions.as_deref(), &out)
        }
        Command::Compare { reports, out } => commands::compare(&cfg, &reports, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            log::error!("some inputs failed; see above");
            ExitCode::FAILURE
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
