// SPDX-License-Identifier: MIT OR Apache-2.0

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Train a small language model and sparse autoencoders on its residual
/// stream, then measure how steering individual features changes
/// memorization, fluency and task accuracy.
#[derive(Parser, Debug)]
#[command(name = "steerlab", version, arg_required_else_help = true)]
pub struct Cli {
    /// Master seed for model init, SAE init and sweep sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory for checkpoints, records and reports.
    #[arg(long, global = true, value_name = "DIR", default_value = "steerlab-out")]
    pub out: PathBuf,
    /// Print one JSON document on stdout instead of human-readable text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the language model on the memorization / capability / fluency mixture.
    TrainLm {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Record residual-stream activations at a layer over the calibration corpus.
    CaptureActs {
        #[arg(long)]
        layer: usize,
    },
    /// Train a sparse autoencoder on captured activations.
    TrainSae {
        #[arg(long)]
        layer: usize,
        /// Activation file; defaults to the one written by capture-acts.
        #[arg(long)]
        activations: Option<PathBuf>,
    },
    /// Measure each feature's maximum activation on the calibration corpus.
    Calibrate {
        #[arg(long)]
        layer: usize,
    },
    /// One paired generation: steered and default.
    Steer(SteerArgs),
    /// Run the randomized steering sweep, appending to runs.jsonl.
    Sweep(SweepArgs),
    /// Memorization ANLCS of the unsteered model.
    EvalMem {
        /// Sampling temperature; 0 is greedy.
        #[arg(long, default_value_t = 0.0)]
        temperature: f32,
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },
    /// Perplexity of texts under the model.
    EvalPpl {
        /// One text per line; defaults to the fluency reference paraphrases.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Greedy accuracy on the capability tasks.
    EvalTasks {
        #[arg(long)]
        per_kind: Option<usize>,
    },
    /// CSV tables and SVG plots from sweep records.
    Report {
        /// Record file; defaults to runs.jsonl in the output directory.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
    /// Top activating snippets of a feature.
    FeatureTop(FeatureArgs),
    /// Ask a completion service for a one-line feature description.
    LabelFeature {
        #[command(flatten)]
        feature: FeatureArgs,
        /// Service URL; defaults to STEERLAB_ENDPOINT. Without either the
        /// label is "unlabeled".
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        offline: bool,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Policy {
    AllPositions,
    GeneratedOnly,
}

#[derive(Args, Debug)]
pub struct SteerArgs {
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub feature: usize,
    #[arg(long, allow_hyphen_values = true)]
    pub beta: f32,
    #[arg(long, conflicts_with = "prompt_file", required_unless_present = "prompt_file")]
    pub prompt: Option<String>,
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    /// Use this feature scale instead of the calibrated one.
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub temperature: Option<f32>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Sampling seed shared by both arms; defaults to the master seed.
    #[arg(long)]
    pub sample_seed: Option<u64>,
    #[arg(long, value_enum)]
    pub policy: Option<Policy>,
    /// Generate through the service at STEERLAB_ENDPOINT.
    #[arg(long)]
    pub remote: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Number of runs.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Use this beta for every run instead of sampling it.
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<f32>,
    /// Record file; defaults to runs.jsonl in the output directory.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long)]
    pub remote: bool,
}

#[derive(Args, Debug)]
pub struct FeatureArgs {
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub feature: usize,
    #[arg(short, long, default_value_t = 10)]
    pub k: usize,
    /// Also steer the fluency probes with this beta and report the
    /// unigram-divergence footprint proxy.
    #[arg(long, allow_hyphen_values = true)]
    pub footprint_beta: Option<f32>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let json = cli.json;
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                println!("{}", serde_json::json!({ "error": format!("{e:#}") }));
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}
