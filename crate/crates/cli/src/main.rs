//! `figlm`: synthesise a corpus, train, generate, detect, visualise, evaluate.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Marks errors caused by the invocation rather than the run (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "figlm", version, about = "Metaphor generation with a dual-head transformer LM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; flags override its fields
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run directory for every artifact and manifest.json
    #[arg(long, value_name = "DIR", default_value = "run")]
    pub out_dir: PathBuf,
    /// Global seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Uniform token weights
    NoWeighting,
    /// No self-training rounds
    NoSelftrain,
}

impl Ablation {
    /// Suffix appended to artifact names of an ablation run.
    pub fn suffix(ablation: Option<Ablation>) -> &'static str {
        match ablation {
            None => "",
            Some(Ablation::NoWeighting) => "-no-weighting",
            Some(Ablation::NoSelftrain) => "-no-selftrain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelfTrainArg {
    Off,
    Classic,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Greedy,
    Beam,
    Topk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TokenModeArg {
    Word,
    Char,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Html,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Candidates per target (beam width, or number of top-k samples)
    #[arg(long)]
    pub beam_size: Option<usize>,
    /// Decoding strategy
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Top-k cutoff for sampling
    #[arg(long)]
    pub k: Option<usize>,
    /// Generation budget in tokens
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labelled/unlabelled corpus and its vocabulary
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_labelled: Option<usize>,
        #[arg(long)]
        n_unlabelled: Option<usize>,
        #[arg(long)]
        metaphor_rate: Option<f64>,
        #[arg(long, value_enum)]
        token_mode: Option<TokenModeArg>,
    },
    /// Pre-train the identifier, train the generator, run self-training
    Train {
        #[command(flatten)]
        common: Common,
        /// Self-training mode
        #[arg(long, value_enum)]
        self_train: Option<SelfTrainArg>,
        /// Train an ablated model under suffixed artifact names
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
        #[arg(long)]
        ident_epochs: Option<usize>,
        #[arg(long)]
        gen_epochs: Option<usize>,
        #[arg(long)]
        st_epochs: Option<usize>,
        #[arg(long)]
        max_st_iters: Option<usize>,
        /// Acceptance threshold of classic self-training
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Labelled JSONL (default: labelled.jsonl in the run directory)
        #[arg(long, value_name = "FILE")]
        labelled: Option<PathBuf>,
        /// Unlabelled JSONL (default: unlabelled.jsonl in the run directory)
        #[arg(long, value_name = "FILE")]
        unlabelled: Option<PathBuf>,
    },
    /// Generate sentences for one target or a file of targets
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "targets_file", required_unless_present = "targets_file")]
        target: Option<String>,
        /// One target per line
        #[arg(long, value_name = "FILE")]
        targets_file: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
        /// Use the generator of an ablation run
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
        /// Output file name inside the run directory
        #[arg(long, value_name = "NAME")]
        output: Option<String>,
    },
    /// Score each line of a JSONL file with its metaphor probability
    Detect {
        #[command(flatten)]
        common: Common,
        /// JSONL with a "text" field per line (an optional "target" is used as the prompt)
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Checkpoint to score with (default: identifier.ckpt in the run directory)
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Output file name inside the run directory
        #[arg(long, value_name = "NAME")]
        output: Option<String>,
    },
    /// Export per-token metaphor weights of one sentence
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sentence: String,
        /// Target word used as the prompt (default: extracted from the sentence)
        #[arg(long)]
        target: Option<String>,
        #[arg(long, value_enum, default_value = "html")]
        format: FormatArg,
        /// Checkpoint to score with (default: identifier.ckpt in the run directory)
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Output file name inside the run directory
        #[arg(long, value_name = "NAME")]
        output: Option<String>,
    },
    /// Perplexity, distinct-1/2 and metaphor ratio of generated sentences
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Evaluate the generator of an ablation run
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
        /// One target per line (default: sample n_targets grammar subjects)
        #[arg(long, value_name = "FILE")]
        targets_file: Option<PathBuf>,
        #[arg(long)]
        n_targets: Option<usize>,
        #[arg(long)]
        scorer_epochs: Option<usize>,
        #[arg(long)]
        classifier_epochs: Option<usize>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
