use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "repsnet", version, about = "Retrieval-conditioned visual question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSONL data file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of retrieved answers.
    #[arg(long)]
    pub k: Option<usize>,
    /// Beam width; 1 decodes greedily.
    #[arg(long)]
    pub beam: Option<usize>,
    /// Output file or directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint directory.
    Train(Common),
    /// Accuracy and BLEU of a checkpoint on a labelled split.
    Eval(Common),
    /// Generate open-ended answers for image/question queries.
    Generate(Common),
    /// List the nearest stored answers for each query.
    Retrieve(Common),
    /// Write a synthetic train/eval corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        concepts: usize,
        /// mixed, open or close
        #[arg(long, default_value = "mixed")]
        mode: String,
        /// Extra finding sentences per open-ended answer.
        #[arg(long, default_value_t = 0)]
        findings: usize,
    },
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> repsnet::Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| repsnet::Error::Config(format!("--{flag} is required")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train(c) => commands::train(c),
        Command::Eval(c) => commands::eval(c),
        Command::Generate(c) => commands::generate(c),
        Command::Retrieve(c) => commands::retrieve(c),
        Command::Synth {
            common,
            samples,
            concepts,
            mode,
            findings,
        } => commands::synth(common, *samples, *concepts, mode, *findings),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
