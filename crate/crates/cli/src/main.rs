use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gebc_core::Error;

mod commands;

/// Boundary captioning on synthetic sampled-frame data.
///
/// Values from `--config` are overridden by explicit flags; anything set in
/// neither place takes the desk preset.
#[derive(Parser)]
#[command(name = "gebc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a metrics CSV.
    Train(TrainArgs),
    /// Decode captions for every record and caption type.
    Generate(GenerateArgs),
    /// Score predictions against the corpus captions.
    Evaluate(EvaluateArgs),
    /// Summarize a metrics CSV as a plain-text table.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration [default: desk preset]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice [default: config seed, 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of records [default: config corpus.records, 64]
    #[arg(long)]
    n: Option<usize>,
    /// Output corpus directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory holding manifest.jsonl
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints and metrics [default: config output_dir]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optimizer steps [default: 2000]
    #[arg(long)]
    steps: Option<u64>,
    /// Peak learning rate [default: 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// Linear warmup steps [default: 100]
    #[arg(long)]
    warmup_steps: Option<u64>,
    /// Records per batch [default: 8]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stop after this step; the run can be continued with --resume
    #[arg(long)]
    stop_at: Option<u64>,
    /// Continue from the last checkpoint in the run directory, with its
    /// saved configuration
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint file, e.g. <run>/best.rvtc
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus directory holding manifest.jsonl
    #[arg(long)]
    data: PathBuf,
    /// JSON decoding settings (a `gen` section) [default: config gen]
    #[arg(long)]
    gen_config: Option<PathBuf>,
    /// Predictions JSONL; metadata goes to <out>.meta.json
    #[arg(long)]
    out: PathBuf,
    /// Hypotheses per caption [default: 10]
    #[arg(long)]
    beam_size: Option<usize>,
    /// Diverse-beam groups [default: 5]
    #[arg(long)]
    beam_groups: Option<usize>,
    /// Hamming diversity penalty [default: 0.5]
    #[arg(long)]
    diversity_penalty: Option<f64>,
    /// Maximum sequence length [default: 128]
    #[arg(long)]
    max_len: Option<usize>,
    /// Records to caption: all or validation [default: all]
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Predictions JSONL from `generate`
    #[arg(long)]
    pred: PathBuf,
    /// Corpus directory holding manifest.jsonl
    #[arg(long)]
    data: PathBuf,
    /// Output directory for report.json and report.txt
    #[arg(long)]
    out: PathBuf,
    /// Records to score: all or validation [default: all]
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// metrics.csv written by `train`
    #[arg(long)]
    metrics: PathBuf,
    /// Write the table here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Lora(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Container(_) => 3,
        Error::Numeric(_) | Error::Tensor(_) => 4,
    }
}

fn main() -> ExitCode {
    if let Ok(n) = std::env::var("GEBC_LAB_THREADS") {
        match n.parse::<usize>() {
            // The tensor backend sizes its worker pool from this variable.
            Ok(n) if n > 0 => std::env::set_var("RAYON_NUM_THREADS", n.to_string()),
            _ => {
                eprintln!("error: GEBC_LAB_THREADS must be a positive integer, got {n:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
