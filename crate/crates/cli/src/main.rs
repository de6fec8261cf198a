mod commands;
mod config;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "cdlg",
    version,
    about = "Contrastive disentangled node embeddings"
)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for training and the probe.
    #[arg(long, global = true, conflicts_with = "seeds")]
    seed: Option<u64>,

    /// Comma-separated seeds; `eval` reports their mean and std.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Worker threads for `grid` and multi-seed `eval`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Config override, e.g. `--set train.encoder.channels=8`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a bundle from a `.content` / `.cites` pair.
    Prepare(PrepareArgs),
    /// Build a bundle from a stochastic block model.
    Synth(SynthArgs),
    /// Train an encoder; writes a checkpoint and the loss log.
    Train,
    /// Fit the probe on frozen embeddings and report accuracy.
    Eval {
        /// Evaluate this checkpoint instead of training one per seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export embeddings of the unaugmented graph as CSV.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `<out>/embeddings.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train and validate every cell of the configured grid.
    Grid,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    cites: PathBuf,
    /// JSON file with `train`, `val`, `test` index lists; when absent a split
    /// is drawn with `--seed`.
    #[arg(long)]
    split: Option<PathBuf>,
    #[command(flatten)]
    sizes: SplitSizes,
}

#[derive(Debug, Args)]
struct SplitSizes {
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 500)]
    val: usize,
    #[arg(long, default_value_t = 1000)]
    test: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_delimiter = ',', default_value = "30,30,30")]
    blocks: Vec<usize>,
    #[arg(long, default_value_t = 0.2)]
    p_in: f64,
    #[arg(long, default_value_t = 0.01)]
    p_out: f64,
    #[arg(long, default_value_t = 16)]
    features: usize,
    #[arg(long, default_value_t = 2.0)]
    signal: f64,
    #[arg(long, default_value_t = 5)]
    per_class: usize,
    #[arg(long, default_value_t = 30)]
    val: usize,
    #[arg(long, default_value_t = 45)]
    test: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
