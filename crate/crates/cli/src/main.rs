//! `dha`: train toy MHA checkpoints, analyze head redundancy, transform them
//! into decoupled-head models and compare against grouped-query baselines.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dha_core::search::ScoreMode;
use dha_core::training::Baseline;

#[derive(Debug, Parser)]
#[command(name = "dha", version, about = "Decoupled-head attention toolkit")]
struct Cli {
    /// Output directory (created if missing).
    #[arg(long, global = true, env = "DHA_OUT_DIR", default_value = "dha-out")]
    out: PathBuf,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Seed of the synthetic task's transition table and splits.
    #[arg(long, global = true, default_value_t = 0)]
    task_seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a toy MHA model on the synthetic task and save it.
    TrainBaseline(TrainArgs),
    /// Write head-similarity matrices and the per-layer redundancy table.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Search, fuse, materialize and continue training an MHA checkpoint.
    Transform(PipelineArgs),
    /// Continue training DHA- and GQA-initialized models side by side.
    Compare(PipelineArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Where to write the checkpoint [default: <out>/baseline.dha].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    head_dim: usize,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    /// Train with this many shared key/value heads per layer, then expand
    /// back to MHA so heads within each block are exact duplicates.
    #[arg(long)]
    planted_groups: Option<usize>,
}

#[derive(Debug, Clone, Args)]
struct PipelineArgs {
    /// MHA checkpoint to transform.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Key+value head budget: a fraction of the MHA total (e.g. 0.25) or an
    /// absolute head count (> 1).
    #[arg(long, default_value = "0.25")]
    kv_budget: String,
    #[arg(long, default_value = "cka", value_parser = parse_score_mode)]
    score_mode: ScoreMode,
    #[arg(long, default_value_t = 240)]
    search_steps: usize,
    /// Upper bound on fusion steps (the phase stops early once the fusion
    /// loss falls below 1e-3).
    #[arg(long, default_value_t = 1000)]
    fusion_steps: usize,
    #[arg(long, default_value_t = 1000)]
    ct_steps: usize,
    #[arg(long, default_value_t = 0.999)]
    margin_base: f64,
    #[arg(long, default_value_t = 200)]
    warmup: usize,
    #[arg(long, default_value_t = dha_core::optim::LR_MODEL)]
    lr_model: f64,
    #[arg(long, default_value_t = dha_core::optim::LR_FUSION)]
    lr_fusion: f64,
    #[arg(long, default_value_t = dha_core::optim::LR_FUSION)]
    lr_lambda: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    #[arg(long, default_value = "dha", value_parser = parse_baseline)]
    baseline: Baseline,
}

fn parse_score_mode(s: &str) -> Result<ScoreMode, String> {
    s.parse().map_err(|e: dha_core::Error| e.to_string())
}

fn parse_baseline(s: &str) -> Result<Baseline, String> {
    s.parse().map_err(|e: dha_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
