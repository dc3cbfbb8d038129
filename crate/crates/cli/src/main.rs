//! `spd` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use spd_core::{Budget, PipelineConfig, Result, Strategy};

#[derive(Parser)]
#[command(name = "spd", version, about = "Sync-point drop for tensor-parallel decoder inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy model on the corpus and save a checkpoint.
    Pretrain(Common),
    /// Measure per-block sync sensitivity and classify blocks.
    Scan(Common),
    /// Apply the budgeted treatment and write the optimized artifact.
    Optimize(Common),
    /// Held-out perplexity of a checkpoint, optionally with an overlay and plan.
    EvalPpl(Common),
    /// Predicted communication cost of a sync plan.
    EvalCost(Common),
    /// Quality and cost over every budget and mode.
    Sweep(Common),
    /// Summarize the artifacts in an output directory.
    ExportReport(Common),
}

/// Flags shared by every subcommand. Each overrides the matching key of
/// the `--config` file.
#[derive(Args, Clone, Default)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub devices: Option<usize>,
    /// Block count (`4`) or fraction (`0.5`, `50%`).
    #[arg(long)]
    pub budget: Option<String>,
    #[arg(long)]
    pub tau1: Option<f64>,
    #[arg(long)]
    pub tau2: Option<f64>,
    /// `zs`, `zs+b2b` or `zs+b2b+hg`; comma-separated for `sweep`.
    #[arg(long)]
    pub mode: Option<String>,
    /// System profile name; repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',')]
    pub profile: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overlay checkpoint applied on top of `--checkpoint`.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    /// Sync plan JSON.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Reuse a saved sensitivity report instead of scanning.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Seconds of compute per block for latency predictions.
    #[arg(long)]
    pub compute_time: Option<f64>,
    /// Time an all-TP forward of the checkpoint and use it as the compute
    /// time per block.
    #[arg(long)]
    pub calibrate_compute: bool,
}

impl Common {
    /// Config file (or defaults) with command-line flags applied on top.
    pub fn resolve(&self) -> Result<(PipelineConfig, Vec<Strategy>)> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(p) = &self.checkpoint {
            cfg.checkpoint = Some(p.display().to_string());
        }
        if let Some(p) = &self.corpus {
            cfg.corpus = Some(p.display().to_string());
        }
        if let Some(d) = self.devices {
            cfg.devices = d;
        }
        if let Some(b) = &self.budget {
            cfg.budget = b.parse::<Budget>()?;
        }
        if let Some(t) = self.tau1 {
            cfg.tau1 = t;
        }
        if let Some(t) = self.tau2 {
            cfg.tau2 = t;
        }
        let modes = match &self.mode {
            Some(m) => m.split(',').map(|s| s.trim().parse()).collect::<Result<Vec<Strategy>>>()?,
            None => vec![cfg.mode],
        };
        cfg.mode = modes[0];
        if !self.profile.is_empty() {
            cfg.profiles = self.profile.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.display().to_string();
        }
        if let Some(c) = self.compute_time {
            cfg.compute_time_per_block = c;
        }
        cfg.validate()?;
        Ok((cfg, modes))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(c) => commands::pretrain(c),
        Command::Scan(c) => commands::scan(c),
        Command::Optimize(c) => commands::optimize(c),
        Command::EvalPpl(c) => commands::eval_ppl(c),
        Command::EvalCost(c) => commands::eval_cost(c),
        Command::Sweep(c) => commands::sweep(c),
        Command::ExportReport(c) => commands::export_report(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
