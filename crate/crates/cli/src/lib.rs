//! Command-line driver: synthesize market data, train agents, sweep observation attacks
//! over a trained agent, and aggregate the resulting runs into tables and curves.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_attack, cmd_synth, cmd_train, thread_cap, AttackOptions};
pub use error::{CliError, Result};
pub use report::cmd_report;

#[derive(Debug, Parser)]
#[command(name = "tradefool", version, about = "Train DQN trading agents and attack their observations")]
pub struct Cli {
    /// Generator seed for `synth`, training seed for `train`, chance-stream seed for `attack`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output file for `synth`, output directory for the other commands.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic OHLCV series as CSV.
    Synth(SynthArgs),
    /// Train an agent and write its checkpoint and training trace.
    Train,
    /// Run control and attacked evaluations of a trained agent.
    Attack(AttackArgs),
    /// Summarize a directory of runs into CSV tables and curves.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10_000)]
    pub bars: usize,
    /// Mean log return per bar.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub drift: f64,
    /// Standard deviation of the log-return shock per bar.
    #[arg(long, default_value_t = 0.01)]
    pub volatility: f64,
    /// AR(1) coefficient on the previous log return.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub momentum: f64,
    #[arg(long, default_value_t = 100.0)]
    pub initial_price: f64,
    #[arg(long, default_value_t = 60)]
    pub interval_secs: i64,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Checkpoint to attack; defaults to `<out>/checkpoint.json`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Attack preset to run instead of the config's attack blocks; repeatable.
    #[arg(long = "preset")]
    pub presets: Vec<String>,
    /// Comma-separated chance list; an empty string runs the controls only.
    #[arg(long)]
    pub chances: Option<String>,
    /// Comma-separated run seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Episodes per run.
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory; defaults to `--out`.
    pub dir: Option<PathBuf>,
}

const DEFAULT_OUT: &str = "out";

/// Parses a comma-separated list; the empty string is the empty list.
pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("invalid {what} `{}`", p.trim())))
        })
        .collect()
}

fn require_config(cli: &Cli) -> Result<&Path> {
    cli.config
        .as_deref()
        .ok_or_else(|| CliError::Usage("this command needs --config".into()))
}

/// Executes a parsed command line and returns the lines to print on success.
pub fn run(cli: &Cli) -> Result<Vec<String>> {
    let out = cli.out.clone();
    match &cli.command {
        Command::Synth(a) => {
            let path = out.unwrap_or_else(|| PathBuf::from("bars.csv"));
            let params = commands::SynthParams {
                bars: a.bars,
                initial_price: a.initial_price,
                drift: a.drift,
                volatility: a.volatility,
                momentum: a.momentum,
                seed: cli.seed.unwrap_or(0),
                interval_secs: a.interval_secs,
                ..commands::SynthParams::default()
            };
            let bars = cmd_synth(&params, &path)?;
            Ok(vec![format!("wrote {} bars to {}", bars.len(), path.display())])
        }
        Command::Train => {
            let out = out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
            let r = cmd_train(require_config(cli)?, &out, cli.seed)?;
            let mut lines = vec![
                format!("checkpoint: {}", r.checkpoint.display()),
                format!("trace: {}", r.trace.display()),
                format!("completed episodes: {}", r.episodes),
            ];
            if let Some(m) = r.recent_mean_reward {
                lines.push(format!("mean reward of last episodes: {m:.4}"));
            }
            Ok(lines)
        }
        Command::Attack(a) => {
            let out = out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
            let opts = AttackOptions {
                checkpoint: a.checkpoint.clone(),
                presets: a.presets.clone(),
                chances: a.chances.as_deref().map(|s| parse_list(s, "chance")).transpose()?,
                seeds: a.seeds.as_deref().map(|s| parse_list(s, "seed")).transpose()?,
                episodes: a.episodes,
                attack_seed: cli.seed,
            };
            let r = cmd_attack(require_config(cli)?, &out, &opts)?;
            Ok(vec![format!(
                "{} control and {} attacked runs under {}",
                r.control_runs,
                r.attacked_runs,
                out.display()
            )])
        }
        Command::Report(a) => {
            let dir = a
                .dir
                .clone()
                .or(out)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
            let r = cmd_report(&dir)?;
            Ok(vec![format!(
                "{} control and {} attacked runs, {} table rows, written to {}",
                r.controls,
                r.attacked,
                r.table_rows,
                r.dir.display()
            )])
        }
    }
}
