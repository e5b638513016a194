use std::collections::HashSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use tradefool_core::dqn::{train, write_trace_csv};
use tradefool_core::envs::{Env, ManagedEnvConfig, TradingEnv};
use tradefool_core::harness::{export_attacked, export_control, run_control, run_sweep, RunMeta, RunSpec, SweepJob};
use tradefool_core::market_data::{generate_bars, write_csv, Bar, INDICATOR_WARMUP};
use tradefool_core::qnet::{Checkpoint, QNetwork, SeedLineage};

use crate::config::{attack_presets, is_delay, sha256_hex, validate_sweep, LabelledAttack, ResolvedConfig};
use crate::error::{CliError, Result};
use crate::manifest::{ResolvedSeeds, RunManifest};

pub use tradefool_core::market_data::SynthParams;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.json";
pub const CONTROL_DIR: &str = "control";
pub const RUNS_DIR: &str = "runs";

/// Shortest series any environment preset can run on.
pub fn min_synth_bars() -> usize {
    INDICATOR_WARMUP + ManagedEnvConfig::default().window + 2
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn json_bytes<T: serde::Serialize>(path: &Path, value: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::json(path, e))?;
    text.push('\n');
    Ok(text.into_bytes())
}

/// Writes a synthetic bar series to `out` as CSV.
pub fn cmd_synth(params: &SynthParams, out: &Path) -> Result<Vec<Bar>> {
    if params.bars < min_synth_bars() {
        return Err(CliError::Usage(format!(
            "--bars must be at least {} (indicator warmup plus one window)",
            min_synth_bars()
        )));
    }
    let bars = generate_bars(params).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut bytes = Vec::new();
    write_csv(&mut bytes, &bars)?;
    write_file(out, &bytes)?;
    Ok(bars)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub episodes: usize,
    /// Mean total reward over the last (up to ten) completed episodes.
    pub recent_mean_reward: Option<f64>,
}

/// Trains the configured agent and writes `checkpoint.json`, `trace.csv`, the resolved
/// config and a manifest line under `out`.
pub fn cmd_train(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<TrainReport> {
    let config = ResolvedConfig::load(config_path)?;
    let data = config.train_data()?;
    let mut env = config.env.build(&data.bars).map_err(|e| CliError::Usage(e.to_string()))?;
    let seed = seed.or(config.seed).unwrap_or(0);

    let seeds = ResolvedSeeds {
        train: Some(seed),
        ..ResolvedSeeds::default()
    };
    RunManifest::new("train", Some(config_path), out, seeds, data.digest).append(out)?;
    let resolved_path = out.join(RESOLVED_CONFIG_FILE);
    write_file(&resolved_path, &json_bytes(&resolved_path, &config)?)?;

    let outcome = train(&mut env, &config.trainer, seed)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    Checkpoint::new(
        &outcome.network,
        SeedLineage {
            init_seed: seed,
            train_seed: Some(seed),
        },
    )
    .save(&checkpoint)?;
    let trace = out.join(TRACE_FILE);
    let file = File::create(&trace).map_err(|e| CliError::io(&trace, e))?;
    write_trace_csv(BufWriter::new(file), &outcome.trace)?;

    let rewards = &outcome.episode_rewards;
    let recent = &rewards[rewards.len().saturating_sub(10)..];
    Ok(TrainReport {
        checkpoint,
        trace,
        episodes: rewards.len(),
        recent_mean_reward: (!recent.is_empty()).then(|| recent.iter().sum::<f64>() / recent.len() as f64),
    })
}

/// Flag overrides for [`cmd_attack`]; `None` and empty preset lists defer to the config.
#[derive(Debug, Clone, Default)]
pub struct AttackOptions {
    pub checkpoint: Option<PathBuf>,
    pub presets: Vec<String>,
    pub chances: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub episodes: Option<usize>,
    /// Seed of the chance-gating stream, applied to every attack config.
    pub attack_seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct AttackReport {
    pub control_runs: usize,
    pub attacked_runs: usize,
}

pub fn seed_dir(seed: u64) -> String {
    format!("seed-{seed}")
}

pub fn chance_dir(chance: f64) -> String {
    format!("chance-{chance}")
}

fn check_fit(net: &QNetwork, env: &Env) -> Result<()> {
    if net.input_dim() != env.observation_dim() || net.output_dim() != env.action_count() {
        return Err(CliError::Usage(format!(
            "checkpoint network {:?} is incompatible with the {} env ({} inputs, {} actions)",
            net.layer_sizes(),
            tradefool_core::harness::env_name(env),
            env.observation_dim(),
            env.action_count()
        )));
    }
    Ok(())
}

fn unique<T: Copy + std::fmt::Display>(values: &[T], key: impl Fn(T) -> u64, what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for &v in values {
        if !seen.insert(key(v)) {
            return Err(CliError::Usage(format!("duplicate {what} {v}")));
        }
    }
    Ok(())
}

/// Plays one control run per seed and one attacked run per (attack config, chance, seed)
/// with the checkpointed agent, writing every run under `out`. Delay attacks ignore the
/// chance list and run once per seed.
pub fn cmd_attack(config_path: &Path, out: &Path, opts: &AttackOptions) -> Result<AttackReport> {
    let config = ResolvedConfig::load(config_path)?;
    let mut sweep = config.sweep.clone();
    if let Some(c) = &opts.chances {
        sweep.chances = c.clone();
    }
    if let Some(s) = &opts.seeds {
        sweep.seeds = s.clone();
    }
    if let Some(e) = opts.episodes {
        sweep.episodes = e;
    }
    validate_sweep(&sweep)?;
    unique(&sweep.chances, f64::to_bits, "chance")?;
    unique(&sweep.seeds, |s| s, "seed")?;
    let mut attacks: Vec<LabelledAttack> = if opts.presets.is_empty() {
        config.attacks.clone()
    } else {
        attack_presets(&opts.presets)?
    };
    if let Some(seed) = opts.attack_seed {
        attacks.iter_mut().for_each(|a| a.config.seed = seed);
    }

    let checkpoint_path = opts.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let checkpoint_bytes = fs::read(&checkpoint_path).map_err(|e| CliError::io(&checkpoint_path, e))?;
    let checkpoint: Checkpoint =
        serde_json::from_slice(&checkpoint_bytes).map_err(|e| CliError::json(&checkpoint_path, e))?;
    let net = checkpoint
        .into_network()
        .map_err(|e| CliError::Usage(format!("{}: {e}", checkpoint_path.display())))?;
    let data = config.eval_data()?;
    let env = config.env.build(&data.bars).map_err(|e| CliError::Usage(e.to_string()))?;
    check_fit(&net, &env)?;

    let mut manifest = RunManifest::new(
        "attack",
        Some(config_path),
        out,
        ResolvedSeeds {
            train: None,
            attack: opts.attack_seed,
            runs: sweep.seeds.clone(),
        },
        data.digest,
    );
    manifest.checkpoint_digest = Some(sha256_hex(&checkpoint_bytes));
    manifest.append(out)?;

    let env_name = config.env.name();
    let mut controls = Vec::with_capacity(sweep.seeds.len());
    for &seed in &sweep.seeds {
        let spec = RunSpec::new(seed, sweep.episodes);
        let record = run_control(&net, &mut env.clone(), spec)?;
        let meta = RunMeta {
            label: CONTROL_DIR.into(),
            env: env_name.into(),
            seed,
            episodes: sweep.episodes,
            chance: None,
            attack: None,
        };
        export_control(&out.join(CONTROL_DIR).join(seed_dir(seed)), &record, &meta)?;
        controls.push(record);
    }

    let mut jobs = Vec::new();
    let mut dirs = Vec::new();
    for attack in &attacks {
        let chances: Vec<Option<f64>> = if is_delay(&attack.config) {
            vec![None]
        } else {
            sweep.chances.iter().map(|&c| Some(c)).collect()
        };
        for chance in chances {
            for (i, &seed) in sweep.seeds.iter().enumerate() {
                let mut cfg = attack.config.clone();
                let mut dir = out.join(RUNS_DIR).join(&attack.label);
                if let Some(c) = chance {
                    cfg.chance = c;
                    dir = dir.join(chance_dir(c));
                }
                dirs.push((dir.join(seed_dir(seed)), i, chance));
                jobs.push(SweepJob {
                    label: attack.label.clone(),
                    config: cfg,
                    spec: RunSpec::new(seed, sweep.episodes),
                });
            }
        }
    }

    let results = run_sweep(&net, &env, jobs)?;
    for (result, (dir, control_index, chance)) in results.iter().zip(&dirs) {
        let meta = RunMeta {
            label: result.job.label.clone(),
            env: env_name.into(),
            seed: result.job.spec.seed,
            episodes: result.job.spec.episodes,
            chance: *chance,
            attack: Some(result.job.config.clone()),
        };
        export_attacked(dir, &controls[*control_index], &result.record, &result.ledger, &meta)?;
    }
    Ok(AttackReport {
        control_runs: controls.len(),
        attacked_runs: results.len(),
    })
}

/// Caps the sweep's worker threads from `TRADEFOOL_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("TRADEFOOL_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Usage(format!("TRADEFOOL_THREADS: {e}"))),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("TRADEFOOL_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}
