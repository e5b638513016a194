//! Experiment config files.
//!
//! A config is one JSON object with `data`, `env`, `trainer`, `attack` and `sweep` blocks.
//! The `env`, `trainer` and each `attack` block name a built-in preset with `"preset"`
//! and override any of its fields:
//!
//! ```json
//! {
//!   "seed": 7,
//!   "data": { "train": { "path": "train.csv" }, "eval": { "path": "eval.csv" } },
//!   "env": { "preset": "basic", "commission_pct": 0.1 },
//!   "trainer": { "preset": "basic", "total_timesteps": 20000 },
//!   "attack": [{ "preset": "basic-fgsm" }, { "preset": "delay" }],
//!   "sweep": { "chances": [0.01, 0.1, 0.5, 1.0], "seeds": [1, 2, 3], "episodes": 1 }
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use tradefool_core::attacks::{AttackConfig, AttackMethod, PRESET_NAMES};
use tradefool_core::dqn::TrainerConfig;
use tradefool_core::envs::{BasicEnvConfig, EnvConfig, ManagedEnvConfig};
use tradefool_core::market_data::{generate_bars, read_csv, write_csv, Bar, CsvSchema, SynthParams};

use crate::error::{CliError, Result};

/// Where a bar series comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// CSV file, relative to the config file's directory.
    Path(PathBuf),
    Synth(SynthParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    pub train: DataSource,
    /// Series for attack runs; defaults to `train`.
    #[serde(default)]
    pub eval: Option<DataSource>,
    #[serde(default)]
    pub schema: CsvSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepBlock {
    pub chances: Vec<f64>,
    pub seeds: Vec<u64>,
    pub episodes: usize,
}

impl Default for SweepBlock {
    fn default() -> Self {
        Self {
            chances: vec![1.0],
            seeds: vec![0],
            episodes: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    Many(Vec<Value>),
    One(Value),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: Option<u64>,
    data: DataBlock,
    #[serde(default)]
    env: Option<Value>,
    #[serde(default)]
    trainer: Option<Value>,
    #[serde(default)]
    attack: Option<OneOrMany>,
    #[serde(default)]
    sweep: SweepBlock,
}

/// An attack configuration with the label its runs are filed under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledAttack {
    pub label: String,
    pub config: AttackConfig,
}

/// A config file with every preset expanded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub seed: Option<u64>,
    pub data: DataBlock,
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub attacks: Vec<LabelledAttack>,
    pub sweep: SweepBlock,
    /// Directory that relative data paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub fn env_preset(name: &str) -> Option<EnvConfig> {
    match name {
        "basic" => Some(EnvConfig::Basic(BasicEnvConfig::default())),
        "managed" => Some(EnvConfig::Managed(ManagedEnvConfig::default())),
        _ => None,
    }
}

/// Expands `{"preset": name, ...overrides}` into a `T`, rejecting override keys the
/// preset does not have. Nested objects merge field by field, except tagged ones
/// (those with a `kind` key), which are replaced whole.
pub fn resolve_block<T, F>(block: Option<&Value>, default_preset: &str, what: &str, lookup: F) -> Result<T>
where
    T: Serialize + DeserializeOwned,
    F: Fn(&str) -> Option<T>,
{
    let mut overrides = match block {
        None | Some(Value::Null) => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return Err(CliError::Usage(format!("{what} block must be a JSON object"))),
    };
    let name = match overrides.remove("preset") {
        None => default_preset.to_string(),
        Some(Value::String(s)) => s,
        Some(_) => return Err(CliError::Usage(format!("{what} preset must be a string"))),
    };
    if name.is_empty() {
        return Err(CliError::Usage(format!("{what} block needs a `preset`")));
    }
    let preset = lookup(&name).ok_or_else(|| CliError::Usage(format!("unknown {what} preset `{name}`")))?;
    let mut value = serde_json::to_value(&preset).map_err(|e| CliError::Usage(e.to_string()))?;
    merge(&mut value, &Value::Object(overrides.clone()));
    let resolved: T =
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid {what} block: {e}")))?;
    let check = serde_json::to_value(&resolved).map_err(|e| CliError::Usage(e.to_string()))?;
    check_known(&check, &Value::Object(overrides), what, "")?;
    Ok(resolved)
}

fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(base_map), Value::Object(over)) => {
            for (k, v) in over {
                match base_map.get_mut(k) {
                    Some(slot @ Value::Object(_)) if v.is_object() && slot.get("kind").is_none() => merge(slot, v),
                    Some(slot) => *slot = v.clone(),
                    None => {
                        base_map.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (base, overlay) => *base = overlay.clone(),
    }
}

fn check_known(resolved: &Value, overlay: &Value, what: &str, path: &str) -> Result<()> {
    let (Value::Object(res), Value::Object(over)) = (resolved, overlay) else {
        return Ok(());
    };
    for (k, v) in over {
        let key_path = format!("{path}{k}");
        match res.get(k) {
            None => return Err(CliError::Usage(format!("unknown field `{key_path}` in {what} block"))),
            Some(r) => check_known(r, v, what, &format!("{key_path}."))?,
        }
    }
    Ok(())
}

fn attack_label(block: &Value, index: usize) -> String {
    block
        .get("label")
        .or_else(|| block.get("preset"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .unwrap_or_else(|| format!("attack-{index}"))
}

/// Resolves one attack block. `label` is optional and defaults to the preset name.
pub fn resolve_attack(block: &Value, index: usize) -> Result<LabelledAttack> {
    let label = attack_label(block, index);
    if label.is_empty() || label.contains(['/', '\\']) || label.starts_with('.') {
        return Err(CliError::Usage(format!("attack label `{label}` is not a valid directory name")));
    }
    let mut block = block.clone();
    if let Value::Object(m) = &mut block {
        m.remove("label");
    }
    let config: AttackConfig = resolve_block(Some(&block), "", "attack", AttackConfig::preset)?;
    config.validate()?;
    Ok(LabelledAttack { label, config })
}

pub fn attack_presets(names: &[String]) -> Result<Vec<LabelledAttack>> {
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            if !PRESET_NAMES.contains(&name.as_str()) {
                return Err(CliError::Usage(format!(
                    "unknown attack preset `{name}` (known: {})",
                    PRESET_NAMES.join(", ")
                )));
            }
            resolve_attack(&serde_json::json!({ "preset": name }), i)
        })
        .collect()
}

impl ResolvedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base_dir).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        let env: EnvConfig = resolve_block(raw.env.as_ref(), "basic", "env", env_preset)?;
        let trainer: TrainerConfig = resolve_block(raw.trainer.as_ref(), env.name(), "trainer", TrainerConfig::preset)?;
        trainer.validate()?;
        let blocks = match raw.attack {
            None => Vec::new(),
            Some(OneOrMany::One(v)) => vec![v],
            Some(OneOrMany::Many(v)) => v,
        };
        let attacks = blocks
            .iter()
            .enumerate()
            .map(|(i, b)| resolve_attack(b, i))
            .collect::<Result<Vec<_>>>()?;
        let mut labels: Vec<&str> = attacks.iter().map(|a| a.label.as_str()).collect();
        labels.sort_unstable();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(CliError::Usage(format!("duplicate attack label `{}`", w[0])));
        }
        validate_sweep(&raw.sweep)?;
        Ok(Self {
            seed: raw.seed,
            data: raw.data,
            env,
            trainer,
            attacks,
            sweep: raw.sweep,
            base_dir,
        })
    }

    /// Bars and digest of the training series.
    pub fn train_data(&self) -> Result<LoadedData> {
        self.load_source(&self.data.train)
    }

    /// Bars and digest of the evaluation series.
    pub fn eval_data(&self) -> Result<LoadedData> {
        self.load_source(self.data.eval.as_ref().unwrap_or(&self.data.train))
    }

    fn load_source(&self, source: &DataSource) -> Result<LoadedData> {
        match source {
            DataSource::Path(p) => {
                let path = self.base_dir.join(p);
                let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
                let bars = read_csv(bytes.as_slice(), &self.data.schema).map_err(|e| match e {
                    tradefool_core::Error::Csv(source) => CliError::csv(&path, source),
                    tradefool_core::Error::InvalidRow { row, message } => {
                        CliError::Usage(format!("{}: row {row}: {message}", path.display()))
                    }
                    other => CliError::Core(other),
                })?;
                Ok(LoadedData {
                    bars,
                    digest: sha256_hex(&bytes),
                })
            }
            DataSource::Synth(params) => {
                let bars = generate_bars(params).map_err(|e| CliError::Usage(e.to_string()))?;
                let mut bytes = Vec::new();
                write_csv(&mut bytes, &bars)?;
                Ok(LoadedData {
                    bars,
                    digest: sha256_hex(&bytes),
                })
            }
        }
    }
}

pub fn validate_sweep(sweep: &SweepBlock) -> Result<()> {
    if let Some(c) = sweep.chances.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(CliError::Usage(format!("chance {c} outside [0, 1]")));
    }
    if sweep.episodes == 0 {
        return Err(CliError::Usage("episodes must be positive".into()));
    }
    Ok(())
}

pub struct LoadedData {
    pub bars: Vec<Bar>,
    /// SHA-256 of the CSV bytes (generated bytes for synthetic sources).
    pub digest: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Whether an attack ignores the chance list.
pub fn is_delay(config: &AttackConfig) -> bool {
    config.method == AttackMethod::Delay
}
