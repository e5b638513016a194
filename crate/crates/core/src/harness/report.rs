use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{networth_difference, reward_difference, AttackLedger, LedgerCounters, RunRecord};
use crate::attacks::AttackConfig;
use crate::error::{Error, Result};

/// Counters and totals of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub attempts: usize,
    pub failures: usize,
    pub ncn: usize,
    pub partial: usize,
    pub non_target: usize,
    pub total_reward: f64,
    pub final_networth: Option<f64>,
    pub successes: usize,
    pub skipped: usize,
    pub delayed: usize,
    pub eligible: usize,
}

impl Summary {
    pub fn new(counters: &LedgerCounters, record: &RunRecord) -> Self {
        Self {
            attempts: counters.attempts,
            failures: counters.failures,
            ncn: counters.ncn,
            partial: counters.partial,
            non_target: counters.non_target,
            total_reward: record.total_reward(),
            final_networth: record.final_networth(),
            successes: counters.successes,
            skipped: counters.skipped,
            delayed: counters.delayed,
            eligible: counters.eligible,
        }
    }

    pub fn counters(&self) -> LedgerCounters {
        LedgerCounters {
            eligible: self.eligible,
            attempts: self.attempts,
            successes: self.successes,
            partial: self.partial,
            non_target: self.non_target,
            failures: self.failures,
            ncn: self.ncn,
            skipped: self.skipped,
            delayed: self.delayed,
        }
    }
}

/// Identifies a run inside an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub label: String,
    pub env: String,
    pub seed: u64,
    pub episodes: usize,
    pub chance: Option<f64>,
    pub attack: Option<AttackConfig>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_ledger_csv<W: Write>(writer: W, ledger: &AttackLedger) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "t", "outcome", "a", "a_prime", "eps", "l2", "orig_0", "orig_1", "orig_2", "pert_0", "pert_1", "pert_2",
    ])?;
    for r in &ledger.rows {
        let mut rec = vec![
            r.t.to_string(),
            r.outcome.as_str().to_string(),
            r.a.to_string(),
            r.a_prime.to_string(),
            opt(r.eps),
            opt(r.l2),
        ];
        rec.extend(r.original.iter().map(f64::to_string));
        match r.perturbed {
            Some(p) => rec.extend(p.iter().map(f64::to_string)),
            None => rec.extend(std::iter::repeat_n(String::new(), 3)),
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<ledger>", e))?;
    Ok(())
}

pub fn write_record_csv<W: Write>(writer: W, record: &RunRecord) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "episode", "action", "reward", "cum_reward", "net_worth"])?;
    for r in &record.rows {
        w.write_record([
            r.t.to_string(),
            r.episode.to_string(),
            r.action.to_string(),
            r.reward.to_string(),
            r.cum_reward.to_string(),
            opt(r.net_worth),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<record>", e))?;
    Ok(())
}

/// Plot-ready difference curves of an attacked run against its control.
pub fn write_curves_csv<W: Write>(writer: W, control: &RunRecord, attacked: &RunRecord) -> Result<()> {
    let reward = reward_difference(control, attacked)?;
    let worth = networth_difference(control, attacked).ok();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "t",
        "control_cum_reward",
        "attacked_cum_reward",
        "reward_diff",
        "control_networth",
        "attacked_networth",
        "networth_diff",
    ])?;
    for (i, (c, a)) in control.rows.iter().zip(&attacked.rows).enumerate() {
        w.write_record([
            c.t.to_string(),
            c.cum_reward.to_string(),
            a.cum_reward.to_string(),
            reward[i].to_string(),
            opt(c.net_worth),
            opt(a.net_worth),
            opt(worth.as_ref().map(|d| d[i])),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<curves>", e))?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `record.csv`, `summary.json` (zero counters) and `meta.json`.
pub fn export_control(dir: &Path, record: &RunRecord, meta: &RunMeta) -> Result<()> {
    ensure_dir(dir)?;
    write_record_csv(create(&dir.join("record.csv"))?, record)?;
    write_json(&dir.join("summary.json"), &Summary::new(&LedgerCounters::default(), record))?;
    write_json(&dir.join("meta.json"), meta)
}

/// Writes `ledger.csv`, `record.csv`, `curves.csv`, `summary.json` and `meta.json`.
pub fn export_attacked(
    dir: &Path,
    control: &RunRecord,
    record: &RunRecord,
    ledger: &AttackLedger,
    meta: &RunMeta,
) -> Result<()> {
    ensure_dir(dir)?;
    write_ledger_csv(create(&dir.join("ledger.csv"))?, ledger)?;
    write_record_csv(create(&dir.join("record.csv"))?, record)?;
    write_curves_csv(create(&dir.join("curves.csv"))?, control, record)?;
    write_json(&dir.join("summary.json"), &Summary::new(&ledger.counters, record))?;
    write_json(&dir.join("meta.json"), meta)
}
