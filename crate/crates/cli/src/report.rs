//! Aggregates a run directory written by `attack` into plot-ready CSV tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use tradefool_core::attacks::{AttackMethod, AttackMode};
use tradefool_core::harness::{LedgerCounters, RunMeta, StepOutcome, Summary};

use crate::commands::{CONTROL_DIR, RUNS_DIR};
use crate::error::{CliError, Result};

pub const REPORT_DIR: &str = "report";

/// One run directory with its metadata and summary.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub meta: RunMeta,
    pub summary: Summary,
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub controls: usize,
    pub attacked: usize,
    /// Rows of `table.csv`: one per (attack label, chance).
    pub table_rows: usize,
    pub dir: PathBuf,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::json(path, e))
}

/// Directories under `root` that contain a `meta.json`, in sorted order.
fn run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    if !root.exists() {
        return Ok(found);
    }
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join("meta.json").is_file() {
            found.push(dir);
            continue;
        }
        for entry in fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))? {
            let path = entry.map_err(|e| CliError::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        meta: read_json(&dir.join("meta.json"))?,
        summary: read_json(&dir.join("summary.json"))?,
    })
}

/// Tallies the `outcome` column of a ledger CSV into counters.
pub fn tally_ledger(path: &Path) -> Result<LedgerCounters> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let col = rdr
        .headers()
        .map_err(|e| CliError::csv(path, e))?
        .iter()
        .position(|h| h == "outcome")
        .ok_or_else(|| CliError::Usage(format!("{}: no outcome column", path.display())))?;
    let mut c = LedgerCounters::default();
    for row in rdr.records() {
        let row = row.map_err(|e| CliError::csv(path, e))?;
        let outcome = StepOutcome::parse(&row[col])
            .ok_or_else(|| CliError::Usage(format!("{}: unknown outcome `{}`", path.display(), &row[col])))?;
        c.eligible += 1;
        match outcome {
            StepOutcome::Skipped => c.skipped += 1,
            StepOutcome::Ncn => c.ncn += 1,
            StepOutcome::Delayed => c.delayed += 1,
            StepOutcome::Success => {
                c.attempts += 1;
                c.successes += 1
            }
            StepOutcome::Partial => {
                c.attempts += 1;
                c.partial += 1
            }
            StepOutcome::NonTarget => {
                c.attempts += 1;
                c.non_target += 1
            }
            StepOutcome::Failure => {
                c.attempts += 1;
                c.failures += 1
            }
        }
    }
    Ok(c)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn method_name(m: AttackMethod) -> &'static str {
    match m {
        AttackMethod::Delay => "delay",
        AttackMethod::Fgsm => "fgsm",
        AttackMethod::Cw => "cw",
    }
}

fn mode_name(m: AttackMode) -> &'static str {
    match m {
        AttackMode::NonTargeted => "non_targeted",
        AttackMode::Targeted => "targeted",
    }
}

struct Group {
    method: &'static str,
    mode: &'static str,
    chance: Option<f64>,
    runs: usize,
    totals: LedgerCounters,
    reward_diffs: Vec<f64>,
    networth_diffs: Vec<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))
}

fn write_row(w: &mut csv::Writer<fs::File>, path: &Path, row: &[String]) -> Result<()> {
    w.write_record(row).map_err(|e| CliError::csv(path, e))
}

/// Reads every control and attacked run under `dir`, checks each summary against its
/// ledger, and writes `report/{controls,runs,table,curves}.csv`.
pub fn cmd_report(dir: &Path) -> Result<ReportOutput> {
    let control_dirs = run_dirs(&dir.join(CONTROL_DIR))?;
    let attacked_dirs = run_dirs(&dir.join(RUNS_DIR))?;
    if control_dirs.is_empty() && attacked_dirs.is_empty() {
        return Err(CliError::Usage(format!("no runs found under {}", dir.display())));
    }
    let controls: BTreeMap<u64, LoadedRun> = control_dirs
        .iter()
        .map(|d| load_run(d).map(|r| (r.meta.seed, r)))
        .collect::<Result<_>>()?;
    let attacked = attacked_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;

    let out = dir.join(REPORT_DIR);
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;

    let path = out.join("controls.csv");
    let mut w = csv_writer(&path)?;
    write_row(&mut w, &path, &["seed", "episodes", "total_reward", "final_networth"].map(String::from))?;
    for (seed, run) in &controls {
        write_row(
            &mut w,
            &path,
            &[
                seed.to_string(),
                run.meta.episodes.to_string(),
                run.summary.total_reward.to_string(),
                fmt_opt(run.summary.final_networth),
            ],
        )?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let runs_path = out.join("runs.csv");
    let mut runs_w = csv_writer(&runs_path)?;
    write_row(
        &mut runs_w,
        &runs_path,
        &[
            "label", "method", "mode", "chance", "seed", "episodes", "eligible", "attempts", "successes", "partial",
            "non_target", "failures", "ncn", "skipped", "delayed", "total_reward", "control_total_reward",
            "reward_diff", "final_networth", "control_final_networth", "networth_diff",
        ]
        .map(String::from),
    )?;
    let curves_path = out.join("curves.csv");
    let mut curves_w = csv_writer(&curves_path)?;
    write_row(
        &mut curves_w,
        &curves_path,
        &["label", "chance", "seed", "t", "reward_diff", "networth_diff"].map(String::from),
    )?;

    let mut groups: Vec<((String, Option<u64>), Group)> = Vec::new();
    for run in &attacked {
        let ledger_path = run.dir.join("ledger.csv");
        let tallied = tally_ledger(&ledger_path)?;
        let counters = run.summary.counters();
        if tallied != counters || !counters.is_consistent() {
            return Err(CliError::Usage(format!(
                "{}: summary counters disagree with ledger rows",
                run.dir.display()
            )));
        }
        let attack = run
            .meta
            .attack
            .as_ref()
            .ok_or_else(|| CliError::Usage(format!("{}: attacked run without attack config", run.dir.display())))?;
        let control = controls.get(&run.meta.seed).ok_or_else(|| {
            CliError::Usage(format!("{}: no control run for seed {}", run.dir.display(), run.meta.seed))
        })?;
        let reward_diff = control.summary.total_reward - run.summary.total_reward;
        let networth_diff = match (control.summary.final_networth, run.summary.final_networth) {
            (Some(c), Some(a)) => Some(c - a),
            _ => None,
        };
        let s = &run.summary;
        write_row(
            &mut runs_w,
            &runs_path,
            &[
                run.meta.label.clone(),
                method_name(attack.method).into(),
                mode_name(attack.mode).into(),
                fmt_opt(run.meta.chance),
                run.meta.seed.to_string(),
                run.meta.episodes.to_string(),
                s.eligible.to_string(),
                s.attempts.to_string(),
                s.successes.to_string(),
                s.partial.to_string(),
                s.non_target.to_string(),
                s.failures.to_string(),
                s.ncn.to_string(),
                s.skipped.to_string(),
                s.delayed.to_string(),
                s.total_reward.to_string(),
                control.summary.total_reward.to_string(),
                reward_diff.to_string(),
                fmt_opt(s.final_networth),
                fmt_opt(control.summary.final_networth),
                fmt_opt(networth_diff),
            ],
        )?;

        let curve_path = run.dir.join("curves.csv");
        let mut rdr = csv::Reader::from_path(&curve_path).map_err(|e| CliError::csv(&curve_path, e))?;
        let headers = rdr.headers().map_err(|e| CliError::csv(&curve_path, e))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CliError::Usage(format!("{}: no {name} column", curve_path.display())))
        };
        let (t, rd, nd) = (col("t")?, col("reward_diff")?, col("networth_diff")?);
        for row in rdr.records() {
            let row = row.map_err(|e| CliError::csv(&curve_path, e))?;
            write_row(
                &mut curves_w,
                &curves_path,
                &[
                    run.meta.label.clone(),
                    fmt_opt(run.meta.chance),
                    run.meta.seed.to_string(),
                    row[t].to_string(),
                    row[rd].to_string(),
                    row[nd].to_string(),
                ],
            )?;
        }

        let key = (run.meta.label.clone(), run.meta.chance.map(f64::to_bits));
        let index = match groups.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                groups.push((
                    key,
                    Group {
                        method: method_name(attack.method),
                        mode: mode_name(attack.mode),
                        chance: run.meta.chance,
                        runs: 0,
                        totals: LedgerCounters::default(),
                        reward_diffs: Vec::new(),
                        networth_diffs: Vec::new(),
                    },
                ));
                groups.len() - 1
            }
        };
        let g = &mut groups[index].1;
        g.runs += 1;
        g.totals.eligible += counters.eligible;
        g.totals.attempts += counters.attempts;
        g.totals.successes += counters.successes;
        g.totals.partial += counters.partial;
        g.totals.non_target += counters.non_target;
        g.totals.failures += counters.failures;
        g.totals.ncn += counters.ncn;
        g.totals.skipped += counters.skipped;
        g.totals.delayed += counters.delayed;
        g.reward_diffs.push(reward_diff);
        g.networth_diffs.extend(networth_diff);
    }
    runs_w.flush().map_err(|e| CliError::io(&runs_path, e))?;
    curves_w.flush().map_err(|e| CliError::io(&curves_path, e))?;

    groups.sort_by(|(a, ga), (b, gb)| {
        a.0.cmp(&b.0)
            .then_with(|| ga.chance.unwrap_or(-1.0).total_cmp(&gb.chance.unwrap_or(-1.0)))
    });
    let table_path = out.join("table.csv");
    let mut w = csv_writer(&table_path)?;
    write_row(
        &mut w,
        &table_path,
        &[
            "label", "method", "mode", "chance", "runs", "eligible", "attempts", "successes", "partial", "non_target",
            "failures", "ncn", "skipped", "delayed", "mean_reward_diff", "mean_networth_diff",
        ]
        .map(String::from),
    )?;
    for ((label, _), g) in &groups {
        let t = &g.totals;
        write_row(
            &mut w,
            &table_path,
            &[
                label.clone(),
                g.method.into(),
                g.mode.into(),
                fmt_opt(g.chance),
                g.runs.to_string(),
                t.eligible.to_string(),
                t.attempts.to_string(),
                t.successes.to_string(),
                t.partial.to_string(),
                t.non_target.to_string(),
                t.failures.to_string(),
                t.ncn.to_string(),
                t.skipped.to_string(),
                t.delayed.to_string(),
                fmt_opt(mean(&g.reward_diffs)),
                fmt_opt(mean(&g.networth_diffs)),
            ],
        )?;
    }
    w.flush().map_err(|e| CliError::io(&table_path, e))?;

    Ok(ReportOutput {
        controls: controls.len(),
        attacked: attacked.len(),
        table_rows: groups.len(),
        dir: out,
    })
}
