//! Control and attacked evaluation runs, attack ledgers, difference curves and report export.
//!
//! A run plays `episodes` greedy episodes whose start bars are drawn from the run seed, so a
//! control run and an attacked run with the same seed see the same market segments.

mod report;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{delay_attack, least_q_target, AttackConfig, AttackContext, AttackMethod, AttackMode, Goal, Outcome};
use crate::envs::{Env, Observation, TradingEnv, TUPLE_WIDTH};
use crate::error::{Error, Result};
use crate::qnet::QNetwork;

pub use report::{export_attacked, export_control, write_curves_csv, write_ledger_csv, write_record_csv, RunMeta, Summary};

/// Mixed into the run seed for the chance-gating stream.
const CHANCE_STREAM: u64 = 0xC4A1_CE00_0000_0001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub seed: u64,
    pub episodes: usize,
}

impl RunSpec {
    pub fn new(seed: u64, episodes: usize) -> Self {
        Self { seed, episodes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    /// Timestep across the whole run.
    pub t: usize,
    pub episode: usize,
    pub action: usize,
    pub reward: f64,
    pub cum_reward: f64,
    pub net_worth: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<RecordRow>,
}

impl RunRecord {
    fn push(&mut self, episode: usize, action: usize, reward: f64, net_worth: Option<f64>) {
        let cum_reward = self.total_reward() + reward;
        self.rows.push(RecordRow {
            t: self.rows.len(),
            episode,
            action,
            reward,
            cum_reward,
            net_worth,
        });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cum_reward)
    }

    pub fn final_networth(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.net_worth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    /// Chance gate declined to attack.
    Skipped,
    /// A persisted perturbation already changes the action.
    Ncn,
    Success,
    Partial,
    NonTarget,
    Failure,
    /// Observation served one step late.
    Delayed,
}

impl StepOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            StepOutcome::Skipped => "skipped",
            StepOutcome::Ncn => "ncn",
            StepOutcome::Success => "success",
            StepOutcome::Partial => "partial",
            StepOutcome::NonTarget => "non_target",
            StepOutcome::Failure => "failure",
            StepOutcome::Delayed => "delayed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "skipped" => StepOutcome::Skipped,
            "ncn" => StepOutcome::Ncn,
            "success" => StepOutcome::Success,
            "partial" => StepOutcome::Partial,
            "non_target" => StepOutcome::NonTarget,
            "failure" => StepOutcome::Failure,
            "delayed" => StepOutcome::Delayed,
            _ => return None,
        })
    }

    fn from_attack(o: Outcome) -> Self {
        match o {
            Outcome::Success => StepOutcome::Success,
            Outcome::PartialSuccess => StepOutcome::Partial,
            Outcome::NonTargetChange => StepOutcome::NonTarget,
            Outcome::Failure => StepOutcome::Failure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub t: usize,
    pub outcome: StepOutcome,
    /// Greedy action on the clean observation.
    pub a: usize,
    /// Action executed by the environment.
    pub a_prime: usize,
    pub eps: Option<f64>,
    pub l2: Option<f64>,
    /// Clean newest tuple.
    pub original: [f64; TUPLE_WIDTH],
    /// Tuple served in its place, when the attack produced one.
    pub perturbed: Option<[f64; TUPLE_WIDTH]>,
}

/// Disjoint per-step tallies: every eligible step lands in exactly one of
/// `skipped`, `ncn`, `delayed` or one of the four attempt outcomes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerCounters {
    pub eligible: usize,
    pub attempts: usize,
    pub successes: usize,
    pub partial: usize,
    pub non_target: usize,
    pub failures: usize,
    pub ncn: usize,
    pub skipped: usize,
    pub delayed: usize,
}

impl LedgerCounters {
    fn count(&mut self, o: StepOutcome) {
        self.eligible += 1;
        match o {
            StepOutcome::Skipped => self.skipped += 1,
            StepOutcome::Ncn => self.ncn += 1,
            StepOutcome::Delayed => self.delayed += 1,
            attempt => {
                self.attempts += 1;
                match attempt {
                    StepOutcome::Success => self.successes += 1,
                    StepOutcome::Partial => self.partial += 1,
                    StepOutcome::NonTarget => self.non_target += 1,
                    _ => self.failures += 1,
                }
            }
        }
    }

    /// Tallies recomputed from ledger rows.
    pub fn from_rows(rows: &[LedgerRow]) -> Self {
        let mut c = Self::default();
        for r in rows {
            c.count(r.outcome);
        }
        c
    }

    pub fn is_consistent(&self) -> bool {
        self.attempts == self.successes + self.partial + self.non_target + self.failures
            && self.attempts + self.ncn + self.skipped + self.delayed == self.eligible
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackLedger {
    pub env: String,
    pub seed: u64,
    pub config: AttackConfig,
    pub counters: LedgerCounters,
    pub rows: Vec<LedgerRow>,
}

impl AttackLedger {
    fn new(env: &str, seed: u64, config: &AttackConfig) -> Self {
        Self {
            env: env.to_string(),
            seed,
            config: config.clone(),
            counters: LedgerCounters::default(),
            rows: Vec::new(),
        }
    }

    fn record(&mut self, row: LedgerRow) {
        self.counters.count(row.outcome);
        self.rows.push(row);
    }
}

pub fn env_name(env: &Env) -> &'static str {
    match env {
        Env::Basic(_) => "basic",
        Env::Managed(_) => "managed",
    }
}

fn check_fit(net: &QNetwork, env: &dyn TradingEnv) -> Result<()> {
    if net.input_dim() != env.observation_dim() || net.output_dim() != env.action_count() {
        return Err(Error::InvalidConfig(format!(
            "network {:?} does not match env with {} inputs and {} actions",
            net.layer_sizes(),
            env.observation_dim(),
            env.action_count()
        )));
    }
    Ok(())
}

/// Greedy evaluation with no interference.
pub fn run_control(net: &QNetwork, env: &mut dyn TradingEnv, spec: RunSpec) -> Result<RunRecord> {
    check_fit(net, env)?;
    let mut starts = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut record = RunRecord::default();
    for episode in 0..spec.episodes {
        let mut obs = env.reset(&mut starts)?;
        loop {
            let action = net.greedy_action(&obs.to_vector())?;
            let r = env.step(action)?;
            record.push(episode, action, r.reward, r.info.net_worth);
            if r.terminal {
                break;
            }
            obs = r.observation;
        }
    }
    Ok(record)
}

/// Overwrites window tuples whose bars carry a persisted perturbation.
fn overlay(obs: &Observation, persisted: &BTreeMap<usize, [f64; TUPLE_WIDTH]>) -> Observation {
    let mut served = obs.clone();
    if persisted.is_empty() {
        return served;
    }
    for pos in 0..served.window.len() {
        if let Some(t) = persisted.get(&obs.bar_at(pos)) {
            served.window[pos] = *t;
        }
    }
    served
}

/// Evaluation under attack.
///
/// Every eligible step draws once from the chance stream. A step whose served observation
/// already changes the greedy action (because of earlier persisted perturbations) is NCN and
/// executes the changed action. Otherwise, if the draw falls below the chance, the configured
/// attack runs on the newest tuple; qualifying perturbations are persisted for as long as the
/// tuple stays in the window and their induced action is executed, while other outcomes are
/// discarded and the clean greedy action is executed. Delay attacks serve the previous tuple on
/// every step.
pub fn run_attacked(
    net: &QNetwork,
    env: &mut Env,
    config: &AttackConfig,
    spec: RunSpec,
) -> Result<(RunRecord, AttackLedger)> {
    config.validate()?;
    check_fit(net, env)?;
    let types = env.action_types();
    let name = env_name(env);
    let mut starts = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chance_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, config.seed));
    let mut record = RunRecord::default();
    let mut ledger = AttackLedger::new(name, spec.seed, config);

    for episode in 0..spec.episodes {
        let mut obs = env.reset(&mut starts)?;
        let mut persisted: BTreeMap<usize, [f64; TUPLE_WIDTH]> = BTreeMap::new();
        for t in 0.. {
            let clean_state = obs.to_vector();
            let a_clean = net.greedy_action(&clean_state)?;
            let original = obs.newest_tuple();

            let (executed, row) = if config.method == AttackMethod::Delay {
                let served = delay_attack(&obs, t);
                let executed = net.greedy_action(&served.to_vector())?;
                let row = LedgerRow {
                    t: record.len(),
                    outcome: StepOutcome::Delayed,
                    a: a_clean,
                    a_prime: executed,
                    eps: None,
                    l2: None,
                    original,
                    perturbed: Some(served.newest_tuple()),
                };
                (executed, row)
            } else {
                let served = overlay(&obs, &persisted);
                let served_state = served.to_vector();
                let a_served = net.greedy_action(&served_state)?;
                let draw: f64 = chance_rng.random();
                let mut row = LedgerRow {
                    t: record.len(),
                    outcome: StepOutcome::Skipped,
                    a: a_clean,
                    a_prime: a_clean,
                    eps: None,
                    l2: None,
                    original,
                    perturbed: None,
                };
                let executed = if a_served != a_clean {
                    row.outcome = StepOutcome::Ncn;
                    a_served
                } else if draw < config.chance {
                    let goal = match config.mode {
                        AttackMode::NonTargeted => Goal::NonTargeted,
                        AttackMode::Targeted => Goal::Targeted(least_q_target(net, &served_state)?),
                    };
                    let ctx = AttackContext {
                        net,
                        state: &served_state,
                        coords: served.newest_tuple_range(),
                        constraints: &config.constraints,
                        action_types: types.as_deref(),
                    };
                    let result = config.perturb(&ctx, goal)?;
                    let tuple: [f64; TUPLE_WIDTH] = result
                        .perturbed
                        .as_slice()
                        .try_into()
                        .map_err(|_| Error::Invariant("attack returned a tuple of the wrong width".into()))?;
                    row.outcome = StepOutcome::from_attack(result.outcome);
                    row.eps = result.epsilon;
                    row.l2 = Some(result.l2);
                    row.perturbed = Some(tuple);
                    if result.outcome.qualifies() {
                        persisted.insert(obs.newest_bar, tuple);
                        result.induced_action
                    } else {
                        a_clean
                    }
                } else {
                    a_clean
                };
                row.a_prime = executed;
                (executed, row)
            };

            let r = env.step(executed)?;
            record.push(episode, executed, r.reward, r.info.net_worth);
            ledger.record(row);
            if r.terminal {
                break;
            }
            let oldest = r.observation.bar_at(0);
            persisted.retain(|&bar, _| bar >= oldest);
            obs = r.observation;
        }
    }
    if !ledger.counters.is_consistent() {
        return Err(Error::Invariant(format!("ledger counters out of balance: {:?}", ledger.counters)));
    }
    Ok((record, ledger))
}

/// Seed of the chance-gating stream for a run.
pub fn mix_seed(run_seed: u64, attack_seed: u64) -> u64 {
    // SplitMix64 finalizer over the combined seeds.
    let mut z = run_seed ^ attack_seed.rotate_left(32) ^ CHANCE_STREAM;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Control cumulative reward minus attacked cumulative reward, per timestep.
pub fn reward_difference(control: &RunRecord, attacked: &RunRecord) -> Result<Vec<f64>> {
    if control.len() != attacked.len() {
        return Err(Error::dim(control.len(), attacked.len()));
    }
    Ok(control
        .rows
        .iter()
        .zip(&attacked.rows)
        .map(|(c, a)| c.cum_reward - a.cum_reward)
        .collect())
}

/// Control net worth minus attacked net worth, per timestep.
pub fn networth_difference(control: &RunRecord, attacked: &RunRecord) -> Result<Vec<f64>> {
    if control.len() != attacked.len() {
        return Err(Error::dim(control.len(), attacked.len()));
    }
    control
        .rows
        .iter()
        .zip(&attacked.rows)
        .map(|(c, a)| match (c.net_worth, a.net_worth) {
            (Some(x), Some(y)) => Ok(x - y),
            _ => Err(Error::InvalidArgument("environment does not report net worth".into())),
        })
        .collect()
}

/// One attacked run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepJob {
    pub label: String,
    pub config: AttackConfig,
    pub spec: RunSpec,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub job: SweepJob,
    pub record: RunRecord,
    pub ledger: AttackLedger,
}

/// Runs every job on its own copy of `env`, in parallel, returning results in job order.
pub fn run_sweep(net: &QNetwork, env: &Env, jobs: Vec<SweepJob>) -> Result<Vec<SweepResult>> {
    jobs.into_par_iter()
        .map(|job| {
            let mut env = env.clone();
            let (record, ledger) = run_attacked(net, &mut env, &job.config, job.spec)?;
            Ok(SweepResult { job, record, ledger })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{AttackConfig, AttackMode};
    use crate::envs::{BasicEnvConfig, EnvConfig, ManagedEnvConfig};
    use crate::market_data::{generate_bars, Bar, SynthParams};

    fn basic_env(bars: usize, volatility: f64, seed: u64) -> Env {
        let bars = generate_bars(&SynthParams {
            bars,
            volatility,
            seed,
            ..SynthParams::default()
        })
        .unwrap();
        EnvConfig::Basic(BasicEnvConfig::default()).build(&bars).unwrap()
    }

    fn net_for(env: &Env, seed: u64) -> QNetwork {
        QNetwork::new(&[env.observation_dim(), 16, env.action_count()], seed).unwrap()
    }

    #[test]
    fn control_is_deterministic_and_episode_long() {
        let mut env = basic_env(600, 0.01, 3);
        let net = net_for(&env, 1);
        let a = run_control(&net, &mut env, RunSpec::new(5, 2)).unwrap();
        let b = run_control(&net, &mut env, RunSpec::new(5, 2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 500);
    }

    #[test]
    fn always_wait_on_flat_data_earns_nothing() {
        let mut env = basic_env(400, 0.0, 0);
        let net = QNetwork::zeros(&[32, 3]).unwrap();
        let r = run_control(&net, &mut env, RunSpec::new(0, 1)).unwrap();
        assert!(r.rows.iter().all(|row| row.cum_reward == 0.0 && row.action == 0));
    }

    #[test]
    fn zero_chance_matches_control() {
        let mut env = basic_env(600, 0.01, 3);
        let net = net_for(&env, 2);
        let control = run_control(&net, &mut env, RunSpec::new(9, 1)).unwrap();
        let config = AttackConfig {
            chance: 0.0,
            ..AttackConfig::basic_fgsm(AttackMode::NonTargeted)
        };
        let (rec, ledger) = run_attacked(&net, &mut env, &config, RunSpec::new(9, 1)).unwrap();
        assert_eq!(rec, control);
        assert_eq!(ledger.counters.attempts, 0);
        assert_eq!(ledger.counters.skipped, control.len());
        assert!(reward_difference(&control, &rec).unwrap().iter().all(|d| *d == 0.0));
    }

    #[test]
    fn delay_on_flat_stream_matches_control() {
        let mut env = basic_env(400, 0.0, 0);
        let net = net_for(&env, 4);
        let control = run_control(&net, &mut env, RunSpec::new(1, 1)).unwrap();
        let (rec, ledger) = run_attacked(&net, &mut env, &AttackConfig::delay(), RunSpec::new(1, 1)).unwrap();
        assert_eq!(rec, control);
        assert_eq!(ledger.counters.delayed, control.len());
        assert_eq!(ledger.counters.attempts, 0);
    }

    #[test]
    fn ledger_accounting_balances() {
        let mut env = basic_env(800, 0.01, 7);
        let net = net_for(&env, 5);
        for mode in [AttackMode::NonTargeted, AttackMode::Targeted] {
            for chance in [0.1, 0.5, 1.0] {
                let config = AttackConfig {
                    chance,
                    ..AttackConfig::basic_fgsm(mode)
                };
                let (rec, ledger) = run_attacked(&net, &mut env, &config, RunSpec::new(3, 2)).unwrap();
                let c = ledger.counters;
                assert_eq!(c.eligible, rec.len());
                assert_eq!(c.attempts + c.ncn + c.skipped, c.eligible);
                assert_eq!(LedgerCounters::from_rows(&ledger.rows), c);
                for row in &ledger.rows {
                    if row.outcome == StepOutcome::Ncn {
                        assert!(row.perturbed.is_none() && row.eps.is_none());
                    }
                    if let Some(p) = row.perturbed {
                        assert!(crate::attacks::is_valid_relative_price(&p), "{p:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn persisted_tuples_stay_for_one_window() {
        let mut env = basic_env(600, 0.02, 11);
        let net = net_for(&env, 6);
        let config = AttackConfig {
            ladder: crate::attacks::EpsilonLadder {
                start: 0.01,
                end: 0.5,
                iterations: 5,
            },
            chance: 0.5,
            ..AttackConfig::basic_fgsm(AttackMode::NonTargeted)
        };
        let (_, ledger) = run_attacked(&net, &mut env, &config, RunSpec::new(2, 1)).unwrap();
        // Replay with a time-based overlay: a tuple persisted at step t0 sits at window
        // position W - 1 - (t - t0) for t0 <= t < t0 + W.
        const W: usize = 10;
        let mut replay = env.clone();
        let mut obs = replay.reset(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut persisted: Vec<(usize, [f64; 3])> = Vec::new();
        for row in &ledger.rows {
            let mut served = obs.clone();
            for (t0, p) in &persisted {
                if row.t >= *t0 && row.t < t0 + W {
                    served.window[W - 1 - (row.t - t0)] = *p;
                }
            }
            let a = net.greedy_action(&served.to_vector()).unwrap();
            if row.outcome == StepOutcome::Ncn {
                assert_eq!(a, row.a_prime);
                assert_ne!(a, row.a);
            } else {
                assert_eq!(a, row.a);
            }
            if matches!(row.outcome, StepOutcome::Success | StepOutcome::Partial) {
                persisted.push((row.t, row.perturbed.unwrap()));
            }
            let r = replay.step(row.a_prime).unwrap();
            if r.terminal {
                break;
            }
            obs = r.observation;
        }
        assert!(ledger.counters.successes > 0 && ledger.counters.ncn > 0, "{:?}", ledger.counters);
    }

    #[test]
    fn reward_difference_prefix_sums() {
        let mk = |rewards: &[f64]| {
            let mut r = RunRecord::default();
            for (i, x) in rewards.iter().enumerate() {
                r.push(0, i % 3, *x, Some(100.0 + i as f64));
            }
            r
        };
        let control = mk(&[1.0, 2.0, 0.5, 0.0]);
        let attacked = mk(&[1.0, 1.0, 0.5, 0.0]);
        assert_eq!(reward_difference(&control, &attacked).unwrap(), vec![0.0, 1.0, 1.0, 1.0]);
        assert_eq!(networth_difference(&control, &control).unwrap(), vec![0.0; 4]);
        assert!(reward_difference(&control, &mk(&[1.0])).is_err());
        let mut no_worth = attacked.clone();
        no_worth.rows[2].net_worth = None;
        assert!(networth_difference(&control, &no_worth).is_err());
    }

    #[test]
    fn hold_on_uptrend_loses_networth_to_buyer() {
        let bars: Vec<Bar> = (0..120)
            .map(|i| {
                let p = 100.0 + i as f64;
                Bar {
                    timestamp: i,
                    open: p,
                    high: p,
                    low: p,
                    close: p,
                    volume: 1.0,
                }
            })
            .collect();
        let config = ManagedEnvConfig {
            stop: vec![0.5],
            take: vec![0.5],
            trade_sizes: 1,
            ..ManagedEnvConfig::default()
        };
        let mut env = Env::Managed(crate::envs::ManagedRiskEnv::new(&bars, config).unwrap());
        let start = env.start_range().start;
        let mut worth = |action: usize| {
            env.reset_at(start).unwrap();
            (0..5).map(|_| env.step(action).unwrap().info.net_worth.unwrap()).collect::<Vec<_>>()
        };
        let buyer = worth(1);
        let holder = worth(0);
        let mk = |w: &[f64]| RunRecord {
            rows: w
                .iter()
                .enumerate()
                .map(|(t, x)| RecordRow {
                    t,
                    episode: 0,
                    action: 0,
                    reward: 0.0,
                    cum_reward: 0.0,
                    net_worth: Some(*x),
                })
                .collect(),
        };
        let diff = networth_difference(&mk(&buyer), &mk(&holder)).unwrap();
        assert!(diff.iter().all(|d| *d > 0.0), "{diff:?}");
        assert_eq!(*diff.last().unwrap(), buyer[4] - holder[4]);
    }

    #[test]
    fn sweep_matches_sequential_runs() {
        let env = basic_env(600, 0.01, 3);
        let net = net_for(&env, 2);
        let jobs: Vec<SweepJob> = [0.1, 1.0]
            .iter()
            .map(|&chance| SweepJob {
                label: format!("c{chance}"),
                config: AttackConfig {
                    chance,
                    ..AttackConfig::basic_fgsm(AttackMode::Targeted)
                },
                spec: RunSpec::new(4, 1),
            })
            .collect();
        let results = run_sweep(&net, &env, jobs.clone()).unwrap();
        for (res, job) in results.iter().zip(&jobs) {
            let (rec, ledger) = run_attacked(&net, &mut env.clone(), &job.config, job.spec).unwrap();
            assert_eq!(res.record, rec);
            assert_eq!(res.ledger, ledger);
        }
    }
}
