use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use tradefool_cli::config::sha256_hex;
use tradefool_cli::{cmd_attack, cmd_report, cmd_train, AttackOptions};
use tradefool_core::attacks::{
    cw_l2_box, is_valid_relative_price, AttackConfig, AttackContext, AttackMode, ConstraintKind, ConstraintSpec,
    CwParams, CwVariant, Goal, Outcome,
};
use tradefool_core::dqn::{train, TrainerConfig, Transition};
use tradefool_core::envs::{build_action_table, BasicEnvConfig, Env, EnvConfig, ManagedEnvConfig, ManagedRiskAction};
use tradefool_core::harness::{run_attacked, run_control, RunRecord, RunSpec, Summary};
use tradefool_core::market_data::{generate_bars, macd, rsi_with, Bar, MacdParams, RsiSmoothing, SynthParams};
use tradefool_core::qnet::{td_loss, td_target, DenseLayer, InputLoss, QNetwork, TargetNetwork};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

const FD_H: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-3;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Pre-activations of every hidden layer, from an independent forward pass.
fn hidden_pre_activations(net: &QNetwork, x: &[f64]) -> Vec<f64> {
    let layers: &[DenseLayer] = net.layers();
    let mut act = x.to_vec();
    let mut pre = Vec::new();
    for l in &layers[..layers.len() - 1] {
        let z: Vec<f64> = (0..l.outputs)
            .map(|o| l.biases[o] + (0..l.inputs).map(|j| l.weights[o * l.inputs + j] * act[j]).sum::<f64>())
            .collect();
        act = z.iter().map(|v| v.max(0.0)).collect();
        pre.extend(z);
    }
    pre
}

fn clear_of_kinks(net: &QNetwork, x: &[f64]) -> bool {
    hidden_pre_activations(net, x).iter().all(|z| z.abs() > KINK_MARGIN)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_net(rng: &mut ChaCha8Rng) -> QNetwork {
    let hidden = rng.random_range(1..=3);
    let mut sizes = vec![rng.random_range(1..=16)];
    sizes.extend((0..hidden).map(|_| rng.random_range(1..=16)));
    sizes.push(rng.random_range(2..=16));
    QNetwork::new(&sizes, rng.random()).unwrap()
}

fn mse(net: &QNetwork, target: &TargetNetwork, batch: &[Transition], gamma: f64) -> f64 {
    batch
        .iter()
        .map(|t| {
            let next = target.forward(&t.next_state).unwrap();
            let best = next.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let y = if t.terminal { t.reward } else { t.reward + gamma * best };
            (net.forward(&t.state).unwrap()[t.action] - y).powi(2)
        })
        .sum::<f64>()
        / batch.len() as f64
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut coords, mut resampled, mut bad) = (0.0_f64, 0usize, 0usize, 0usize);
    let gamma = 0.9;
    for _ in 0..50 {
        let (net, batch, x) = loop {
            let net = random_net(&mut rng);
            let (d, a) = (net.input_dim(), net.output_dim());
            let batch: Vec<Transition> = (0..4)
                .map(|_| Transition {
                    state: random_vec(&mut rng, d),
                    action: rng.random_range(0..a),
                    reward: rng.random_range(-1.0..1.0),
                    next_state: random_vec(&mut rng, d),
                    terminal: rng.random_bool(0.2),
                })
                .collect();
            let x = random_vec(&mut rng, d);
            let mut q = net.forward(&x).unwrap();
            q.sort_by(f64::total_cmp);
            let separated = q.windows(2).all(|w| w[1] - w[0] > KINK_MARGIN);
            if separated && clear_of_kinks(&net, &x) && batch.iter().all(|t| clear_of_kinks(&net, &t.state)) {
                break (net, batch, x);
            }
            resampled += 1;
        };

        let target = TargetNetwork::new(&QNetwork::new(&net.layer_sizes(), rng.random()).unwrap());
        let analytic = td_loss(&net, &target, &batch, gamma).unwrap().flatten();
        let params = net.parameters();
        let mut probe = net.clone();
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] = params[i] + FD_H;
            probe.set_parameters(&p).unwrap();
            let up = mse(&probe, &target, &batch, gamma);
            p[i] = params[i] - FD_H;
            probe.set_parameters(&p).unwrap();
            let down = mse(&probe, &target, &batch, gamma);
            let e = rel_err(analytic[i], (up - down) / (2.0 * FD_H));
            worst = worst.max(e);
            bad += usize::from(e > FD_REL_TOL);
            coords += 1;
        }

        let a = net.output_dim();
        let action = rng.random_range(0..a);
        for loss in [
            InputLoss::CrossEntropy { action },
            InputLoss::MarginAway { action, confidence: 1e6 },
            InputLoss::MarginToward { target: action, confidence: 1e6 },
        ] {
            let g = net.input_gradient(&x, &loss).unwrap();
            for d in 0..x.len() {
                let mut up = x.clone();
                up[d] += FD_H;
                let mut down = x.clone();
                down[d] -= FD_H;
                let fu = loss.evaluate(&net.forward(&up).unwrap()).0;
                let fd = loss.evaluate(&net.forward(&down).unwrap()).0;
                let e = rel_err(g[d], (fu - fd) / (2.0 * FD_H));
                worst = worst.max(e);
                bad += usize::from(e > FD_REL_TOL);
                coords += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        bad == 0 && elapsed < Duration::from_secs(10),
        format!(
            "50 nets, {coords} coordinates, worst rel err {worst:.2e} (tol {FD_REL_TOL:e}, h {FD_H:e}, floor {FD_FLOOR:e}), \
             {resampled} draws resampled away from ReLU kinks, {:.2}s (limit 10s)",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Action-space count

fn action_space_count() -> Verdict {
    let stop = [0.02, 0.04, 0.06];
    let take = [0.01, 0.02, 0.03];
    let full = build_action_table(&stop, &take, 10).unwrap();
    let small = build_action_table(&stop, &take, 3).unwrap();
    let mut sizes: Vec<f64> = small
        .iter()
        .filter_map(|a| match a {
            ManagedRiskAction::Trade { size, .. } => Some(100.0 * size),
            ManagedRiskAction::Hold => None,
        })
        .collect();
    sizes.sort_by(f64::total_cmp);
    sizes.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let expected = [33.3, 66.6, 99.9];
    let sizes_ok = sizes.len() == 3 && sizes.iter().zip(expected).all(|(s, e)| (s - e).abs() < 1e-9);
    verdict(
        full.len() == 181 && full[0] == ManagedRiskAction::Hold && sizes_ok,
        format!("{} actions for 10 sizes (expected 181), size percentages for 3 sizes {sizes:?}", full.len()),
    )
}

// ---------------------------------------------------------------------------
// 3. Constraint validator and projector

/// Perturbed relative-price tuples `(high, low, close)` reported for attacks on the basic env.
const REFERENCE_PERTURBED_TUPLES: [[f64; 3]; 20] = [
    [0.0000, -0.0045, -0.0025],
    [0.0000, -0.0006, -0.0004],
    [0.0027, -0.0002, 0.0027],
    [0.0041, 0.0000, 0.0032],
    [0.0001, -0.0044, 0.0001],
    [0.0003, 0.0000, 0.0003],
    [0.0002, 0.0000, 0.0002],
    [0.0002, -0.0002, 0.0002],
    [0.0002, -0.0002, 0.0002],
    [0.0003, -0.0003, 0.0003],
    [0.0000, -0.0040, -0.0033],
    [0.0016, -0.0027, -0.0021],
    [0.0012, -0.0018, -0.0018],
    [0.0000, -0.0025, -0.0024],
    [0.0018, -0.0029, -0.0022],
    [0.0003, 0.0000, 0.0003],
    [0.0003, -0.0003, 0.0003],
    [0.0003, -0.0003, 0.0003],
    [0.0002, 0.0000, 0.0002],
    [0.0003, 0.0000, 0.0003],
];

fn constraint_projector() -> Verdict {
    let reference_ok = REFERENCE_PERTURBED_TUPLES.iter().filter(|t| is_valid_relative_price(&t[..])).count();
    let spec = ConstraintSpec::new(ConstraintKind::RelativePrice);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut idempotent, mut valid) = (0, 0);
    for i in 0..10_000 {
        let high: f64 = rng.random_range(0.0..0.01);
        let low: f64 = rng.random_range(-0.01..0.0);
        let close = match i % 3 {
            0 => high,
            1 => low,
            _ => rng.random_range(low..=high),
        };
        let original = [high, low, close];
        let candidate: Vec<f64> = original.iter().map(|v| v + rng.random_range(-0.01..0.01)).collect();
        let once = spec.project(&candidate, &original).unwrap();
        let twice = spec.project(&once, &original).unwrap();
        idempotent += usize::from(once == twice);
        valid += usize::from(is_valid_relative_price(&once));
    }
    verdict(
        reference_ok == REFERENCE_PERTURBED_TUPLES.len() && idempotent == 10_000 && valid == 10_000,
        format!(
            "{reference_ok}/{} reference tuples valid; projector idempotent on {idempotent}/10000 and valid on {valid}/10000",
            REFERENCE_PERTURBED_TUPLES.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. TD target oracle

fn linear(inputs: usize, weights: Vec<f64>, biases: Vec<f64>) -> QNetwork {
    QNetwork::from_layers(vec![DenseLayer {
        inputs,
        outputs: biases.len(),
        weights,
        biases,
    }])
    .unwrap()
}

fn td_oracle() -> Verdict {
    let target = TargetNetwork::new(&linear(2, vec![0.0; 6], vec![2.0, 0.0, 1.0]));
    let t = Transition {
        state: vec![0.3, -0.1],
        action: 1,
        reward: 1.0,
        next_state: vec![0.5, 0.2],
        terminal: false,
    };
    let terminal = Transition {
        terminal: true,
        action: 2,
        reward: -0.5,
        ..t.clone()
    };
    let y = td_target(&target, &t, 0.99).unwrap();
    let y_terminal = td_target(&target, &terminal, 0.99).unwrap();

    let online = linear(2, vec![0.0; 6], vec![0.5, 1.5, -0.25]);
    let loss = td_loss(&online, &target, &[t.clone(), terminal.clone()], 0.99).unwrap().loss;
    let hand = ((1.5 - 2.98_f64).powi(2) + (-0.25 - -0.5_f64).powi(2)) / 2.0;
    let oracle_ok = (y - 2.98).abs() <= 1e-12 && (y_terminal + 0.5).abs() <= 1e-12 && (loss - hand).abs() <= 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = QNetwork::new(&[4, 8, 3], 5).unwrap();
    let target = TargetNetwork::new(&QNetwork::new(&[4, 8, 3], 6).unwrap());
    let batch: Vec<Transition> = (0..16)
        .map(|_| Transition {
            state: random_vec(&mut rng, 4),
            action: rng.random_range(0..3),
            reward: rng.random_range(-1.0..1.0),
            next_state: random_vec(&mut rng, 4),
            terminal: rng.random_bool(0.1),
        })
        .collect();
    let mut losses = Vec::with_capacity(101);
    for _ in 0..100 {
        let g = td_loss(&net, &target, &batch, 0.99).unwrap();
        losses.push(g.loss);
        net.sgd_step(&g, 0.01).unwrap();
    }
    losses.push(td_loss(&net, &target, &batch, 0.99).unwrap().loss);
    let worst_rise = losses[5..].windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    verdict(
        oracle_ok && worst_rise <= 1e-9,
        format!(
            "y = {y:.15} (expected 2.98), terminal y = {y_terminal}, batch loss err {:.1e} (tol 1e-12); \
             100 SGD steps: loss {:.6} -> {:.6}, largest rise after step 5 {worst_rise:.2e} (tol 1e-9)",
            (loss - hand).abs(),
            losses[0],
            losses[100]
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. C&W minimality

const GRID_RES: f64 = 1e-4;
const GRID_MIN_DIST: f64 = 0.005;
const GRID_MAX_DIST: f64 = 0.05;

fn two_action(w: &[f64], b: &[f64], x: &[f64]) -> usize {
    let d = x.len();
    let q0 = b[0] + (0..d).map(|i| w[i] * x[i]).sum::<f64>();
    let q1 = b[1] + (0..d).map(|i| w[d + i] * x[i]).sum::<f64>();
    usize::from(q1 > q0)
}

/// Smallest L2 norm of an action-flipping perturbation on a grid of spacing `GRID_RES`,
/// scanned in growing Chebyshev rings until no farther ring can beat the best hit.
fn grid_minimum(w: &[f64], b: &[f64], x: &[f64]) -> Option<f64> {
    let base = two_action(w, b, x);
    let max_ring = (GRID_MAX_DIST / GRID_RES).ceil() as i64;
    let flips = |offsets: &[i64]| -> Option<f64> {
        let shifted: Vec<f64> = x.iter().zip(offsets).map(|(v, &o)| v + o as f64 * GRID_RES).collect();
        (two_action(w, b, &shifted) != base)
            .then(|| offsets.iter().map(|&o| (o as f64 * GRID_RES).powi(2)).sum::<f64>().sqrt())
    };
    let mut best = f64::INFINITY;
    for k in 1..=max_ring {
        if k as f64 * GRID_RES > best {
            break;
        }
        let mut ring: Vec<[i64; 2]> = Vec::new();
        if x.len() == 1 {
            ring.extend([[k, 0], [-k, 0]]);
        } else {
            for i in -k..=k {
                ring.extend([[i, k], [i, -k]]);
                if i.abs() != k {
                    ring.extend([[k, i], [-k, i]]);
                }
            }
        }
        for offsets in &ring {
            if let Some(norm) = flips(&offsets[..x.len()]) {
                best = best.min(norm);
            }
        }
    }
    best.is_finite().then_some(best)
}

fn cw_minimality() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let constraints = ConstraintSpec::new(ConstraintKind::Unconstrained).with_box(-2.0, 2.0);
    let params = CwParams {
        variant: CwVariant::Box,
        max_iters: 20_000,
        learning_rate: 2e-6,
        c: 10.0,
        epsilon: 1.0,
    };
    let (mut passed, mut resampled, mut worst) = (0, 0, 0.0_f64);
    for case in 0..20 {
        let d = 1 + case % 2;
        let (w, b, x, grid) = loop {
            let w = random_vec(&mut rng, 2 * d);
            let b: Vec<f64> = (0..2).map(|_| rng.random_range(-0.5..0.5)).collect();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
            match grid_minimum(&w, &b, &x) {
                Some(g) if g >= GRID_MIN_DIST => break (w, b, x, g),
                _ => resampled += 1,
            }
        };
        let net = linear(d, w, b);
        let ctx = AttackContext {
            net: &net,
            state: &x,
            coords: 0..d,
            constraints: &constraints,
            action_types: None,
        };
        let r = cw_l2_box(&ctx, Goal::NonTargeted, &params).unwrap();
        let ratio = r.l2 / grid;
        if r.outcome == Outcome::Success {
            worst = worst.max(ratio);
        } else {
            worst = f64::INFINITY;
        }
        passed += usize::from(r.outcome == Outcome::Success && ratio <= 1.1);
    }
    let elapsed = start.elapsed();
    verdict(
        passed == 20 && elapsed < Duration::from_secs(30),
        format!(
            "{passed}/20 nets flipped within 1.1x the grid minimum (resolution {GRID_RES:e}), worst ratio {worst:.4}, \
             {resampled} draws resampled for a grid minimum outside [{GRID_MIN_DIST}, {GRID_MAX_DIST}], {:.2}s (limit 30s)",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 6 and 7. Attack efficacy on trained agents

fn market(bars: usize, drift: f64, volatility: f64, momentum: f64, seed: u64) -> Vec<Bar> {
    generate_bars(&SynthParams {
        bars,
        drift,
        volatility,
        momentum,
        seed,
        ..SynthParams::default()
    })
    .unwrap()
}

fn trained(config: &EnvConfig, trainer: &TrainerConfig, train_bars: &[Bar], eval_bars: &[Bar]) -> (QNetwork, Env) {
    let mut env = config.build(train_bars).unwrap();
    let net = train(&mut env, trainer, 7).unwrap().network;
    (net, config.build(eval_bars).unwrap())
}

/// One-sided paired t-test of `mean(diffs) > 0`; returns `(mean, t, p)`.
fn paired_t(diffs: &[f64]) -> (f64, f64, f64) {
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = mean / (var.sqrt() / n.sqrt());
    let p = 1.0 - StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t);
    (mean, t, p)
}

fn attacked(net: &QNetwork, env: &Env, config: &AttackConfig, seed: u64) -> RunRecord {
    run_attacked(net, &mut env.clone(), config, RunSpec::new(seed, 1)).unwrap().0
}

fn attack_efficacy() -> Verdict {
    let start = Instant::now();
    let (net, env) = trained(
        &EnvConfig::Basic(BasicEnvConfig::default()),
        &TrainerConfig::basic(),
        &market(60_000, 1e-4, 0.006, 0.6, 1),
        &market(20_000, 1e-4, 0.006, 0.6, 2),
    );
    let fgsm = AttackConfig {
        chance: 1.0,
        ..AttackConfig::basic_fgsm(AttackMode::NonTargeted)
    };
    let (mut control, mut delay, mut perturbed) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..20 {
        control.push(run_control(&net, &mut env.clone(), RunSpec::new(seed, 1)).unwrap().total_reward());
        delay.push(attacked(&net, &env, &AttackConfig::delay(), seed).total_reward());
        perturbed.push(attacked(&net, &env, &fgsm, seed).total_reward());
    }
    let diffs = |a: &[f64]| -> Vec<f64> { control.iter().zip(a).map(|(c, x)| c - x).collect() };
    let (dm, dt, dp) = paired_t(&diffs(&delay));
    let (fm, ft, fp) = paired_t(&diffs(&perturbed));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let elapsed = start.elapsed();
    verdict(
        dp < 0.05 && fp < 0.05 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "mean total reward control {:.3}, delay {:.3} (diff {dm:.3}, t {dt:.2}, p {dp:.2e}), \
             FGSM {:.3} (diff {fm:.3}, t {ft:.2}, p {fp:.2e}); one-sided paired t, alpha 0.05, 20 seeds, {:.0}s (limit 900s)",
            mean(&control),
            mean(&delay),
            mean(&perturbed),
            elapsed.as_secs_f64()
        ),
    )
}

fn networth_impact() -> Verdict {
    let start = Instant::now();
    let (net, env) = trained(
        &EnvConfig::Managed(ManagedEnvConfig::default()),
        &TrainerConfig::managed(),
        &market(20_000, 1e-4, 0.01, 0.2, 1),
        &market(10_000, 1e-4, 0.01, 0.2, 2),
    );
    let config = AttackConfig {
        chance: 1.0,
        ..AttackConfig::managed_fgsm(AttackMode::Targeted)
    };
    let (mut at_most, mut below, mut attempts, mut qualifying) = (0, 0, 0, 0);
    for seed in 0..20 {
        let control = run_control(&net, &mut env.clone(), RunSpec::new(seed, 1)).unwrap();
        let (record, ledger) = run_attacked(&net, &mut env.clone(), &config, RunSpec::new(seed, 1)).unwrap();
        let (c, a) = (control.final_networth().unwrap(), record.final_networth().unwrap());
        at_most += usize::from(a <= c);
        below += usize::from(a < c);
        attempts += ledger.counters.attempts;
        qualifying += ledger.counters.successes + ledger.counters.partial;
    }
    verdict(
        at_most >= 15,
        format!(
            "attacked final net worth <= control in {at_most}/20 seeds (need 15), strictly below in {below}; \
             {qualifying} of {attempts} targeted attempts qualified; {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 8 and 9. Ledger accounting and determinism through the command layer

fn write_experiment(dir: &Path, env: &str, attacks: &[&str]) -> PathBuf {
    let attacks: Vec<serde_json::Value> = attacks.iter().map(|p| serde_json::json!({ "preset": p })).collect();
    let config = serde_json::json!({
        "seed": 3,
        "data": {
            "train": { "synth": { "bars": 1500, "volatility": 0.01, "momentum": 0.3, "seed": 1 } },
            "eval": { "synth": { "bars": 1000, "volatility": 0.01, "momentum": 0.3, "seed": 2 } }
        },
        "env": { "preset": env },
        "trainer": { "preset": env, "total_timesteps": 2000 },
        "attack": attacks,
        "sweep": { "chances": [0.1, 0.5, 1.0], "seeds": [1, 2], "episodes": 2 }
    });
    let path = dir.join(format!("{env}.json"));
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

/// Outcome column tallies of a ledger CSV and its number of data rows.
fn ledger_tally(path: &Path) -> (BTreeMap<String, usize>, usize) {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let column = reader.headers().unwrap().iter().position(|h| h == "outcome").unwrap();
    let mut tally = BTreeMap::new();
    let mut rows = 0;
    for rec in reader.records() {
        *tally.entry(rec.unwrap()[column].to_string()).or_insert(0) += 1;
        rows += 1;
    }
    (tally, rows)
}

fn csv_rows(path: &Path) -> usize {
    csv::Reader::from_path(path).unwrap().records().count()
}

fn check_run(dir: &Path) -> Result<(), String> {
    let summary: Summary = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    let (tally, rows) = ledger_tally(&dir.join("ledger.csv"));
    let n = |k: &str| tally.get(k).copied().unwrap_or(0);
    let attempts = n("success") + n("partial") + n("non_target") + n("failure");
    let steps = csv_rows(&dir.join("record.csv"));
    let expected = [
        ("eligible", summary.eligible, rows),
        ("attempts", summary.attempts, attempts),
        ("successes", summary.successes, n("success")),
        ("partial", summary.partial, n("partial")),
        ("non_target", summary.non_target, n("non_target")),
        ("failures", summary.failures, n("failure")),
        ("ncn", summary.ncn, n("ncn")),
        ("skipped", summary.skipped, n("skipped")),
        ("delayed", summary.delayed, n("delayed")),
        ("timesteps", summary.eligible, steps),
    ];
    for (what, summary_value, csv_value) in expected {
        if summary_value != csv_value {
            return Err(format!("{}: {what} summary {summary_value} vs csv {csv_value}", dir.display()));
        }
    }
    if summary.attempts + summary.ncn + summary.skipped + summary.delayed != summary.eligible {
        return Err(format!("{}: counters do not add up to eligible", dir.display()));
    }
    Ok(())
}

fn attack_into(config: &Path, checkpoint: &Path, out: &Path) {
    let opts = AttackOptions {
        checkpoint: Some(checkpoint.to_path_buf()),
        ..AttackOptions::default()
    };
    cmd_attack(config, out, &opts).unwrap();
    cmd_report(out).unwrap();
}

fn ledger_accounting_and_determinism(dir: &Path) -> (Verdict, Verdict) {
    let experiments = [
        ("basic", vec!["delay", "basic-fgsm", "basic-fgsm-targeted", "basic-cw", "basic-cw-targeted"]),
        ("managed", vec!["delay", "managed-fgsm", "managed-fgsm-targeted", "managed-cw", "managed-cw-targeted"]),
    ];
    let (mut runs, mut steps, mut errors) = (0, 0, Vec::new());
    let (mut compared, mut mismatched) = (0, Vec::new());
    for (env, attacks) in experiments {
        let config = write_experiment(dir, env, &attacks);
        let train_dir = dir.join(env).join("train");
        cmd_train(&config, &train_dir, None).unwrap();
        let checkpoint = train_dir.join("checkpoint.json");
        let first = dir.join(env).join("first");
        let second = dir.join(env).join("second");
        attack_into(&config, &checkpoint, &first);
        attack_into(&config, &checkpoint, &second);

        for summary in files_under(&first.join("runs")).into_iter().filter(|p| p.ends_with("summary.json")) {
            let run = summary.parent().unwrap();
            runs += 1;
            steps += csv_rows(&run.join("record.csv"));
            if let Err(e) = check_run(run) {
                errors.push(e);
            }
        }

        let a = files_under(&first);
        let b = files_under(&second);
        let rel = |root: &Path, v: &[PathBuf]| -> Vec<PathBuf> {
            v.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect()
        };
        if rel(&first, &a) != rel(&second, &b) {
            mismatched.push(format!("{env}: file sets differ"));
            continue;
        }
        for (pa, pb) in a.iter().zip(&b) {
            if pa.ends_with("manifest.jsonl") {
                continue;
            }
            compared += 1;
            if sha256_hex(&fs::read(pa).unwrap()) != sha256_hex(&fs::read(pb).unwrap()) {
                mismatched.push(pa.strip_prefix(&first).unwrap().display().to_string());
            }
        }
    }
    let accounting = verdict(
        errors.is_empty() && runs > 0,
        if errors.is_empty() {
            format!("{runs} attacked runs over both envs and all nine presets, {steps} timesteps, every counter equal to its CSV tally")
        } else {
            errors.join("; ")
        },
    );
    let determinism = verdict(
        mismatched.is_empty() && compared > 0,
        format!(
            "{compared} ledger, record, summary and report files compared byte for byte across two executions, {} differ{}",
            mismatched.len(),
            if mismatched.is_empty() { String::new() } else { format!(": {}", mismatched.join(", ")) }
        ),
    );
    (accounting, determinism)
}

// ---------------------------------------------------------------------------
// 10. Indicator oracles

fn brute_ema(xs: &[f64], period: usize) -> Vec<f64> {
    let alpha = 2.0 / (period as f64 + 1.0);
    let mut out = vec![xs[0]];
    for i in 1..xs.len() {
        out.push(alpha * xs[i] + (1.0 - alpha) * out[i - 1]);
    }
    out
}

/// RSI straight from its definition: averages of up and down moves, either Wilder-smoothed
/// after a simple first window or recomputed over each trailing window.
fn brute_rsi(closes: &[f64], period: usize, wilder: bool) -> Vec<Option<f64>> {
    let moves: Vec<f64> = (1..closes.len()).map(|i| closes[i] - closes[i - 1]).collect();
    let up = |m: &[f64]| m.iter().map(|d| d.max(0.0)).sum::<f64>() / period as f64;
    let down = |m: &[f64]| m.iter().map(|d| (-d).max(0.0)).sum::<f64>() / period as f64;
    let rsi = |g: f64, l: f64| {
        if l == 0.0 {
            100.0
        } else if g == 0.0 {
            0.0
        } else {
            100.0 * g / (g + l)
        }
    };
    let mut out = vec![None; closes.len()];
    let (mut g, mut l) = (0.0, 0.0);
    for t in period..closes.len() {
        if t == period || !wilder {
            g = up(&moves[t - period..t]);
            l = down(&moves[t - period..t]);
        } else {
            let m = moves[t - 1];
            g = (g * (period as f64 - 1.0) + m.max(0.0)) / period as f64;
            l = (l * (period as f64 - 1.0) + (-m).max(0.0)) / period as f64;
        }
        out[t] = Some(rsi(g, l));
    }
    out
}

fn indicator_oracles() -> Verdict {
    let period = 20;
    let params = MacdParams::default();
    let constant = vec![42.5; 300];
    let up: Vec<f64> = (0..300).map(|i| 100.0 + 0.5 * i as f64).collect();
    let down: Vec<f64> = (0..300).map(|i| 300.0 - 0.5 * i as f64).collect();
    let alternating: Vec<f64> = (0..300).map(|i| if i % 2 == 0 { 100.0 } else { 101.0 }).collect();

    let m = macd(&constant, params).unwrap();
    let brute_m: Vec<f64> = brute_ema(&constant, params.fast)
        .iter()
        .zip(brute_ema(&constant, params.slow))
        .map(|(f, s)| f - s)
        .collect();
    let macd_ok = m.iter().all(|&v| v == 0.0) && m == brute_m;

    let mut failures = Vec::new();
    for (name, series, expect) in [("up", &up, 100.0), ("down", &down, 0.0), ("alternating", &alternating, 50.0)] {
        for (smoothing, wilder) in [(RsiSmoothing::Wilder, true), (RsiSmoothing::Simple, false)] {
            let got = rsi_with(series, period, smoothing).unwrap();
            let brute = brute_rsi(series, period, wilder);
            let warmup_ok = got[..period].iter().all(Option::is_none);
            let pinned = if wilder && name == "alternating" { 1 } else { series.len() - period };
            let values_ok = got[period..].iter().zip(&brute[period..]).enumerate().all(|(i, (g, b))| {
                let (g, b) = (g.unwrap(), b.unwrap());
                (i >= pinned || (g - expect).abs() <= 1e-9) && (g - b).abs() <= 1e-9
            });
            if !(warmup_ok && values_ok) {
                failures.push(format!("{name}/{smoothing:?}"));
            }
        }
    }
    verdict(
        macd_ok && failures.is_empty(),
        format!(
            "macd(constant) identically 0 and equal to a brute-force EMA difference: {macd_ok}; \
             rsi up = 100, down = 0 for Wilder and simple smoothing, alternating = 50 for simple smoothing and \
             the first Wilder value (tol 1e-9), every value matching a brute-force recurrence after a \
             {period}-step warmup{}",
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}

fn guarded<T>(f: impl FnOnce() -> T, on_panic: impl FnOnce(String) -> T) -> T {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        on_panic(format!("panicked: {msg}"))
    })
}

struct Report {
    failed: usize,
}

impl Report {
    fn print(&mut self, id: usize, name: &str, v: Verdict) {
        self.failed += usize::from(!v.pass);
        println!("[{}] {id:>2}. {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }

    fn run(&mut self, id: usize, name: &str, f: fn() -> Verdict) {
        let v = guarded(f, |msg| verdict(false, msg));
        self.print(id, name, v);
    }
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let mut report = Report { failed: 0 };
    report.run(1, "gradient correctness", gradient_correctness);
    report.run(2, "action-space count", action_space_count);
    report.run(3, "constraint validator and projector", constraint_projector);
    report.run(4, "TD target oracle", td_oracle);
    report.run(5, "C&W minimality", cw_minimality);
    report.run(6, "attack efficacy on the basic env", attack_efficacy);
    report.run(7, "net-worth impact on the managed env", networth_impact);
    let (accounting, determinism) = guarded(
        || ledger_accounting_and_determinism(dir.path()),
        |msg| (verdict(false, msg.clone()), verdict(false, msg)),
    );
    report.print(8, "ledger accounting", accounting);
    report.print(9, "determinism", determinism);
    report.run(10, "indicator oracles", indicator_oracles);
    println!("{} of 10 criteria passed", 10 - report.failed);
    if report.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
