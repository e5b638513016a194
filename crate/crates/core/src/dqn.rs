//! Experience replay, epsilon-greedy action selection, the DQN training loop and greedy
//! evaluation.

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::TradingEnv;
use crate::error::{Error, Result};
use crate::qnet::{td_loss, Adam, QNetwork, TargetNetwork};

/// Offset mixed into the training seed so replay sampling draws from its own stream.
const REPLAY_STREAM: u64 = 0x5_EED0_F12E_91A7;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Bounded FIFO store of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends `t`, evicting the oldest transition when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Draws `batch` transitions uniformly with replacement.
    pub fn sample(&mut self, batch: usize) -> Result<Vec<Transition>> {
        if self.items.is_empty() {
            return Err(Error::InvalidArgument("cannot sample from an empty buffer".into()));
        }
        Ok((0..batch)
            .map(|_| self.items[self.rng.random_range(0..self.items.len())].clone())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExplorationSchedule {
    /// Anneals linearly from `initial` to `final_eps` over `fraction` of total timesteps.
    Linear {
        initial: f64,
        final_eps: f64,
        fraction: f64,
    },
    /// `final + (initial - final) * exp(-step / interval)`.
    Exponential {
        initial: f64,
        final_eps: f64,
        interval: f64,
    },
}

impl ExplorationSchedule {
    pub fn epsilon(&self, step: usize, total_steps: usize) -> f64 {
        match *self {
            ExplorationSchedule::Linear {
                initial,
                final_eps,
                fraction,
            } => {
                let horizon = fraction * total_steps as f64;
                if horizon <= 0.0 {
                    return final_eps;
                }
                let p = (step as f64 / horizon).min(1.0);
                initial + p * (final_eps - initial)
            }
            ExplorationSchedule::Exponential {
                initial,
                final_eps,
                interval,
            } => final_eps + (initial - final_eps) * (-(step as f64) / interval).exp(),
        }
    }

    fn bounds(&self) -> (f64, f64) {
        match *self {
            ExplorationSchedule::Linear { initial, final_eps, .. }
            | ExplorationSchedule::Exponential { initial, final_eps, .. } => (initial, final_eps),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// `theta <- theta - lr * grad`.
    #[default]
    Sgd,
    /// Per-parameter step sizes from running gradient moments.
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub total_timesteps: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub buffer_capacity: usize,
    pub learning_starts: usize,
    pub target_sync: usize,
    pub batch_size: usize,
    /// Environment steps between gradient updates.
    pub train_freq: usize,
    pub exploration: ExplorationSchedule,
    /// When set, actions come from a copy of the network with Gaussian noise of this
    /// standard deviation on every parameter, resampled each episode, instead of epsilon-greedy.
    pub param_noise: Option<f64>,
    pub clip_rewards: bool,
    pub hidden: Vec<usize>,
    pub optimizer: Optimizer,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self::basic()
    }
}

impl TrainerConfig {
    /// Hyperparameters for the basic stock environment.
    pub fn basic() -> Self {
        Self {
            total_timesteps: 100_000,
            gamma: 0.99,
            learning_rate: 1e-4,
            buffer_capacity: 100_000,
            learning_starts: 1000,
            target_sync: 1000,
            batch_size: 32,
            train_freq: 1,
            exploration: ExplorationSchedule::Linear {
                initial: 1.0,
                final_eps: 0.02,
                fraction: 0.1,
            },
            param_noise: None,
            clip_rewards: false,
            hidden: vec![64, 64],
            optimizer: Optimizer::adam(),
        }
    }

    /// Hyperparameters for the managed-risk environment: 100 episodes of 250 steps.
    pub fn managed() -> Self {
        Self {
            total_timesteps: 100 * 250,
            gamma: 0.9999,
            learning_rate: 1e-5,
            buffer_capacity: 1000,
            learning_starts: 1000,
            target_sync: 1000,
            batch_size: 32,
            train_freq: 1,
            exploration: ExplorationSchedule::Exponential {
                initial: 0.9,
                final_eps: 0.05,
                interval: 200.0,
            },
            param_noise: None,
            clip_rewards: true,
            hidden: vec![64, 64],
            optimizer: Optimizer::adam(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "basic" => Some(Self::basic()),
            "managed" => Some(Self::managed()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.buffer_capacity == 0 || self.batch_size == 0 || self.target_sync == 0 || self.train_freq == 0 {
            return bad("buffer capacity, batch size, target sync and train freq must be positive");
        }
        let (initial, final_eps) = self.exploration.bounds();
        if !(0.0 <= final_eps && final_eps <= initial && initial <= 1.0) {
            return bad("exploration requires 0 <= final epsilon <= initial epsilon <= 1");
        }
        match self.exploration {
            ExplorationSchedule::Linear { fraction, .. } if !(0.0..=1.0).contains(&fraction) => {
                return bad("exploration fraction must lie in [0, 1]")
            }
            ExplorationSchedule::Exponential { interval, .. } if !(interval > 0.0) => {
                return bad("exploration decay interval must be positive")
            }
            _ => {}
        }
        if let Some(sigma) = self.param_noise {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return bad("parameter noise sigma must be non-negative");
            }
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        Ok(())
    }

    /// Reward as written to the replay buffer.
    pub fn stored_reward(&self, reward: f64) -> f64 {
        if self.clip_rewards {
            reward.clamp(-1.0, 1.0)
        } else {
            reward
        }
    }

    pub fn layer_sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(&self.hidden);
        sizes.push(output);
        sizes
    }
}

/// Epsilon-greedy choice: a uniform random action with probability `epsilon`, otherwise
/// the greedy action (ties to the lowest index).
pub fn select_action<R: Rng + ?Sized>(
    net: &QNetwork,
    state: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..net.output_dim()));
    }
    net.greedy_action(state)
}

/// One environment step of the training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub episode: usize,
    pub step: usize,
    pub action: usize,
    pub reward: f64,
    pub cum_reward: f64,
    pub epsilon: f64,
    /// TD loss of the update performed at this step, if any.
    pub loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: QNetwork,
    pub trace: Vec<TraceRow>,
    /// Total (unclipped) reward of each completed episode.
    pub episode_rewards: Vec<f64>,
}

pub fn write_trace_csv<W: Write>(writer: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["episode", "step", "action", "reward", "cum_reward", "epsilon", "loss"])?;
    for r in rows {
        w.write_record([
            r.episode.to_string(),
            r.step.to_string(),
            r.action.to_string(),
            r.reward.to_string(),
            r.cum_reward.to_string(),
            r.epsilon.to_string(),
            r.loss.map(|l| l.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

/// Trains a fresh network initialised from `seed` on `env`.
pub fn train(env: &mut dyn TradingEnv, config: &TrainerConfig, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    let sizes = config.layer_sizes(env.observation_dim(), env.action_count());
    let net = QNetwork::new(&sizes, seed)?;
    train_from(env, config, net, seed)
}

/// Runs the DQN loop starting from `net`.
pub fn train_from(
    env: &mut dyn TradingEnv,
    config: &TrainerConfig,
    mut net: QNetwork,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if net.input_dim() != env.observation_dim() || net.output_dim() != env.action_count() {
        return Err(Error::InvalidConfig(format!(
            "network {:?} does not fit env with {} inputs and {} actions",
            net.layer_sizes(),
            env.observation_dim(),
            env.action_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity, seed ^ REPLAY_STREAM)?;
    let mut target = TargetNetwork::new(&net);
    let mut trace = Vec::with_capacity(config.total_timesteps);
    let mut episode_rewards = Vec::new();

    let mut state = env.reset(&mut rng)?.to_vector();
    let mut episode = 0;
    let mut episode_step = 0;
    let mut cum_reward = 0.0;
    let mut adam = match config.optimizer {
        Optimizer::Sgd => None,
        Optimizer::Adam { beta1, beta2, epsilon } => Some(Adam::new(&net, beta1, beta2, epsilon)?),
    };
    let mut actor = config.param_noise.map(|sigma| net.perturbed(sigma, &mut rng));

    for step in 0..config.total_timesteps {
        let epsilon = config.exploration.epsilon(step, config.total_timesteps);
        let action = match &actor {
            Some(noisy) => noisy.greedy_action(&state)?,
            None => select_action(&net, &state, epsilon, &mut rng)?,
        };
        let result = env.step(action)?;
        if !result.reward.is_finite() {
            return Err(Error::NonFinite(format!("reward at step {step}")));
        }
        let next_state = result.observation.to_vector();
        let stored = config.stored_reward(result.reward);
        buffer.push(Transition {
            state: std::mem::replace(&mut state, next_state.clone()),
            action,
            reward: stored,
            next_state,
            terminal: result.terminal,
        });
        cum_reward += result.reward;

        let mut loss = None;
        if step >= config.learning_starts && step % config.train_freq == 0 {
            let batch = buffer.sample(config.batch_size)?;
            let grads = td_loss(&net, &target, &batch, config.gamma).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
                other => other,
            })?;
            match adam.as_mut() {
                Some(adam) => adam.step(&mut net, &grads, config.learning_rate),
                None => net.sgd_step(&grads, config.learning_rate),
            }
            .map_err(|e| Error::NonFinite(format!("{e} at step {step}")))?;
            loss = Some(grads.loss);
        }
        if step >= config.learning_starts && step % config.target_sync == 0 {
            target.sync(&net)?;
        }

        trace.push(TraceRow {
            episode,
            step: episode_step,
            action,
            reward: result.reward,
            cum_reward,
            epsilon: if actor.is_some() { 0.0 } else { epsilon },
            loss,
        });
        episode_step += 1;

        if result.terminal {
            episode_rewards.push(cum_reward);
            episode += 1;
            episode_step = 0;
            cum_reward = 0.0;
            state = env.reset(&mut rng)?.to_vector();
            if let Some(sigma) = config.param_noise {
                actor = Some(net.perturbed(sigma, &mut rng));
            }
        }
    }
    Ok(TrainOutcome {
        network: net,
        trace,
        episode_rewards,
    })
}

/// One step of a greedy evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub episode: usize,
    pub step: usize,
    pub action: usize,
    pub reward: f64,
    pub cum_reward: f64,
    pub net_worth: Option<f64>,
}

/// Runs `episodes` greedy episodes with starts drawn from `seed`.
pub fn evaluate(net: &QNetwork, env: &mut dyn TradingEnv, episodes: usize, seed: u64) -> Result<Vec<EvalRow>> {
    evaluate_with(env, episodes, seed, |state| net.greedy_action(state))
}

/// Runs `episodes` episodes of an arbitrary policy with starts drawn from `seed`.
pub fn evaluate_with<F>(env: &mut dyn TradingEnv, episodes: usize, seed: u64, mut policy: F) -> Result<Vec<EvalRow>>
where
    F: FnMut(&[f64]) -> Result<usize>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for episode in 0..episodes {
        let mut state = env.reset(&mut rng)?.to_vector();
        let mut cum_reward = 0.0;
        for step in 0.. {
            let action = policy(&state)?;
            let result = env.step(action)?;
            cum_reward += result.reward;
            rows.push(EvalRow {
                episode,
                step,
                action,
                reward: result.reward,
                cum_reward,
                net_worth: result.info.net_worth,
            });
            if result.terminal {
                break;
            }
            state = result.observation.to_vector();
        }
    }
    Ok(rows)
}

/// Total reward of each episode in an evaluation trace.
pub fn episode_totals(rows: &[EvalRow]) -> Vec<f64> {
    let mut totals: Vec<f64> = Vec::new();
    for r in rows {
        if r.episode == totals.len() {
            totals.push(0.0);
        }
        totals[r.episode] = r.cum_reward;
    }
    totals
}
