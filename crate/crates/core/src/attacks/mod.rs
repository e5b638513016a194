//! Whitebox test-time attacks on the observation channel: a one-step delay, an FGSM
//! epsilon ladder and two C&W-L2 variants, all restricted to the most recent feature tuple
//! and followed by a domain-constraint projection.

mod constraints;
mod cw;
mod fgsm;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::envs::{ActionType, Observation};
use crate::error::{Error, Result};
use crate::qnet::QNetwork;

pub use constraints::{is_valid_relative_price, ConstraintKind, ConstraintSpec, CLOSE_MARGIN, RSI_BOUNDS};
pub use cw::{cw_l2_box, cw_scaled};
pub use fgsm::fgsm_attack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Delay,
    Fgsm,
    Cw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    NonTargeted,
    Targeted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CwVariant {
    /// Optimizes in a tanh-reparameterized `[0, 1]` box.
    Box,
    /// Optimizes `delta = eps * k * u` directly in feature units.
    Scaled,
}

/// What the attack is trying to achieve for a single observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Goal {
    NonTargeted,
    Targeted(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    PartialSuccess,
    NonTargetChange,
    Failure,
}

impl Outcome {
    /// Whether the harness keeps the perturbation.
    pub fn qualifies(self) -> bool {
        matches!(self, Outcome::Success | Outcome::PartialSuccess)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonLadder {
    pub start: f64,
    pub end: f64,
    pub iterations: usize,
}

impl EpsilonLadder {
    /// Geometric steps from `start` to `end`, both inclusive.
    pub fn values(&self) -> Vec<f64> {
        if self.iterations == 1 {
            return vec![self.start];
        }
        let ratio = self.end / self.start;
        let last = (self.iterations - 1) as f64;
        (0..self.iterations)
            .map(|i| match i {
                0 => self.start,
                i if i + 1 == self.iterations => self.end,
                i => self.start * ratio.powf(i as f64 / last),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CwParams {
    pub variant: CwVariant,
    pub max_iters: usize,
    pub learning_rate: f64,
    /// Weight of the margin term.
    pub c: f64,
    /// Overall perturbation scale for the scaled variant.
    pub epsilon: f64,
}

impl Default for CwParams {
    fn default() -> Self {
        Self {
            variant: CwVariant::Box,
            max_iters: 100,
            learning_rate: 0.5,
            c: 0.1,
            epsilon: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub mode: AttackMode,
    /// Probability of attempting an attack on an eligible timestep.
    pub chance: f64,
    pub ladder: EpsilonLadder,
    /// Per-dimension scale of the perturbation on the attacked tuple.
    pub k: Vec<f64>,
    pub cw: CwParams,
    pub constraints: ConstraintSpec,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::basic_fgsm(AttackMode::NonTargeted)
    }
}

pub const PRESET_NAMES: [&str; 9] = [
    "delay",
    "basic-fgsm",
    "basic-fgsm-targeted",
    "basic-cw",
    "basic-cw-targeted",
    "managed-fgsm",
    "managed-fgsm-targeted",
    "managed-cw",
    "managed-cw-targeted",
];

impl AttackConfig {
    pub fn delay() -> Self {
        Self {
            method: AttackMethod::Delay,
            ..Self::basic_fgsm(AttackMode::NonTargeted)
        }
    }

    /// FGSM ladder 1e-4 to 1e-3 over five steps on relative prices.
    pub fn basic_fgsm(mode: AttackMode) -> Self {
        Self {
            method: AttackMethod::Fgsm,
            mode,
            chance: 1.0,
            ladder: EpsilonLadder {
                start: 1e-4,
                end: 1e-3,
                iterations: 5,
            },
            k: vec![1.0, 1.0, 1.0],
            cw: CwParams::default(),
            constraints: ConstraintSpec::new(ConstraintKind::RelativePrice),
            seed: 0,
        }
    }

    /// Box C&W with 100 iterations, learning rate 0.5 and c = 0.1 on relative prices.
    pub fn basic_cw(mode: AttackMode) -> Self {
        Self {
            method: AttackMethod::Cw,
            ..Self::basic_fgsm(mode)
        }
    }

    /// FGSM ladder 0.1 to 3.0 over five steps with k = (0.01, 0.01, 0.1) on indicators.
    pub fn managed_fgsm(mode: AttackMode) -> Self {
        Self {
            method: AttackMethod::Fgsm,
            mode,
            chance: 1.0,
            ladder: EpsilonLadder {
                start: 0.1,
                end: 3.0,
                iterations: 5,
            },
            k: vec![0.01, 0.01, 0.1],
            cw: CwParams::default(),
            constraints: ConstraintSpec::new(ConstraintKind::Indicator),
            seed: 0,
        }
    }

    /// Scaled C&W with eps = 1 and k = (0.01, 1, 1) on indicators.
    pub fn managed_cw(mode: AttackMode) -> Self {
        Self {
            method: AttackMethod::Cw,
            k: vec![0.01, 1.0, 1.0],
            cw: CwParams {
                variant: CwVariant::Scaled,
                epsilon: 1.0,
                ..CwParams::default()
            },
            ..Self::managed_fgsm(mode)
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        use AttackMode::*;
        Some(match name {
            "delay" => Self::delay(),
            "basic-fgsm" => Self::basic_fgsm(NonTargeted),
            "basic-fgsm-targeted" => Self::basic_fgsm(Targeted),
            "basic-cw" => Self::basic_cw(NonTargeted),
            "basic-cw-targeted" => Self::basic_cw(Targeted),
            "managed-fgsm" => Self::managed_fgsm(NonTargeted),
            "managed-fgsm-targeted" => Self::managed_fgsm(Targeted),
            "managed-cw" => Self::managed_cw(NonTargeted),
            "managed-cw-targeted" => Self::managed_cw(Targeted),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.chance) {
            return bad(format!("chance {} outside [0, 1]", self.chance));
        }
        if self.method == AttackMethod::Delay {
            return Ok(());
        }
        let l = &self.ladder;
        if !(l.start > 0.0 && l.start <= l.end && l.end.is_finite()) || l.iterations == 0 {
            return bad("epsilon ladder needs 0 < start <= end and at least one iteration".into());
        }
        if self.k.iter().any(|k| !(*k > 0.0 && *k <= 1.0)) {
            return bad("k scalars must lie in (0, 1]".into());
        }
        let cw = &self.cw;
        if cw.max_iters == 0 || !(cw.learning_rate > 0.0) || !(cw.c >= 0.0) || !(cw.epsilon > 0.0) {
            return bad("C&W needs max_iters >= 1, lr > 0, c >= 0 and epsilon > 0".into());
        }
        let (lo, hi) = self.constraints.box_bounds;
        if !(lo < hi) {
            return bad("constraint box must have lower < upper".into());
        }
        Ok(())
    }

    /// Runs the configured perturbation attack (FGSM or C&W) on one observation.
    pub fn perturb(&self, ctx: &AttackContext, goal: Goal) -> Result<PerturbationResult> {
        match self.method {
            AttackMethod::Fgsm => fgsm_attack(ctx, goal, &self.ladder, &self.k),
            AttackMethod::Cw => match self.cw.variant {
                CwVariant::Box => cw_l2_box(ctx, goal, &self.cw),
                CwVariant::Scaled => cw_scaled(ctx, goal, &self.k, &self.cw),
            },
            AttackMethod::Delay => Err(Error::InvalidArgument(
                "the delay attack substitutes observations instead of perturbing them".into(),
            )),
        }
    }
}

/// The network under attack and the observation being perturbed.
#[derive(Debug, Clone)]
pub struct AttackContext<'a> {
    pub net: &'a QNetwork,
    /// Full network input.
    pub state: &'a [f64],
    /// Coordinates of `state` the attack may change.
    pub coords: Range<usize>,
    pub constraints: &'a ConstraintSpec,
    pub action_types: Option<&'a [ActionType]>,
}

impl<'a> AttackContext<'a> {
    pub(crate) fn check(&self) -> Result<()> {
        if self.state.len() != self.net.input_dim() {
            return Err(Error::dim(self.net.input_dim(), self.state.len()));
        }
        if self.coords.is_empty() || self.coords.end > self.state.len() {
            return Err(Error::InvalidArgument(format!(
                "attacked coordinates {:?} outside a state of length {}",
                self.coords,
                self.state.len()
            )));
        }
        if let Some(types) = self.action_types {
            if types.len() != self.net.output_dim() {
                return Err(Error::dim(self.net.output_dim(), types.len()));
            }
        }
        Ok(())
    }

    pub(crate) fn original(&self) -> &'a [f64] {
        &self.state[self.coords.clone()]
    }

    /// `state` with the attacked coordinates replaced by `tuple`.
    pub(crate) fn splice(&self, tuple: &[f64]) -> Vec<f64> {
        let mut s = self.state.to_vec();
        s[self.coords.clone()].copy_from_slice(tuple);
        s
    }

    pub(crate) fn classify(&self, original: usize, induced: usize, goal: Goal) -> Result<Outcome> {
        classify_outcome(original, induced, goal, self.action_types, self.net.output_dim())
    }

    /// Projects `candidate`, evaluates the induced action and classifies it.
    pub(crate) fn assess(&self, candidate: &[f64], original_action: usize, goal: Goal) -> Result<Candidate> {
        let tuple = self.constraints.project(candidate, self.original())?;
        let induced = self.net.greedy_action(&self.splice(&tuple))?;
        let outcome = self.classify(original_action, induced, goal)?;
        let l2 = l2_distance(&tuple, self.original());
        Ok(Candidate {
            tuple,
            induced,
            outcome,
            l2,
        })
    }
}

pub(crate) struct Candidate {
    pub tuple: Vec<f64>,
    pub induced: usize,
    pub outcome: Outcome,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub original: Vec<f64>,
    pub perturbed: Vec<f64>,
    pub outcome: Outcome,
    pub original_action: usize,
    pub induced_action: usize,
    pub target: Option<usize>,
    pub iterations: usize,
    /// Epsilon of the emitted FGSM rung or the scale of the scaled C&W variant.
    pub epsilon: Option<f64>,
    /// L2 distance between `perturbed` and `original`.
    pub l2: f64,
}

impl PerturbationResult {
    pub(crate) fn from_candidate(
        ctx: &AttackContext,
        c: Candidate,
        original_action: usize,
        goal: Goal,
        iterations: usize,
        epsilon: Option<f64>,
    ) -> Self {
        Self {
            original: ctx.original().to_vec(),
            perturbed: c.tuple,
            outcome: c.outcome,
            original_action,
            induced_action: c.induced,
            target: target_of(goal),
            iterations,
            epsilon,
            l2: c.l2,
        }
    }

    /// The observation already shows the target action: nothing to perturb.
    pub(crate) fn already_on_target(ctx: &AttackContext, action: usize) -> Self {
        Self {
            original: ctx.original().to_vec(),
            perturbed: ctx.original().to_vec(),
            outcome: Outcome::Success,
            original_action: action,
            induced_action: action,
            target: Some(action),
            iterations: 0,
            epsilon: None,
            l2: 0.0,
        }
    }

    /// Optimization left finite arithmetic; the observation is left untouched.
    pub(crate) fn aborted(ctx: &AttackContext, action: usize, goal: Goal, iterations: usize) -> Self {
        Self {
            original: ctx.original().to_vec(),
            perturbed: ctx.original().to_vec(),
            outcome: Outcome::Failure,
            original_action: action,
            induced_action: action,
            target: target_of(goal),
            iterations,
            epsilon: None,
            l2: 0.0,
        }
    }
}

fn target_of(goal: Goal) -> Option<usize> {
    match goal {
        Goal::NonTargeted => None,
        Goal::Targeted(t) => Some(t),
    }
}

pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Ranks qualifying candidates: exact success before partial success, then smaller L2.
pub(crate) fn better(c: &Candidate, best: Option<&Candidate>) -> bool {
    let rank = |o: Outcome| match o {
        Outcome::Success => 0,
        Outcome::PartialSuccess => 1,
        _ => 2,
    };
    match best {
        None => c.outcome.qualifies(),
        Some(b) => c.outcome.qualifies() && (rank(c.outcome), c.l2) < (rank(b.outcome), b.l2),
    }
}

/// Serves the previous tuple in place of the newest one. The first observation of an
/// episode (`t == 0`) is passed through unchanged.
pub fn delay_attack(obs: &Observation, t: usize) -> Observation {
    let mut served = obs.clone();
    let n = served.window.len();
    if t > 0 && n >= 2 {
        served.window[n - 1] = served.window[n - 2];
    }
    served
}

/// Action with the lowest Q-value; ties go to the lowest index.
pub fn least_q_target(net: &QNetwork, state: &[f64]) -> Result<usize> {
    net.least_q_action(state)
}

/// Classifies an attack by comparing the induced action with the original one and, for
/// targeted attacks, with the target. With an action-type map, non-targeted attacks must
/// change the action type and targeted attacks that land on the target's type count as
/// partial successes.
pub fn classify_outcome(
    original: usize,
    induced: usize,
    goal: Goal,
    action_types: Option<&[ActionType]>,
    action_count: usize,
) -> Result<Outcome> {
    let count = action_types.map_or(action_count, <[ActionType]>::len);
    let target = target_of(goal);
    for idx in [Some(original), Some(induced), target].into_iter().flatten() {
        if idx >= count {
            return Err(Error::InvalidAction { index: idx, count });
        }
    }
    if induced == original {
        return Ok(Outcome::Failure);
    }
    Ok(match (goal, action_types) {
        (Goal::NonTargeted, None) => Outcome::Success,
        (Goal::NonTargeted, Some(types)) => {
            if types[induced] != types[original] {
                Outcome::Success
            } else {
                Outcome::Failure
            }
        }
        (Goal::Targeted(t), types) => {
            if induced == t {
                Outcome::Success
            } else if types.is_some_and(|ty| ty[induced] == ty[t]) {
                Outcome::PartialSuccess
            } else {
                Outcome::NonTargetChange
            }
        }
    })
}
