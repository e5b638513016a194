//! Trading environments: a single-share stock environment over relative bar features and
//! a managed-risk portfolio environment over indicator features.
//!
//! Both expose their observation as a sliding window of 3-wide feature tuples (oldest
//! first) followed by environment-specific extras, so the attack harness can address
//! and overwrite the most recent tuple.

mod basic;
mod managed;

use std::ops::Range;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::market_data::Bar;

pub use basic::{BasicAction, BasicEnvConfig, BasicEnvState, BasicStockEnv};
pub use managed::{
    build_action_table, net_worth, sharpe_reward, Bracket, ManagedEnvConfig, ManagedRiskAction,
    ManagedRiskEnv, Portfolio,
};

/// Width of one feature tuple in the observation window.
pub const TUPLE_WIDTH: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Feature tuples, oldest first.
    pub window: Vec<[f64; TUPLE_WIDTH]>,
    /// Non-market features appended after the window.
    pub extras: Vec<f64>,
    /// Bar index of the last tuple in `window`.
    pub newest_bar: usize,
}

impl Observation {
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.window.len() * TUPLE_WIDTH + self.extras.len());
        for t in &self.window {
            v.extend_from_slice(t);
        }
        v.extend_from_slice(&self.extras);
        v
    }

    /// Coordinates of the most recent tuple within [`Observation::to_vector`].
    pub fn newest_tuple_range(&self) -> Range<usize> {
        let start = (self.window.len() - 1) * TUPLE_WIDTH;
        start..start + TUPLE_WIDTH
    }

    /// Bar index of the tuple at window position `pos`.
    pub fn bar_at(&self, pos: usize) -> usize {
        self.newest_bar + pos + 1 - self.window.len()
    }

    pub fn newest_tuple(&self) -> [f64; TUPLE_WIDTH] {
        *self.window.last().expect("observation window is never empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionType {
    Hold,
    Buy,
    Sell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Buy,
    Sell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillReason {
    Entry,
    StopLoss,
    TakeProfit,
}

/// One executed order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub bar: usize,
    pub side: Side,
    pub reason: FillReason,
    pub price: f64,
    /// Asset quantity exchanged.
    pub quantity: f64,
    /// Commission charged, in quote currency (or percent points for the basic env).
    pub commission: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepInfo {
    pub net_worth: Option<f64>,
    pub trades: Vec<TradeRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub terminal: bool,
    pub info: StepInfo,
}

pub trait TradingEnv {
    fn observation_dim(&self) -> usize;

    fn action_count(&self) -> usize;

    /// Action-type map used to judge attack outcomes by type rather than by index.
    /// `None` means outcomes compare raw action indices.
    fn action_types(&self) -> Option<Vec<ActionType>>;

    fn window_len(&self) -> usize;

    /// Bar indices at which an episode may start.
    fn start_range(&self) -> Range<usize>;

    fn reset_at(&mut self, start: usize) -> Result<Observation>;

    /// Resets to a uniformly drawn start that leaves room for a full episode when the
    /// data allows it.
    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<Observation> {
        let range = self.start_range();
        let span = (range.end - range.start) as u64;
        let start = range.start + (rng.next_u64() % span) as usize;
        self.reset_at(start)
    }

    fn step(&mut self, action: usize) -> Result<StepResult>;

    fn net_worth(&self) -> Option<f64>;
}

/// Environment selection and parameters, as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    Basic(BasicEnvConfig),
    Managed(ManagedEnvConfig),
}

impl EnvConfig {
    pub fn build(&self, bars: &[Bar]) -> Result<Env> {
        Ok(match self {
            EnvConfig::Basic(c) => Env::Basic(BasicStockEnv::new(bars, c.clone())?),
            EnvConfig::Managed(c) => Env::Managed(ManagedRiskEnv::new(bars, c.clone())?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Basic(_) => "basic",
            EnvConfig::Managed(_) => "managed",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Env {
    Basic(BasicStockEnv),
    Managed(ManagedRiskEnv),
}

macro_rules! delegate {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            Env::Basic($e) => $body,
            Env::Managed($e) => $body,
        }
    };
}

impl TradingEnv for Env {
    fn observation_dim(&self) -> usize {
        delegate!(self, e => e.observation_dim())
    }
    fn action_count(&self) -> usize {
        delegate!(self, e => e.action_count())
    }
    fn action_types(&self) -> Option<Vec<ActionType>> {
        delegate!(self, e => e.action_types())
    }
    fn window_len(&self) -> usize {
        delegate!(self, e => e.window_len())
    }
    fn start_range(&self) -> Range<usize> {
        delegate!(self, e => e.start_range())
    }
    fn reset_at(&mut self, start: usize) -> Result<Observation> {
        delegate!(self, e => e.reset_at(start))
    }
    fn step(&mut self, action: usize) -> Result<StepResult> {
        delegate!(self, e => e.step(action))
    }
    fn net_worth(&self) -> Option<f64> {
        delegate!(self, e => e.net_worth())
    }
}

/// Valid start indices for an episode of `cap` steps over `len` bars whose first
/// observable window ends at `min_start`.
pub(crate) fn episode_starts(min_start: usize, len: usize, cap: usize) -> Range<usize> {
    let last_full = len.saturating_sub(cap + 1);
    if last_full >= min_start {
        min_start..last_full + 1
    } else {
        min_start..min_start + 1
    }
}
