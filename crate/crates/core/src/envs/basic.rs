use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{
    episode_starts, ActionType, FillReason, Observation, Side, StepInfo, StepResult, TradeRecord,
    TradingEnv,
};
use crate::error::{Error, Result};
use crate::market_data::{build_feature_series, Bar, FeatureMode, FeatureSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasicEnvConfig {
    /// Number of past bars in the observation.
    pub window: usize,
    /// Commission per executed trade, in percent.
    pub commission_pct: f64,
    pub episode_cap: usize,
}

impl Default for BasicEnvConfig {
    fn default() -> Self {
        Self {
            window: 10,
            commission_pct: 0.1,
            episode_cap: 250,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasicAction {
    Wait = 0,
    Buy = 1,
    Close = 2,
}

impl TryFrom<usize> for BasicAction {
    type Error = Error;

    fn try_from(index: usize) -> Result<Self> {
        match index {
            0 => Ok(BasicAction::Wait),
            1 => Ok(BasicAction::Buy),
            2 => Ok(BasicAction::Close),
            _ => Err(Error::InvalidAction { index, count: 3 }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasicEnvState {
    pub cursor: usize,
    /// Entry (bought) price while holding the single share.
    pub entry_price: Option<f64>,
    pub steps: usize,
    pub done: bool,
}

impl BasicEnvState {
    pub fn holding(&self) -> bool {
        self.entry_price.is_some()
    }
}

/// Single-share long-only environment. Rewards are in percent: buying costs the
/// commission, closing pays `100 * (SP - BP) / BP` minus the commission.
#[derive(Debug, Clone)]
pub struct BasicStockEnv {
    config: BasicEnvConfig,
    closes: Vec<f64>,
    features: FeatureSeries,
    state: BasicEnvState,
    trades: Vec<TradeRecord>,
}

impl BasicStockEnv {
    pub fn new(bars: &[Bar], config: BasicEnvConfig) -> Result<Self> {
        if config.window == 0 || config.episode_cap == 0 {
            return Err(Error::InvalidConfig("window and episode cap must be positive".into()));
        }
        if !(config.commission_pct >= 0.0 && config.commission_pct.is_finite()) {
            return Err(Error::InvalidConfig("commission must be non-negative".into()));
        }
        let features = build_feature_series(bars, FeatureMode::Relative)?;
        if bars.len() < config.window + 2 {
            return Err(Error::InvalidConfig(format!(
                "basic env needs at least {} bars, got {}",
                config.window + 2,
                bars.len()
            )));
        }
        let mut env = Self {
            closes: bars.iter().map(|b| b.close).collect(),
            features,
            state: BasicEnvState {
                cursor: 0,
                entry_price: None,
                steps: 0,
                done: true,
            },
            trades: Vec::new(),
            config,
        };
        env.reset_at(env.start_range().start)?;
        Ok(env)
    }

    pub fn config(&self) -> &BasicEnvConfig {
        &self.config
    }

    pub fn state(&self) -> &BasicEnvState {
        &self.state
    }

    /// Trades executed since the last reset.
    pub fn trades(&self) -> &[TradeRecord] {
        &self.trades
    }

    fn observation(&self) -> Observation {
        let c = self.state.cursor;
        let window = (c + 1 - self.config.window..=c)
            .map(|i| self.features.rows[i])
            .collect();
        let (flag, pnl) = match self.state.entry_price {
            Some(bp) => (1.0, 100.0 * (self.closes[c] - bp) / bp),
            None => (0.0, 0.0),
        };
        Observation {
            window,
            extras: vec![flag, pnl],
            newest_bar: c,
        }
    }

    fn trade(&mut self, side: Side, price: f64) {
        self.trades.push(TradeRecord {
            bar: self.state.cursor,
            side,
            reason: FillReason::Entry,
            price,
            quantity: 1.0,
            commission: self.config.commission_pct,
        });
    }
}

impl TradingEnv for BasicStockEnv {
    fn observation_dim(&self) -> usize {
        self.config.window * super::TUPLE_WIDTH + 2
    }

    fn action_count(&self) -> usize {
        3
    }

    fn action_types(&self) -> Option<Vec<ActionType>> {
        None
    }

    fn window_len(&self) -> usize {
        self.config.window
    }

    fn start_range(&self) -> Range<usize> {
        episode_starts(self.config.window, self.closes.len(), self.config.episode_cap)
    }

    fn reset_at(&mut self, start: usize) -> Result<Observation> {
        if start + 1 < self.config.window || start + 1 >= self.closes.len() {
            return Err(Error::InvalidArgument(format!("start {start} leaves no room for an episode")));
        }
        self.state = BasicEnvState {
            cursor: start,
            entry_price: None,
            steps: 0,
            done: false,
        };
        self.trades.clear();
        Ok(self.observation())
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        let action = BasicAction::try_from(action)?;
        if self.state.done {
            return Err(Error::InvalidArgument("step called on a finished episode".into()));
        }
        let price = self.closes[self.state.cursor];
        let c = self.config.commission_pct;
        let mut reward = 0.0;
        let before = self.trades.len();
        match (action, self.state.entry_price) {
            (BasicAction::Buy, None) => {
                self.state.entry_price = Some(price);
                reward = -c;
                self.trade(Side::Buy, price);
            }
            (BasicAction::Close, Some(bp)) => {
                reward = 100.0 * (price - bp) / bp - c;
                self.state.entry_price = None;
                self.trade(Side::Sell, price);
            }
            _ => {}
        }
        self.state.cursor += 1;
        self.state.steps += 1;
        let terminal = self.state.steps >= self.config.episode_cap
            || self.state.cursor + 1 >= self.closes.len();
        self.state.done = terminal;
        Ok(StepResult {
            observation: self.observation(),
            reward,
            terminal,
            info: StepInfo {
                net_worth: None,
                trades: self.trades[before..].to_vec(),
            },
        })
    }

    fn net_worth(&self) -> Option<f64> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{generate_bars, SynthParams};

    fn bars_from_closes(closes: &[f64]) -> Vec<Bar> {
        closes
            .iter()
            .enumerate()
            .map(|(i, &c)| Bar {
                timestamp: i as i64,
                open: c,
                high: c,
                low: c,
                close: c,
                volume: 0.0,
            })
            .collect()
    }

    fn env_with(closes: &[f64], commission: f64) -> BasicStockEnv {
        BasicStockEnv::new(
            &bars_from_closes(closes),
            BasicEnvConfig {
                window: 2,
                commission_pct: commission,
                episode_cap: 250,
            },
        )
        .unwrap()
    }

    #[test]
    fn close_pays_percent_move_minus_commission() {
        let mut env = env_with(&[100.0, 100.0, 100.0, 110.0, 110.0, 110.0], 0.1);
        env.reset_at(2).unwrap();
        let r = env.step(1).unwrap();
        assert!((r.reward + 0.1).abs() < 1e-12);
        assert_eq!(r.observation.extras[0], 1.0);
        let r = env.step(2).unwrap();
        assert!((r.reward - 9.9).abs() < 1e-12);
        assert_eq!(r.observation.extras, vec![0.0, 0.0]);
    }

    #[test]
    fn close_at_entry_price_costs_commission() {
        let mut env = env_with(&[50.0; 8], 0.25);
        env.reset_at(2).unwrap();
        env.step(1).unwrap();
        let r = env.step(2).unwrap();
        assert!((r.reward + 0.25).abs() < 1e-12);
    }

    #[test]
    fn no_op_actions() {
        let mut env = env_with(&[10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0], 0.1);
        let obs = env.reset_at(2).unwrap();
        let r = env.step(0).unwrap();
        assert_eq!(r.reward, 0.0);
        assert_eq!(r.observation.newest_bar, obs.newest_bar + 1);
        assert_eq!(r.observation.window[0], obs.window[1]);
        assert_eq!(env.step(2).unwrap().reward, 0.0);
        env.step(1).unwrap();
        assert_eq!(env.step(1).unwrap().reward, 0.0);
        assert!(env.state().holding());
        assert!(matches!(env.step(3), Err(Error::InvalidAction { index: 3, .. })));
    }

    #[test]
    fn unrealised_pnl_in_observation() {
        let mut env = env_with(&[100.0, 100.0, 100.0, 105.0, 105.0], 0.1);
        env.reset_at(2).unwrap();
        let r = env.step(1).unwrap();
        assert!((r.observation.extras[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn episode_terminates_once_at_cap_or_data_end() {
        let bars = generate_bars(&SynthParams {
            bars: 400,
            volatility: 0.01,
            ..SynthParams::default()
        })
        .unwrap();
        let mut env = BasicStockEnv::new(&bars, BasicEnvConfig::default()).unwrap();
        env.reset_at(10).unwrap();
        let mut terminals = Vec::new();
        for i in 0..250 {
            let r = env.step(i % 3).unwrap();
            terminals.push(r.terminal);
        }
        assert_eq!(terminals.iter().filter(|t| **t).count(), 1);
        assert!(terminals[249]);
        assert!(env.step(0).is_err());

        env.reset_at(390).unwrap();
        let mut steps = 0;
        loop {
            steps += 1;
            if env.step(0).unwrap().terminal {
                break;
            }
        }
        assert_eq!(steps, 9);
    }

    #[test]
    fn observation_dimension() {
        let bars = generate_bars(&SynthParams {
            bars: 100,
            volatility: 0.01,
            ..SynthParams::default()
        })
        .unwrap();
        let mut env = BasicStockEnv::new(&bars, BasicEnvConfig::default()).unwrap();
        let obs = env.reset_at(env.start_range().start).unwrap();
        assert_eq!(obs.to_vector().len(), 32);
        assert_eq!(env.observation_dim(), 32);
        assert!(env.start_range().start >= 10);
    }
}
