use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{
    episode_starts, ActionType, FillReason, Observation, Side, StepInfo, StepResult, TradeRecord,
    TradingEnv,
};
use crate::error::{Error, Result};
use crate::market_data::{build_feature_series, Bar, FeatureMode, FeatureSeries};

/// Fraction shaved off each trade size so the largest size never spends the full balance.
const SIZE_GUARD: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManagedEnvConfig {
    pub window: usize,
    /// Stop-loss distances as fractions of the entry price.
    pub stop: Vec<f64>,
    /// Take-profit distances as fractions of the entry price.
    pub take: Vec<f64>,
    /// Number of uniformly spaced trade sizes.
    pub trade_sizes: usize,
    pub initial_cash: f64,
    pub initial_asset: f64,
    /// Commission in percent of traded notional.
    pub commission_pct: f64,
    pub episode_cap: usize,
    pub risk_free: f64,
    pub sharpe_offset: f64,
}

impl Default for ManagedEnvConfig {
    fn default() -> Self {
        Self {
            window: 20,
            stop: vec![0.02, 0.04, 0.06],
            take: vec![0.01, 0.02, 0.03],
            trade_sizes: 10,
            initial_cash: 10_000.0,
            initial_asset: 10.0,
            commission_pct: 0.0,
            episode_cap: 250,
            risk_free: 0.0,
            sharpe_offset: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ManagedRiskAction {
    Hold,
    Trade {
        side: Side,
        /// Fraction of the relevant balance (cash for buys, asset for sells).
        size: f64,
        stop: f64,
        take: f64,
    },
}

impl ManagedRiskAction {
    pub fn action_type(&self) -> ActionType {
        match self {
            ManagedRiskAction::Hold => ActionType::Hold,
            ManagedRiskAction::Trade { side: Side::Buy, .. } => ActionType::Buy,
            ManagedRiskAction::Trade { side: Side::Sell, .. } => ActionType::Sell,
        }
    }
}

/// Enumerates HOLD (index 0) followed by every `(stop, take, size, side)` combination,
/// with `side` varying fastest, so odd indices buy and even non-zero indices sell.
pub fn build_action_table(stop: &[f64], take: &[f64], sizes: usize) -> Result<Vec<ManagedRiskAction>> {
    if stop.is_empty() || take.is_empty() || sizes == 0 {
        return Err(Error::InvalidConfig(
            "stop and take lists must be non-empty and trade sizes >= 1".into(),
        ));
    }
    if stop.iter().chain(take).any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::InvalidConfig("stop/take fractions must lie in (0, 1)".into()));
    }
    let mut table = Vec::with_capacity(stop.len() * take.len() * sizes * 2 + 1);
    table.push(ManagedRiskAction::Hold);
    for &s in stop {
        for &t in take {
            for k in 1..=sizes {
                let size = k as f64 * (1.0 - SIZE_GUARD) / sizes as f64;
                for side in [Side::Buy, Side::Sell] {
                    table.push(ManagedRiskAction::Trade {
                        side,
                        size,
                        stop: s,
                        take: t,
                    });
                }
            }
        }
    }
    Ok(table)
}

/// Sharpe-style reward over a return history:
/// `(mean(R - rf) + offset) / (population_std(R) + offset)`; zero for an empty history.
pub fn sharpe_reward(returns: &[f64], risk_free: f64, offset: f64) -> f64 {
    if returns.is_empty() {
        return 0.0;
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    (mean - risk_free + offset) / (var.sqrt() + offset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    pub cash: f64,
    pub asset: f64,
    pub trades: Vec<TradeRecord>,
}

impl Portfolio {
    pub fn new(cash: f64, asset: f64) -> Self {
        Self {
            cash,
            asset,
            trades: Vec::new(),
        }
    }
}

/// `cash + asset * price`.
pub fn net_worth(portfolio: &Portfolio, price: f64) -> Result<f64> {
    if !(price > 0.0 && price.is_finite()) {
        return Err(Error::InvalidArgument(format!("price must be positive, got {price}")));
    }
    Ok(portfolio.cash + portfolio.asset * price)
}

/// Exit bracket attached to an entry order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub entry_side: Side,
    /// Asset bought (buy entries) or quote currency received (sell entries).
    pub amount: f64,
    pub stop_price: f64,
    pub take_price: f64,
}

/// Portfolio environment with a managed-risk action scheme and a Sharpe reward.
#[derive(Debug, Clone)]
pub struct ManagedRiskEnv {
    config: ManagedEnvConfig,
    bars: Vec<Bar>,
    features: FeatureSeries,
    actions: Vec<ManagedRiskAction>,
    portfolio: Portfolio,
    brackets: Vec<Bracket>,
    returns: Vec<f64>,
    last_net_worth: f64,
    cursor: usize,
    steps: usize,
    done: bool,
}

impl ManagedRiskEnv {
    pub fn new(bars: &[Bar], config: ManagedEnvConfig) -> Result<Self> {
        if config.window == 0 || config.episode_cap == 0 {
            return Err(Error::InvalidConfig("window and episode cap must be positive".into()));
        }
        if !(config.initial_cash >= 0.0 && config.initial_asset >= 0.0) {
            return Err(Error::InvalidConfig("initial balances must be non-negative".into()));
        }
        if !(config.commission_pct >= 0.0 && config.commission_pct < 100.0) {
            return Err(Error::InvalidConfig("commission must lie in [0, 100)".into()));
        }
        let actions = build_action_table(&config.stop, &config.take, config.trade_sizes)?;
        let features = build_feature_series(bars, FeatureMode::Indicator)?;
        if bars.len() < features.warmup_length + config.window + 2 {
            return Err(Error::InvalidConfig(format!(
                "managed env needs at least {} bars, got {}",
                features.warmup_length + config.window + 2,
                bars.len()
            )));
        }
        let mut env = Self {
            portfolio: Portfolio::new(config.initial_cash, config.initial_asset),
            bars: bars.to_vec(),
            features,
            actions,
            brackets: Vec::new(),
            returns: Vec::new(),
            last_net_worth: 0.0,
            cursor: 0,
            steps: 0,
            done: true,
            config,
        };
        env.reset_at(env.start_range().start)?;
        Ok(env)
    }

    pub fn actions(&self) -> &[ManagedRiskAction] {
        &self.actions
    }

    pub fn portfolio(&self) -> &Portfolio {
        &self.portfolio
    }

    pub fn open_brackets(&self) -> &[Bracket] {
        &self.brackets
    }

    fn observation(&self) -> Observation {
        let c = self.cursor;
        Observation {
            window: (c + 1 - self.config.window..=c)
                .map(|i| self.features.rows[i])
                .collect(),
            extras: Vec::new(),
            newest_bar: c,
        }
    }

    fn fee(&self, notional: f64) -> f64 {
        notional * self.config.commission_pct / 100.0
    }

    fn record(&mut self, side: Side, reason: FillReason, price: f64, quantity: f64, commission: f64) -> TradeRecord {
        let t = TradeRecord {
            bar: self.cursor,
            side,
            reason,
            price,
            quantity,
            commission,
        };
        self.portfolio.trades.push(t);
        t
    }

    /// Buys with `cash_amount` of quote currency; returns asset received.
    fn buy(&mut self, cash_amount: f64, price: f64, reason: FillReason) -> Option<TradeRecord> {
        let cash_amount = cash_amount.min(self.portfolio.cash);
        if cash_amount <= 0.0 {
            return None;
        }
        let fee = self.fee(cash_amount);
        let qty = (cash_amount - fee) / price;
        self.portfolio.cash = (self.portfolio.cash - cash_amount).max(0.0);
        self.portfolio.asset += qty;
        Some(self.record(Side::Buy, reason, price, qty, fee))
    }

    /// Sells `qty` of the asset; returns the trade.
    fn sell(&mut self, qty: f64, price: f64, reason: FillReason) -> Option<TradeRecord> {
        let qty = qty.min(self.portfolio.asset);
        if qty <= 0.0 {
            return None;
        }
        let gross = qty * price;
        let fee = self.fee(gross);
        self.portfolio.asset = (self.portfolio.asset - qty).max(0.0);
        self.portfolio.cash += gross - fee;
        Some(self.record(Side::Sell, reason, price, qty, fee))
    }

    /// Executes an action at `price`, attaching its exit bracket.
    fn execute(&mut self, action: ManagedRiskAction, price: f64) -> Option<TradeRecord> {
        let ManagedRiskAction::Trade { side, size, stop, take } = action else {
            return None;
        };
        match side {
            Side::Buy => {
                let trade = self.buy(size * self.portfolio.cash, price, FillReason::Entry)?;
                self.brackets.push(Bracket {
                    entry_side: Side::Buy,
                    amount: trade.quantity,
                    stop_price: price * (1.0 - stop),
                    take_price: price * (1.0 + take),
                });
                Some(trade)
            }
            Side::Sell => {
                let trade = self.sell(size * self.portfolio.asset, price, FillReason::Entry)?;
                self.brackets.push(Bracket {
                    entry_side: Side::Sell,
                    amount: trade.quantity * price - trade.commission,
                    stop_price: price * (1.0 + stop),
                    take_price: price * (1.0 - take),
                });
                Some(trade)
            }
        }
    }

    /// Closes brackets touched by `bar`. Stops are checked before takes.
    fn check_brackets(&mut self, bar: &Bar) -> Vec<TradeRecord> {
        let mut fills = Vec::new();
        let brackets = std::mem::take(&mut self.brackets);
        for b in brackets {
            let exit = match b.entry_side {
                Side::Buy if bar.low <= b.stop_price => Some((b.stop_price, FillReason::StopLoss)),
                Side::Buy if bar.high >= b.take_price => Some((b.take_price, FillReason::TakeProfit)),
                Side::Sell if bar.high >= b.stop_price => Some((b.stop_price, FillReason::StopLoss)),
                Side::Sell if bar.low <= b.take_price => Some((b.take_price, FillReason::TakeProfit)),
                _ => None,
            };
            match exit {
                None => self.brackets.push(b),
                Some((price, reason)) => {
                    let fill = match b.entry_side {
                        Side::Buy => self.sell(b.amount, price, reason),
                        Side::Sell => self.buy(b.amount, price, reason),
                    };
                    fills.extend(fill);
                }
            }
        }
        fills
    }
}

impl TradingEnv for ManagedRiskEnv {
    fn observation_dim(&self) -> usize {
        self.config.window * super::TUPLE_WIDTH
    }

    fn action_count(&self) -> usize {
        self.actions.len()
    }

    fn action_types(&self) -> Option<Vec<ActionType>> {
        Some(self.actions.iter().map(ManagedRiskAction::action_type).collect())
    }

    fn window_len(&self) -> usize {
        self.config.window
    }

    fn start_range(&self) -> Range<usize> {
        episode_starts(
            self.features.warmup_length + self.config.window,
            self.bars.len(),
            self.config.episode_cap,
        )
    }

    fn reset_at(&mut self, start: usize) -> Result<Observation> {
        if start + 1 < self.features.warmup_length + self.config.window || start + 1 >= self.bars.len() {
            return Err(Error::InvalidArgument(format!("start {start} leaves no room for an episode")));
        }
        self.portfolio = Portfolio::new(self.config.initial_cash, self.config.initial_asset);
        self.brackets.clear();
        self.returns.clear();
        self.cursor = start;
        self.steps = 0;
        self.done = false;
        self.last_net_worth = net_worth(&self.portfolio, self.bars[start].close)?;
        Ok(self.observation())
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        let &chosen = self.actions.get(action).ok_or(Error::InvalidAction {
            index: action,
            count: self.actions.len(),
        })?;
        if self.done {
            return Err(Error::InvalidArgument("step called on a finished episode".into()));
        }
        let mut trades = Vec::new();
        trades.extend(self.execute(chosen, self.bars[self.cursor].close));

        self.cursor += 1;
        self.steps += 1;
        let bar = self.bars[self.cursor];
        trades.extend(self.check_brackets(&bar));

        let worth = net_worth(&self.portfolio, bar.close)?;
        self.returns.push(worth / self.last_net_worth - 1.0);
        self.last_net_worth = worth;
        let reward = sharpe_reward(&self.returns, self.config.risk_free, self.config.sharpe_offset);

        if self.portfolio.cash < 0.0 || self.portfolio.asset < 0.0 {
            return Err(Error::Invariant(format!(
                "negative balance: cash {} asset {}",
                self.portfolio.cash, self.portfolio.asset
            )));
        }
        let terminal = self.steps >= self.config.episode_cap || self.cursor + 1 >= self.bars.len();
        self.done = terminal;
        Ok(StepResult {
            observation: self.observation(),
            reward,
            terminal,
            info: StepInfo {
                net_worth: Some(worth),
                trades,
            },
        })
    }

    fn net_worth(&self) -> Option<f64> {
        Some(self.last_net_worth)
    }
}
