use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Bar;
use crate::error::{Error, Result};

/// Parameters of the synthetic geometric random walk.
///
/// Per-bar log returns follow `r_t = drift + momentum * r_{t-1} + volatility * z_t`.
/// Intrabar highs and lows extend past the open/close envelope by half-normal excursions
/// scaled by `volatility`, so a zero-volatility, zero-drift walk is perfectly flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub bars: usize,
    pub initial_price: f64,
    pub drift: f64,
    pub volatility: f64,
    /// AR(1) coefficient on the previous log return, in (-1, 1).
    pub momentum: f64,
    pub seed: u64,
    pub start_timestamp: i64,
    pub interval_secs: i64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            bars: 1000,
            initial_price: 100.0,
            drift: 0.0,
            volatility: 0.0,
            momentum: 0.0,
            seed: 0,
            start_timestamp: 1_577_836_800,
            interval_secs: 60,
        }
    }
}

pub fn generate_bars(params: &SynthParams) -> Result<Vec<Bar>> {
    if params.bars == 0 {
        return Err(Error::InvalidArgument("bars must be positive".into()));
    }
    if !(params.initial_price > 0.0 && params.initial_price.is_finite()) {
        return Err(Error::InvalidArgument("initial price must be positive".into()));
    }
    if !(params.volatility >= 0.0 && params.volatility.is_finite()) {
        return Err(Error::InvalidArgument("volatility must be non-negative".into()));
    }
    if !(params.momentum.abs() < 1.0) || !params.drift.is_finite() {
        return Err(Error::InvalidArgument(
            "momentum must lie in (-1, 1) and drift must be finite".into(),
        ));
    }
    if params.interval_secs <= 0 {
        return Err(Error::InvalidArgument("interval must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut bars = Vec::with_capacity(params.bars);
    let mut prev_close = params.initial_price;
    let mut prev_ret = 0.0;
    for i in 0..params.bars {
        let (z, zh, zl, zv) = (normal(), normal(), normal(), normal());
        let ret = params.drift + params.momentum * prev_ret + params.volatility * z;
        let open = prev_close;
        let close = open * ret.exp();
        let high = open.max(close) * (0.5 * params.volatility * zh.abs()).exp();
        let low = open.min(close) * (-0.5 * params.volatility * zl.abs()).exp();
        let bar = Bar {
            timestamp: params.start_timestamp + i as i64 * params.interval_secs,
            open,
            high,
            low,
            close,
            volume: (1000.0 * (1.0 + 0.25 * zv.abs())).round(),
        };
        bar.check().map_err(|msg| {
            Error::InvalidArgument(format!("walk diverged at bar {i}: {msg}"))
        })?;
        bars.push(bar);
        prev_close = close;
        prev_ret = ret;
    }
    Ok(bars)
}
