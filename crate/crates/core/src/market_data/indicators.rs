use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponential moving average seeded with the first element, smoothing `2 / (period + 1)`.
pub fn ema(series: &[f64], period: usize) -> Result<Vec<f64>> {
    if period < 1 {
        return Err(Error::InvalidArgument("ema period must be >= 1".into()));
    }
    let Some(&first) = series.first() else {
        return Err(Error::EmptySeries);
    };
    let alpha = 2.0 / (period as f64 + 1.0);
    let mut out = Vec::with_capacity(series.len());
    let mut prev = first;
    out.push(prev);
    for &x in &series[1..] {
        prev += alpha * (x - prev);
        out.push(prev);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacdParams {
    pub fast: usize,
    pub slow: usize,
    pub signal: usize,
}

impl Default for MacdParams {
    fn default() -> Self {
        Self {
            fast: 10,
            slow: 50,
            signal: 5,
        }
    }
}

/// MACD line: `ema(fast) - ema(slow)` of the closes.
pub fn macd(closes: &[f64], params: MacdParams) -> Result<Vec<f64>> {
    let fast = ema(closes, params.fast)?;
    let slow = ema(closes, params.slow)?;
    Ok(fast.iter().zip(&slow).map(|(f, s)| f - s).collect())
}

/// Signal line of the MACD (an EMA of the MACD line). Exposed for diagnostics only.
pub fn macd_signal(closes: &[f64], params: MacdParams) -> Result<Vec<f64>> {
    ema(&macd(closes, params)?, params.signal)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RsiSmoothing {
    /// Simple mean over the first window, then `avg = (avg * (n - 1) + x) / n`.
    #[default]
    Wilder,
    /// Plain rolling mean of gains and losses over the trailing window.
    Simple,
}

/// Wilder RSI. Entries before index `period` are `None` (warmup).
pub fn rsi(closes: &[f64], period: usize) -> Result<Vec<Option<f64>>> {
    rsi_with(closes, period, RsiSmoothing::Wilder)
}

#[allow(clippy::needless_range_loop)]
pub fn rsi_with(closes: &[f64], period: usize, smoothing: RsiSmoothing) -> Result<Vec<Option<f64>>> {
    if period < 1 {
        return Err(Error::InvalidArgument("rsi period must be >= 1".into()));
    }
    let mut out = vec![None; closes.len()];
    if closes.len() <= period {
        return Ok(out);
    }
    let gains: Vec<f64> = closes.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect();
    let losses: Vec<f64> = closes.windows(2).map(|w| (w[0] - w[1]).max(0.0)).collect();
    let n = period as f64;

    let mut avg_gain = gains[..period].iter().sum::<f64>() / n;
    let mut avg_loss = losses[..period].iter().sum::<f64>() / n;
    out[period] = Some(rsi_value(avg_gain, avg_loss));
    for t in period + 1..closes.len() {
        let d = t - 1;
        match smoothing {
            RsiSmoothing::Wilder => {
                avg_gain = (avg_gain * (n - 1.0) + gains[d]) / n;
                avg_loss = (avg_loss * (n - 1.0) + losses[d]) / n;
            }
            RsiSmoothing::Simple => {
                avg_gain = gains[d + 1 - period..=d].iter().sum::<f64>() / n;
                avg_loss = losses[d + 1 - period..=d].iter().sum::<f64>() / n;
            }
        }
        out[t] = Some(rsi_value(avg_gain, avg_loss));
    }
    Ok(out)
}

fn rsi_value(avg_gain: f64, avg_loss: f64) -> f64 {
    if avg_loss == 0.0 {
        100.0
    } else if avg_gain == 0.0 {
        0.0
    } else {
        100.0 - 100.0 / (1.0 + avg_gain / avg_loss)
    }
}
