use serde::{Deserialize, Serialize};

use super::indicators::{macd, rsi, MacdParams};
use super::Bar;
use crate::error::{Error, Result};

/// RSI lookback used for the indicator feature set.
pub const RSI_PERIOD: usize = 20;

/// Leading bars without a defined indicator tuple (the slow MACD period).
pub const INDICATOR_WARMUP: usize = 50;

/// High, low and close expressed relative to the bar's open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeBarFeatures {
    pub rel_high: f64,
    pub rel_low: f64,
    pub rel_close: f64,
}

impl RelativeBarFeatures {
    pub fn to_array(self) -> [f64; 3] {
        [self.rel_high, self.rel_low, self.rel_close]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorFeatures {
    pub log_return: f64,
    pub macd: f64,
    pub rsi: f64,
}

impl IndicatorFeatures {
    pub fn to_array(self) -> [f64; 3] {
        [self.log_return, self.macd, self.rsi]
    }
}

pub fn relative_features(bar: &Bar) -> Result<RelativeBarFeatures> {
    if bar.open <= 0.0 || !bar.open.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "open price must be positive, got {}",
            bar.open
        )));
    }
    let o = bar.open;
    Ok(RelativeBarFeatures {
        rel_high: (bar.high - o) / o,
        rel_low: (bar.low - o) / o,
        rel_close: (bar.close - o) / o,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// `(rel_high, rel_low, rel_close)` per bar.
    Relative,
    /// `(log_return, macd, rsi)` per bar.
    Indicator,
}

/// Per-bar feature tuples aligned with the bar series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSeries {
    pub mode: FeatureMode,
    pub rows: Vec<[f64; 3]>,
    /// Rows before this index carry no valid features and must not be observed.
    pub warmup_length: usize,
}

impl FeatureSeries {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&[f64; 3]> {
        if index < self.warmup_length {
            None
        } else {
            self.rows.get(index)
        }
    }
}

pub fn build_feature_series(bars: &[Bar], mode: FeatureMode) -> Result<FeatureSeries> {
    if bars.is_empty() {
        return Err(Error::EmptySeries);
    }
    match mode {
        FeatureMode::Relative => {
            let rows = bars
                .iter()
                .map(|b| relative_features(b).map(RelativeBarFeatures::to_array))
                .collect::<Result<Vec<_>>>()?;
            Ok(FeatureSeries {
                mode,
                rows,
                warmup_length: 0,
            })
        }
        FeatureMode::Indicator => {
            if bars.len() < INDICATOR_WARMUP {
                return Err(Error::InvalidArgument(format!(
                    "indicator features need at least {INDICATOR_WARMUP} bars, got {}",
                    bars.len()
                )));
            }
            let closes: Vec<f64> = bars.iter().map(|b| b.close).collect();
            let macd_line = macd(&closes, MacdParams::default())?;
            let rsi_line = rsi(&closes, RSI_PERIOD)?;
            let rows = (0..bars.len())
                .map(|t| {
                    if t < INDICATOR_WARMUP {
                        return [f64::NAN; 3];
                    }
                    IndicatorFeatures {
                        log_return: closes[t].ln() - closes[t - 1].ln(),
                        macd: macd_line[t],
                        rsi: rsi_line[t].expect("rsi warmup is shorter than macd warmup"),
                    }
                    .to_array()
                })
                .collect();
            Ok(FeatureSeries {
                mode,
                rows,
                warmup_length: INDICATOR_WARMUP,
            })
        }
    }
}
