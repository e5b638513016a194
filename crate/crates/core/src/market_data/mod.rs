//! OHLCV bars and the feature vectors the trading environments observe.

mod features;
mod indicators;
mod synth;

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::{
    build_feature_series, relative_features, FeatureMode, FeatureSeries, IndicatorFeatures,
    RelativeBarFeatures, INDICATOR_WARMUP,
};
pub use indicators::{ema, macd, macd_signal, rsi, rsi_with, MacdParams, RsiSmoothing};
pub use synth::{generate_bars, SynthParams};

/// One OHLCV interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub timestamp: i64,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Bar {
    /// Checks the per-bar invariants, returning a description of the first violation.
    pub fn check(&self) -> std::result::Result<(), String> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite()) || !self.volume.is_finite() {
            return Err("non-finite value".into());
        }
        if prices.iter().any(|&p| p <= 0.0) {
            return Err("prices must be positive".into());
        }
        if self.volume < 0.0 {
            return Err(format!("negative volume {}", self.volume));
        }
        if self.low > self.high {
            return Err(format!("low {} above high {}", self.low, self.high));
        }
        if self.open < self.low || self.open > self.high {
            return Err(format!("open {} outside [{}, {}]", self.open, self.low, self.high));
        }
        if self.close < self.low || self.close > self.high {
            return Err(format!("close {} outside [{}, {}]", self.close, self.low, self.high));
        }
        Ok(())
    }
}

/// Column names used to locate bar fields in a CSV header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub timestamp: String,
    pub open: String,
    pub high: String,
    pub low: String,
    pub close: String,
    pub volume: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            open: "open".into(),
            high: "high".into(),
            low: "low".into(),
            close: "close".into(),
            volume: Some("volume".into()),
        }
    }
}

/// Loads a bar series from a headered CSV file.
///
/// Rows must already be in strictly increasing timestamp order; out-of-order rows are an
/// error rather than being silently sorted. Row numbers in diagnostics are 1-based file
/// lines, counting the header as line 1.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Vec<Bar>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Vec<Bar>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidRow {
                row: 1,
                message: format!("missing column `{name}`"),
            })
    };
    let ts_col = column(&schema.timestamp)?;
    let open_col = column(&schema.open)?;
    let high_col = column(&schema.high)?;
    let low_col = column(&schema.low)?;
    let close_col = column(&schema.close)?;
    let volume_col = schema
        .volume
        .as_deref()
        .and_then(|name| headers.iter().position(|h| h == name));

    let mut bars: Vec<Bar> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record?;
        let field = |col: usize| -> Result<&str> {
            record.get(col).ok_or_else(|| Error::InvalidRow {
                row,
                message: format!("missing field {col}"),
            })
        };
        let num = |col: usize| -> Result<f64> {
            let raw = field(col)?;
            raw.parse::<f64>().map_err(|_| Error::InvalidRow {
                row,
                message: format!("cannot parse `{raw}` as a number"),
            })
        };
        let raw_ts = field(ts_col)?;
        let timestamp = raw_ts.parse::<i64>().map_err(|_| Error::InvalidRow {
            row,
            message: format!("cannot parse `{raw_ts}` as integer epoch seconds"),
        })?;
        let volume = match volume_col {
            Some(col) if !field(col)?.is_empty() => num(col)?,
            _ => 0.0,
        };
        let bar = Bar {
            timestamp,
            open: num(open_col)?,
            high: num(high_col)?,
            low: num(low_col)?,
            close: num(close_col)?,
            volume,
        };
        bar.check()
            .map_err(|message| Error::InvalidRow { row, message })?;
        if let Some(prev) = bars.last() {
            if bar.timestamp <= prev.timestamp {
                return Err(Error::InvalidRow {
                    row,
                    message: format!(
                        "timestamp {} not after previous {}",
                        bar.timestamp, prev.timestamp
                    ),
                });
            }
        }
        bars.push(bar);
    }
    if bars.is_empty() {
        return Err(Error::EmptySeries);
    }
    Ok(bars)
}

/// Writes bars in the canonical `timestamp,open,high,low,close,volume` layout.
pub fn write_csv<W: Write>(writer: W, bars: &[Bar]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["timestamp", "open", "high", "low", "close", "volume"])?;
    for b in bars {
        wtr.write_record(&[
            b.timestamp.to_string(),
            b.open.to_string(),
            b.high.to_string(),
            b.low.to_string(),
            b.close.to_string(),
            b.volume.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
