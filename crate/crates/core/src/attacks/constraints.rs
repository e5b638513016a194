use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Margin kept between a re-clamped close and the high/low bounds.
pub const CLOSE_MARGIN: f64 = 1e-9;

pub const RSI_BOUNDS: (f64, f64) = (0.0, 100.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// `(rel_high, rel_low, rel_close)`: high >= 0, low <= 0, low <= close <= high, and the
    /// close keeps its original relation to the high/low.
    RelativePrice,
    /// `(log_return, macd, rsi)`: RSI stays within [0, 100].
    Indicator,
    Unconstrained,
}

/// Feasible region for an attacked tuple plus the affine box used by the tanh C&W variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintSpec {
    pub kind: ConstraintKind,
    /// Every attacked coordinate is mapped from `[lower, upper]` onto `[0, 1]`.
    pub box_bounds: (f64, f64),
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        Self::new(ConstraintKind::RelativePrice)
    }
}

impl ConstraintSpec {
    pub fn new(kind: ConstraintKind) -> Self {
        Self {
            kind,
            box_bounds: (-1.0, 1.0),
        }
    }

    pub fn with_box(self, lower: f64, upper: f64) -> Self {
        Self {
            box_bounds: (lower, upper),
            ..self
        }
    }

    fn check_shape(&self, tuple: &[f64], original: &[f64]) -> Result<()> {
        if tuple.len() != original.len() {
            return Err(Error::dim(original.len(), tuple.len()));
        }
        match self.kind {
            ConstraintKind::RelativePrice if tuple.len() != 3 => Err(Error::dim(3, tuple.len())),
            ConstraintKind::Indicator if tuple.len() != 3 => Err(Error::dim(3, tuple.len())),
            _ => Ok(()),
        }
    }

    /// Maps `tuple` into the feasible region, using `original` to decide how the close behaves.
    pub fn project(&self, tuple: &[f64], original: &[f64]) -> Result<Vec<f64>> {
        self.check_shape(tuple, original)?;
        let mut out = tuple.to_vec();
        match self.kind {
            ConstraintKind::RelativePrice => {
                let high = out[0].max(0.0);
                let low = out[1].min(0.0);
                let close = if original[2] == original[0] {
                    high
                } else if original[2] == original[1] {
                    low
                } else {
                    let (lo, hi) = (low + CLOSE_MARGIN, high - CLOSE_MARGIN);
                    if lo <= hi {
                        out[2].clamp(lo, hi)
                    } else {
                        0.5 * (low + high)
                    }
                };
                out[0] = high;
                out[1] = low;
                out[2] = close;
            }
            ConstraintKind::Indicator => {
                out[2] = out[2].clamp(RSI_BOUNDS.0, RSI_BOUNDS.1);
            }
            ConstraintKind::Unconstrained => {}
        }
        Ok(out)
    }

    /// Whether `tuple` satisfies the declared sign and ordering relations.
    pub fn is_valid(&self, tuple: &[f64]) -> bool {
        match self.kind {
            ConstraintKind::RelativePrice => tuple.len() == 3 && is_valid_relative_price(tuple),
            ConstraintKind::Indicator => {
                tuple.len() == 3 && (RSI_BOUNDS.0..=RSI_BOUNDS.1).contains(&tuple[2])
            }
            ConstraintKind::Unconstrained => tuple.iter().all(|v| v.is_finite()),
        }
    }
}

/// `high >= 0`, `low <= 0` and `low <= close <= high`.
pub fn is_valid_relative_price(t: &[f64]) -> bool {
    let (high, low, close) = (t[0], t[1], t[2]);
    high >= 0.0 && low <= 0.0 && low <= close && close <= high
}
