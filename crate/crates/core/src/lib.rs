//! Deep Q-learning trading agents and whitebox test-time attacks on their
//! observation channel.
//!
//! The crate is organised bottom-up:
//!
//! - [`market_data`]: OHLCV bars, CSV ingestion, relative-price and indicator features,
//!   and a synthetic bar generator.
//! - [`qnet`]: a small fully connected Q-network with analytic parameter and input gradients.
//! - [`dqn`]: replay buffer, epsilon-greedy selection, training and greedy evaluation.
//! - [`envs`]: the single-share basic stock environment and the managed-risk portfolio
//!   environment.
//! - [`attacks`]: delay, FGSM and two C&W-L2 variants, plus the feature-constraint projector.
//! - [`harness`]: control/attacked runs, attack ledgers, difference curves and report export.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod dqn;
pub mod envs;
pub mod error;
pub mod harness;
pub mod market_data;
pub mod qnet;

pub use error::{Error, Result};

/// Index of the first maximum. Ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Index of the first minimum. Ties resolve to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}
