//! Budget of dense and sparse evaluations within one second of wall time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeasibilityError {
    #[error("{field} is invalid: {reason}")]
    Invalid { field: &'static str, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityInput {
    /// Simulator speed over real time.
    pub tau: f64,
    /// Parallel threads.
    pub threads: u64,
    /// Fraction of transitions evaluated sparsely.
    pub alpha: f64,
    /// Divisor for sequential overheads (at least 1).
    pub sequential_penalty: f64,
    /// Share of the budget lost to other work, in [0, 1).
    pub overhead_fraction: f64,
}

impl FeasibilityInput {
    pub fn new(tau: f64, threads: u64, alpha: f64) -> Self {
        Self {
            tau,
            threads,
            alpha,
            sequential_penalty: 1.0,
            overhead_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), FeasibilityError> {
        let bad = |field, reason| Err(FeasibilityError::Invalid { field, reason });
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", "must be positive");
        }
        if self.threads == 0 {
            return bad("threads", "must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha", "must lie in (0, 1]");
        }
        if !(self.sequential_penalty >= 1.0 && self.sequential_penalty.is_finite()) {
            return bad("sequential_penalty", "must be at least 1");
        }
        if !(self.overhead_fraction >= 0.0 && self.overhead_fraction < 1.0) {
            return bad("overhead_fraction", "must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibilityOutput {
    pub n_dense: u64,
    pub n_sparse: u64,
}

/// Nudges values a few ulps below an integer up before flooring.
fn floor_count(x: f64) -> u64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r as u64
    } else {
        x.floor() as u64
    }
}

fn counts(rate: f64, input: &FeasibilityInput) -> FeasibilityOutput {
    let dense = rate * (1.0 - input.overhead_fraction) / input.sequential_penalty;
    FeasibilityOutput {
        n_dense: floor_count(dense),
        n_sparse: floor_count(dense / input.alpha),
    }
}

/// Counts from the product of threads and simulator speed.
pub fn budget(input: &FeasibilityInput) -> Result<FeasibilityOutput, FeasibilityError> {
    input.validate()?;
    Ok(counts(input.threads as f64 * input.tau, input))
}

/// Counts from threads divided by simulator speed, reported for comparison.
pub fn budget_ratio_variant(input: &FeasibilityInput) -> Result<FeasibilityOutput, FeasibilityError> {
    input.validate()?;
    Ok(counts(input.threads as f64 / input.tau, input))
}
