//! Inverse factors of safety and the safety score over a parameter grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::Contact;
use crate::scenario::RewardMode;

/// Contacts with a smaller normal force carry no weight.
pub const MIN_NORMAL_FORCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SafetyError {
    #[error("no engaged actuators")]
    EmptyEngagedSet,
    #[error("actuator {0} has a non-positive effort limit")]
    InvalidLimit(usize),
    #[error("field has {field} values but the grid has {weights} weights")]
    DimensionMismatch { field: usize, weights: usize },
    #[error("weights sum to {0}, expected 1")]
    Unnormalized(f64),
    #[error("tolerance {0} outside (0, 1]")]
    InvalidTolerance(f64),
}

/// How the per-actuator ratios are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotorReduction {
    /// Critical as soon as one actuator saturates.
    #[default]
    Max,
    /// Critical only when every actuator saturates.
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FosSample {
    pub step: usize,
    pub contact_inv: f64,
    pub motor_inv: f64,
    pub combined_inv: f64,
}

/// Which component of the combined value an event is tied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    Contact,
    Motor,
}

impl Cause {
    pub const ALL: [Cause; 2] = [Cause::Contact, Cause::Motor];

    pub fn name(self) -> &'static str {
        match self {
            Cause::Contact => "contact",
            Cause::Motor => "motor",
        }
    }

    pub fn of(self, s: &FosSample) -> f64 {
        match self {
            Cause::Contact => s.contact_inv,
            Cause::Motor => s.motor_inv,
        }
    }
}

/// Normal-force weighted slip ratio over the grasp contacts.
///
/// Zero while the reward mode marks a grasp transition, or without loaded contacts.
pub fn fos_contact<'a>(grasp: impl IntoIterator<Item = &'a Contact>, r: RewardMode) -> f64 {
    if r.is_contact_transition() {
        return 0.0;
    }
    let mut weighted = 0.0;
    let mut total = 0.0;
    for c in grasp {
        if c.lambda_n < MIN_NORMAL_FORCE || !(c.mu > 0.0) {
            continue;
        }
        weighted += c.lambda_n * (c.lambda_t.abs() / (c.mu * c.lambda_n));
        total += c.lambda_n;
    }
    if total == 0.0 {
        0.0
    } else {
        (weighted / total).clamp(0.0, 1.0)
    }
}

/// Effort ratio of the engaged actuators, given as `(effort, limit)` pairs.
pub fn fos_motor(loads: &[(f64, f64)], reduction: MotorReduction) -> Result<f64, SafetyError> {
    if loads.is_empty() {
        return Err(SafetyError::EmptyEngagedSet);
    }
    let mut out = match reduction {
        MotorReduction::Max => f64::NEG_INFINITY,
        MotorReduction::Min => f64::INFINITY,
    };
    for (j, &(effort, limit)) in loads.iter().enumerate() {
        if !(limit > 0.0) {
            return Err(SafetyError::InvalidLimit(j));
        }
        let ratio = (effort.abs() / limit).min(1.0);
        out = match reduction {
            MotorReduction::Max => out.max(ratio),
            MotorReduction::Min => out.min(ratio),
        };
    }
    Ok(out.clamp(0.0, 1.0))
}

pub fn fos_combined(step: usize, contact_inv: f64, motor_inv: f64) -> FosSample {
    let contact_inv = contact_inv.clamp(0.0, 1.0);
    let motor_inv = motor_inv.clamp(0.0, 1.0);
    FosSample {
        step,
        contact_inv,
        motor_inv,
        combined_inv: contact_inv.max(motor_inv),
    }
}

/// Combined inverse FOS over a parameter grid at one critical event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FosField {
    pub n_m: usize,
    pub n_mu: usize,
    pub values: Vec<f64>,
    pub contact: Vec<f64>,
    pub motor: Vec<f64>,
    /// Grid points whose step failed to solve (value forced to 1).
    pub failed: Vec<usize>,
    pub event: usize,
}

impl FosField {
    /// A field holding the same value everywhere.
    pub fn constant(n_m: usize, n_mu: usize, value: f64) -> Self {
        let n = n_m * n_mu;
        Self {
            n_m,
            n_mu,
            values: vec![value; n],
            contact: vec![value; n],
            motor: vec![value; n],
            failed: Vec::new(),
            event: 0,
        }
    }
}

/// Expected field value under the grid weights.
pub fn safety_score(field: &FosField, weights: &[f64]) -> Result<f64, SafetyError> {
    if field.values.len() != weights.len() || field.values.len() != field.n_m * field.n_mu {
        return Err(SafetyError::DimensionMismatch {
            field: field.values.len(),
            weights: weights.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
        return Err(SafetyError::Unnormalized(total));
    }
    let s: f64 = field.values.iter().zip(weights).map(|(v, w)| v * w).sum();
    Ok(s.clamp(0.0, 1.0))
}

/// Strict comparison against the tolerance.
pub fn is_safe(score: f64, epsilon: f64) -> Result<bool, SafetyError> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(SafetyError::InvalidTolerance(epsilon));
    }
    Ok(score < epsilon)
}
