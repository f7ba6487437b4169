//! Truncated-Gaussian parameter distributions and their quadrature grids.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use statrs::statistics::Distribution;
use thiserror::Error;

use crate::scenario::WorldParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("parameters ({0}, {1}) lie outside the domain")]
    OutsideDomain(f64, f64),
    #[error("invalid distribution: {0}")]
    InvalidSpec(String),
    #[error("grid needs at least 2 points per dimension, got {0}")]
    GridTooSmall(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub const fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Bounds of the mass (kg) and friction (dimensionless) parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamDomain {
    pub mass: Interval,
    pub friction: Interval,
}

impl Default for ParamDomain {
    fn default() -> Self {
        Self {
            mass: Interval::new(0.05, 2.0),
            friction: Interval::new(0.05, 1.5),
        }
    }
}

impl ParamDomain {
    pub fn contains(&self, theta: &WorldParams) -> bool {
        self.mass.contains(theta.theta_m) && self.friction.contains(theta.theta_mu)
    }

    pub fn validate(&self) -> Result<(), UncertaintyError> {
        for (name, i) in [("mass", self.mass), ("friction", self.friction)] {
            if !(i.lower.is_finite() && i.upper.is_finite() && i.lower < i.upper) {
                return Err(UncertaintyError::InvalidSpec(format!(
                    "{name} bounds must be finite with lower < upper"
                )));
            }
        }
        if self.mass.lower <= 0.0 || self.friction.lower < 0.0 {
            return Err(UncertaintyError::InvalidSpec(
                "mass must be positive and friction non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Independent truncated Gaussians over the domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSpec {
    pub mean: WorldParams,
    pub sigma: WorldParams,
    #[serde(default)]
    pub domain: ParamDomain,
}

/// One truncated normal on `[lower, upper]`.
#[derive(Debug, Clone, Copy)]
struct Truncated {
    normal: Normal,
    interval: Interval,
    mass: f64,
}

impl Truncated {
    fn new(mean: f64, sigma: f64, interval: Interval) -> Self {
        let normal = Normal::new(mean, sigma).expect("validated sigma");
        let mass = normal.cdf(interval.upper) - normal.cdf(interval.lower);
        Self { normal, interval, mass }
    }

    fn pdf(&self, x: f64) -> f64 {
        self.normal.pdf(x) / self.mass
    }

    fn mean(&self) -> f64 {
        // mu + sigma^2 (f(a) - f(b)) / Z with f the untruncated density
        let s = self.normal.std_dev().expect("normal has a std dev");
        let m = self.normal.mean().expect("normal has a mean");
        let v = m + s * s * (self.normal.pdf(self.interval.lower) - self.normal.pdf(self.interval.upper)) / self.mass;
        v.clamp(self.interval.lower, self.interval.upper)
    }
}

impl DistributionSpec {
    pub fn new(mean: WorldParams, sigma: WorldParams, domain: ParamDomain) -> Result<Self, UncertaintyError> {
        let spec = Self { mean, sigma, domain };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), UncertaintyError> {
        self.domain.validate()?;
        if !(self.sigma.theta_m > 0.0 && self.sigma.theta_mu > 0.0)
            || !(self.sigma.theta_m.is_finite() && self.sigma.theta_mu.is_finite())
        {
            return Err(UncertaintyError::InvalidSpec("sigma must be positive".into()));
        }
        if !self.domain.contains(&self.mean) {
            return Err(UncertaintyError::OutsideDomain(self.mean.theta_m, self.mean.theta_mu));
        }
        let spec_mass = self.marginals().map(|t| t.mass);
        if spec_mass.iter().any(|&z| !(z > 0.0)) {
            return Err(UncertaintyError::InvalidSpec(
                "distribution has no mass inside the domain".into(),
            ));
        }
        Ok(())
    }

    fn marginals(&self) -> [Truncated; 2] {
        [
            Truncated::new(self.mean.theta_m, self.sigma.theta_m, self.domain.mass),
            Truncated::new(self.mean.theta_mu, self.sigma.theta_mu, self.domain.friction),
        ]
    }

    /// Whether the spread exceeds the given per-dimension thresholds.
    pub fn is_wide(&self, thresholds: &WorldParams) -> bool {
        self.sigma.theta_m > thresholds.theta_m || self.sigma.theta_mu > thresholds.theta_mu
    }
}

pub fn density(spec: &DistributionSpec, theta: &WorldParams) -> Result<f64, UncertaintyError> {
    if !spec.domain.contains(theta) {
        return Err(UncertaintyError::OutsideDomain(theta.theta_m, theta.theta_mu));
    }
    let [m, mu] = spec.marginals();
    Ok(m.pdf(theta.theta_m) * mu.pdf(theta.theta_mu))
}

/// Expectation of the distribution (analytic truncated-normal mean).
pub fn nominal(spec: &DistributionSpec) -> WorldParams {
    let [m, mu] = spec.marginals();
    WorldParams::new(m.mean(), mu.mean())
}

/// Cell-centred tensor grid with normalized probability weights.
///
/// Points are stored mass-major: index `i_m * n_mu + i_mu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub n_m: usize,
    pub n_mu: usize,
    pub points: Vec<WorldParams>,
    pub weights: Vec<f64>,
}

impl ParamGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index(&self, i_m: usize, i_mu: usize) -> usize {
        i_m * self.n_mu + i_mu
    }

    /// Same points, weights recomputed from another distribution.
    pub fn reweighted(&self, spec: &DistributionSpec) -> Result<ParamGrid, UncertaintyError> {
        let raw = self
            .points
            .iter()
            .map(|p| density(spec, p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ParamGrid {
            weights: normalize(raw),
            ..self.clone()
        })
    }
}

fn normalize(raw: Vec<f64>) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn centres(interval: Interval, n: usize) -> Vec<f64> {
    let h = interval.width() / n as f64;
    (0..n).map(|i| interval.lower + (i as f64 + 0.5) * h).collect()
}

pub fn make_grid(spec: &DistributionSpec, n: usize) -> Result<ParamGrid, UncertaintyError> {
    if n < 2 {
        return Err(UncertaintyError::GridTooSmall(n));
    }
    spec.validate()?;
    let ms = centres(spec.domain.mass, n);
    let mus = centres(spec.domain.friction, n);
    let [pm, pmu] = spec.marginals();
    let area = spec.domain.mass.width() * spec.domain.friction.width() / (n * n) as f64;
    let mut points = Vec::with_capacity(n * n);
    let mut raw = Vec::with_capacity(n * n);
    for &m in &ms {
        for &mu in &mus {
            points.push(WorldParams::new(m, mu));
            raw.push(pm.pdf(m) * pmu.pdf(mu) * area);
        }
    }
    Ok(ParamGrid {
        n_m: n,
        n_mu: n,
        points,
        weights: normalize(raw),
    })
}

/// Result of a (emulated) probing action: a replacement mean and spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeResult {
    pub mean: WorldParams,
    pub sigma: WorldParams,
}

pub fn apply_probe(spec: &DistributionSpec, probe: &ProbeResult) -> Result<DistributionSpec, UncertaintyError> {
    DistributionSpec::new(probe.mean, probe.sigma, spec.domain)
}

/// Per-dimension closeness of two nominal parameter vectors.
pub fn nominal_close(a: &WorldParams, b: &WorldParams, tolerance: &WorldParams) -> bool {
    (a.theta_m - b.theta_m).abs() <= tolerance.theta_m && (a.theta_mu - b.theta_mu).abs() <= tolerance.theta_mu
}

pub const DEFAULT_NOMINAL_TOLERANCE: WorldParams = WorldParams::new(0.05, 0.1);
