//! Mixed linear complementarity problems with box bounds.
//!
//! A problem is the saddle system produced by one dynamics step,
//!
//! ```text
//! H y - rhs = w_l - w_u
//! 0 <= y - l  ⊥  w_l >= 0
//! 0 <= u - y  ⊥  w_u >= 0
//! ```
//!
//! where rows with bounds `(-inf, +inf)` are plain equalities. Coulomb friction
//! is expressed through [`FrictionLink`]s: the bounds of a tangential row are
//! `±mu * y[normal]` and get refreshed from the current normal multiplier while
//! solving ("box friction").
//!
//! Two solvers are provided: [`solve_pgs`] (projected Gauss-Seidel on the
//! Schur complement of the equality rows) and [`solve_direct`] (block principal
//! pivoting on the full system, with an outer fixed-point loop for friction).

mod direct;
mod pgs;

pub use direct::{solve_direct, DirectOptions};
pub use pgs::{solve_pgs, solve_pgs_traced, PgsOptions};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LcpError {
    #[error("zero diagonal entry in row {index}")]
    ZeroDiagonal { index: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid bounds at row {index}: lower {lower} > upper {upper}")]
    InvalidBounds { index: usize, lower: f64, upper: f64 },
    #[error("invalid friction link {index}: {reason}")]
    InvalidFrictionLink { index: usize, reason: &'static str },
    #[error("pivoting failed after {pivots} pivots: {reason}")]
    PivotFailure { pivots: usize, reason: &'static str },
    #[error("problem size {size} exceeds direct solver cap {cap}")]
    CapExceeded { size: usize, cap: usize },
    #[error("friction bounds did not settle within {iterations} outer iterations (residual {residual:e})")]
    FrictionNotConverged { iterations: usize, residual: f64 },
}

/// Coulomb coupling between a tangential row and its normal row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrictionLink {
    pub tangent: usize,
    pub normal: usize,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlcpProblem {
    pub h: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub friction_links: Vec<FrictionLink>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlcpSolution {
    pub y: DVector<f64>,
    pub w_lower: DVector<f64>,
    pub w_upper: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl MlcpProblem {
    /// Problem without friction links.
    pub fn new(
        h: DMatrix<f64>,
        rhs: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self, LcpError> {
        Self::with_friction(h, rhs, lower, upper, Vec::new())
    }

    pub fn with_friction(
        h: DMatrix<f64>,
        rhs: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
        friction_links: Vec<FrictionLink>,
    ) -> Result<Self, LcpError> {
        let p = Self {
            h,
            rhs,
            lower,
            upper,
            friction_links,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.rhs.len()
    }

    pub fn validate(&self) -> Result<(), LcpError> {
        let n = self.rhs.len();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(LcpError::DimensionMismatch(format!(
                "H is {}x{}, rhs has {n} entries",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(LcpError::DimensionMismatch(format!(
                "bounds have {} / {} entries, expected {n}",
                self.lower.len(),
                self.upper.len()
            )));
        }
        if self.h.iter().any(|v| !v.is_finite()) {
            return Err(LcpError::NonFinite { what: "H" });
        }
        if self.rhs.iter().any(|v| !v.is_finite()) {
            return Err(LcpError::NonFinite { what: "rhs" });
        }
        if self.lower.iter().chain(self.upper.iter()).any(|v| v.is_nan()) {
            return Err(LcpError::NonFinite { what: "bounds" });
        }
        for i in 0..n {
            if self.h[(i, i)] == 0.0 {
                return Err(LcpError::ZeroDiagonal { index: i });
            }
        }
        let mut linked = vec![false; n];
        for (k, link) in self.friction_links.iter().enumerate() {
            if link.tangent >= n || link.normal >= n {
                return Err(LcpError::InvalidFrictionLink {
                    index: k,
                    reason: "row index out of range",
                });
            }
            if link.tangent == link.normal {
                return Err(LcpError::InvalidFrictionLink {
                    index: k,
                    reason: "tangent and normal rows coincide",
                });
            }
            if !(link.mu.is_finite() && link.mu >= 0.0) {
                return Err(LcpError::InvalidFrictionLink {
                    index: k,
                    reason: "friction coefficient must be finite and non-negative",
                });
            }
            if linked[link.tangent] {
                return Err(LcpError::InvalidFrictionLink {
                    index: k,
                    reason: "tangent row linked twice",
                });
            }
            linked[link.tangent] = true;
        }
        for link in &self.friction_links {
            if linked[link.normal] {
                return Err(LcpError::InvalidFrictionLink {
                    index: link.tangent,
                    reason: "normal row is itself friction-linked",
                });
            }
        }
        for i in 0..n {
            if !linked[i] && self.lower[i] > self.upper[i] {
                return Err(LcpError::InvalidBounds {
                    index: i,
                    lower: self.lower[i],
                    upper: self.upper[i],
                });
            }
        }
        Ok(())
    }

    /// Bounds with friction-linked rows evaluated at `y`.
    pub fn bounds_at(&self, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let mut lo = self.lower.clone();
        let mut hi = self.upper.clone();
        for link in &self.friction_links {
            let cap = link.mu * y[link.normal].max(0.0);
            lo[link.tangent] = -cap;
            hi[link.tangent] = cap;
        }
        (lo, hi)
    }

    /// Rows that are pure equalities: unbounded on both sides and not friction-linked.
    pub(crate) fn free_rows(&self) -> Vec<bool> {
        let mut free: Vec<bool> = (0..self.dim())
            .map(|i| self.lower[i] == f64::NEG_INFINITY && self.upper[i] == f64::INFINITY)
            .collect();
        for link in &self.friction_links {
            free[link.tangent] = false;
        }
        free
    }

    /// Builds a solution record (slacks and residual) from a primal vector.
    pub(crate) fn finish(&self, y: DVector<f64>, iterations: usize) -> MlcpSolution {
        let w = &self.h * &y - &self.rhs;
        let w_lower = w.map(|v| v.max(0.0));
        let w_upper = w.map(|v| (-v).max(0.0));
        let mut sol = MlcpSolution {
            y,
            w_lower,
            w_upper,
            iterations,
            residual: 0.0,
        };
        sol.residual = residual_unchecked(self, &sol);
        sol
    }
}

/// Largest violation of the complementarity conditions and of the equation
/// `H y - rhs = w_l - w_u`. Friction-linked bounds are evaluated at the
/// solution's own normal multipliers. Zero for an exact solution.
pub fn complementarity_residual(
    problem: &MlcpProblem,
    solution: &MlcpSolution,
) -> Result<f64, LcpError> {
    let n = problem.dim();
    for (name, len) in [
        ("y", solution.y.len()),
        ("w_lower", solution.w_lower.len()),
        ("w_upper", solution.w_upper.len()),
    ] {
        if len != n {
            return Err(LcpError::DimensionMismatch(format!(
                "{name} has {len} entries, expected {n}"
            )));
        }
    }
    Ok(residual_unchecked(problem, solution))
}

fn residual_unchecked(problem: &MlcpProblem, solution: &MlcpSolution) -> f64 {
    let (lo, hi) = problem.bounds_at(&solution.y);
    let eq = &problem.h * &solution.y - &problem.rhs - (&solution.w_lower - &solution.w_upper);
    let mut worst = eq.amax();
    for i in 0..problem.dim() {
        let y = solution.y[i];
        // infinite gaps fall out naturally: min(inf, w) = w
        let a = (y - lo[i]).min(solution.w_lower[i]).abs();
        let b = (hi[i] - y).min(solution.w_upper[i]).abs();
        worst = worst.max(a).max(b);
    }
    worst
}

/// Schur-complement elimination of the equality rows.
///
/// With `E` the free rows and `B` the bounded ones, the bounded block becomes
/// `S y_B - q = w` with `S = H_BB - H_BE H_EE^-1 H_EB` and
/// `q = rhs_B - H_BE H_EE^-1 rhs_E`.
pub(crate) struct Reduced {
    pub bounded: Vec<usize>,
    pub free: Vec<usize>,
    pub s: DMatrix<f64>,
    pub q: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub links: Vec<FrictionLink>,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    h_eb: DMatrix<f64>,
    rhs_e: DVector<f64>,
}

impl Reduced {
    pub fn new(problem: &MlcpProblem) -> Result<Self, LcpError> {
        let is_free = problem.free_rows();
        let free: Vec<usize> = (0..problem.dim()).filter(|&i| is_free[i]).collect();
        let bounded: Vec<usize> = (0..problem.dim()).filter(|&i| !is_free[i]).collect();
        let mut pos = vec![usize::MAX; problem.dim()];
        for (k, &i) in bounded.iter().enumerate() {
            pos[i] = k;
        }
        let links = problem
            .friction_links
            .iter()
            .map(|l| FrictionLink {
                tangent: pos[l.tangent],
                normal: pos[l.normal],
                mu: l.mu,
            })
            .collect::<Vec<_>>();
        if links.iter().any(|l| l.normal == usize::MAX) {
            return Err(LcpError::InvalidFrictionLink {
                index: 0,
                reason: "normal row is unbounded",
            });
        }
        let pick = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |r, c| problem.h[(rows[r], cols[c])])
        };
        let h_bb = pick(&bounded, &bounded);
        let rhs_b = DVector::from_iterator(bounded.len(), bounded.iter().map(|&i| problem.rhs[i]));
        let lower = DVector::from_iterator(bounded.len(), bounded.iter().map(|&i| problem.lower[i]));
        let upper = DVector::from_iterator(bounded.len(), bounded.iter().map(|&i| problem.upper[i]));
        let h_eb = pick(&free, &bounded);
        let rhs_e = DVector::from_iterator(free.len(), free.iter().map(|&i| problem.rhs[i]));

        if free.is_empty() {
            return Ok(Self {
                bounded,
                free,
                s: h_bb,
                q: rhs_b,
                lower,
                upper,
                links,
                lu: None,
                h_eb,
                rhs_e,
            });
        }
        let h_ee = pick(&free, &free);
        let h_be = pick(&bounded, &free);
        let lu = h_ee.lu();
        let x_eb = lu.solve(&h_eb).ok_or(LcpError::PivotFailure {
            pivots: 0,
            reason: "singular equality block",
        })?;
        let x_e = lu.solve(&rhs_e).ok_or(LcpError::PivotFailure {
            pivots: 0,
            reason: "singular equality block",
        })?;
        let s = h_bb - &h_be * x_eb;
        let q = rhs_b - &h_be * x_e;
        Ok(Self {
            bounded,
            free,
            s,
            q,
            lower,
            upper,
            links,
            lu: Some(lu),
            h_eb,
            rhs_e,
        })
    }

    /// Rebuilds the full primal vector from the bounded part.
    pub fn expand(&self, n: usize, y_b: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(n);
        for (k, &i) in self.bounded.iter().enumerate() {
            y[i] = y_b[k];
        }
        if let Some(lu) = &self.lu {
            let rhs = &self.rhs_e - &self.h_eb * y_b;
            // the LU already succeeded once, so the solve cannot fail here
            let y_e = lu.solve(&rhs).unwrap_or_else(|| DVector::zeros(self.free.len()));
            for (k, &i) in self.free.iter().enumerate() {
                y[i] = y_e[k];
            }
        }
        y
    }
}
