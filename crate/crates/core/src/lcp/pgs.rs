use nalgebra::DVector;

use super::{LcpError, MlcpProblem, MlcpSolution, Reduced};

#[derive(Debug, Clone, PartialEq)]
pub struct PgsOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Successive over-relaxation factor, in (0, 2).
    pub relaxation: f64,
    pub warm_start: Option<DVector<f64>>,
}

impl Default for PgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            tolerance: 1e-8,
            relaxation: 1.0,
            warm_start: None,
        }
    }
}

/// Projected Gauss-Seidel.
///
/// Equality rows are eliminated first (Schur complement), then the bounded
/// rows are swept in index order. Friction-linked bounds are refreshed from
/// the current normal multiplier right before each tangential update.
pub fn solve_pgs(problem: &MlcpProblem, opts: &PgsOptions) -> Result<MlcpSolution, LcpError> {
    solve_pgs_traced(problem, opts).map(|(sol, _)| sol)
}

/// Same as [`solve_pgs`], also returning the residual of the reduced problem
/// after every sweep.
pub fn solve_pgs_traced(
    problem: &MlcpProblem,
    opts: &PgsOptions,
) -> Result<(MlcpSolution, Vec<f64>), LcpError> {
    problem.validate()?;
    if !(opts.relaxation > 0.0 && opts.relaxation < 2.0) {
        return Err(LcpError::NonFinite {
            what: "relaxation factor outside (0, 2)",
        });
    }
    let n = problem.dim();
    let red = Reduced::new(problem)?;
    let m = red.bounded.len();
    for k in 0..m {
        if !(red.s[(k, k)].abs() > 0.0) || !red.s[(k, k)].is_finite() {
            return Err(LcpError::ZeroDiagonal {
                index: red.bounded[k],
            });
        }
    }
    let mut tangent_of = vec![None; m];
    for link in &red.links {
        tangent_of[link.tangent] = Some((link.normal, link.mu));
    }

    let mut y = DVector::zeros(m);
    if let Some(ws) = &opts.warm_start {
        if ws.len() == n {
            for (k, &i) in red.bounded.iter().enumerate() {
                y[k] = ws[i];
            }
        }
    }
    for k in 0..m {
        let (lo, hi) = bounds(&red, &tangent_of, &y, k);
        y[k] = y[k].clamp(lo, hi);
    }

    let mut history = Vec::new();
    let mut sweeps = 0;
    if m > 0 {
        while sweeps < opts.max_iterations {
            sweeps += 1;
            for k in 0..m {
                let r = red.q[k] - red.s.row(k).dot(&y.transpose());
                let trial = y[k] + opts.relaxation * r / red.s[(k, k)];
                let (lo, hi) = bounds(&red, &tangent_of, &y, k);
                y[k] = trial.clamp(lo, hi);
            }
            let res = reduced_residual(&red, &tangent_of, &y);
            history.push(res);
            if res <= opts.tolerance {
                break;
            }
        }
    }
    let full = red.expand(n, &y);
    Ok((problem.finish(full, sweeps), history))
}

fn bounds(red: &Reduced, tangent_of: &[Option<(usize, f64)>], y: &DVector<f64>, k: usize) -> (f64, f64) {
    match tangent_of[k] {
        Some((normal, mu)) => {
            let cap = mu * y[normal].max(0.0);
            (-cap, cap)
        }
        None => (red.lower[k], red.upper[k]),
    }
}

fn reduced_residual(red: &Reduced, tangent_of: &[Option<(usize, f64)>], y: &DVector<f64>) -> f64 {
    let w = &red.s * y - &red.q;
    let mut worst: f64 = 0.0;
    for k in 0..y.len() {
        let (lo, hi) = bounds(red, tangent_of, y, k);
        let a = (y[k] - lo).min(w[k].max(0.0)).abs();
        let b = (hi - y[k]).min((-w[k]).max(0.0)).abs();
        worst = worst.max(a).max(b);
    }
    worst
}
