use nalgebra::{DMatrix, DVector};

use super::{LcpError, MlcpProblem, MlcpSolution};

#[derive(Debug, Clone, PartialEq)]
pub struct DirectOptions {
    /// Largest problem dimension accepted.
    pub max_size: usize,
    /// Pivot budget per inner solve; `0` selects `50 + 10 n`.
    pub max_pivots: usize,
    /// Outer fixed-point iterations refreshing friction bounds.
    pub friction_iterations: usize,
    pub tolerance: f64,
    pub warm_start: Option<DVector<f64>>,
}

impl Default for DirectOptions {
    fn default() -> Self {
        Self {
            max_size: 64,
            max_pivots: 0,
            friction_iterations: 10,
            tolerance: 1e-10,
            warm_start: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Free,
    Lower,
    Upper,
}

/// Exact active-set solution by block principal pivoting.
///
/// Each pivot fixes the rows at their active bound and solves the remaining
/// equations of the full (unreduced) system with an LU factorization, so
/// equality rows never need to be eliminated explicitly. Full block exchanges
/// are used while the number of infeasible rows keeps dropping; after three
/// non-improving exchanges the method falls back to single exchanges of the
/// largest infeasible index, which terminates for P-matrix problems.
pub fn solve_direct(problem: &MlcpProblem, opts: &DirectOptions) -> Result<MlcpSolution, LcpError> {
    problem.validate()?;
    let n = problem.dim();
    if n > opts.max_size {
        return Err(LcpError::CapExceeded {
            size: n,
            cap: opts.max_size,
        });
    }
    let max_pivots = if opts.max_pivots == 0 {
        50 + 10 * n
    } else {
        opts.max_pivots
    };
    let free = problem.free_rows();

    let mut guess = match &opts.warm_start {
        Some(y) if y.len() == n => y.clone(),
        _ => DVector::zeros(n),
    };
    let (lo, hi) = problem.bounds_at(&guess);
    let mut sides: Vec<Side> = (0..n)
        .map(|i| {
            if free[i] {
                Side::Free
            } else if guess[i] <= lo[i] {
                Side::Lower
            } else if guess[i] >= hi[i] {
                Side::Upper
            } else {
                Side::Free
            }
        })
        .collect();

    let outer = if problem.friction_links.is_empty() {
        1
    } else {
        opts.friction_iterations.max(1)
    };
    let mut total_pivots = 0;
    let mut last = None;
    for _ in 0..outer {
        let (lo, hi) = problem.bounds_at(&guess);
        let (y, pivots) = pivot(problem, &lo, &hi, &free, &mut sides, max_pivots)?;
        total_pivots += pivots;
        let sol = problem.finish(y, total_pivots);
        if sol.residual <= opts.tolerance {
            return Ok(sol);
        }
        guess = sol.y.clone();
        last = Some(sol);
    }
    let residual = last.map(|s| s.residual).unwrap_or(f64::INFINITY);
    if problem.friction_links.is_empty() {
        // a fixed-bound solve that does not meet tolerance means the pivoting
        // produced an inaccurate system solve
        return Err(LcpError::PivotFailure {
            pivots: total_pivots,
            reason: "linear solve did not reach tolerance",
        });
    }
    Err(LcpError::FrictionNotConverged {
        iterations: outer,
        residual,
    })
}

fn pivot(
    problem: &MlcpProblem,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    free: &[bool],
    sides: &mut [Side],
    max_pivots: usize,
) -> Result<(DVector<f64>, usize), LcpError> {
    let n = problem.dim();
    for i in 0..n {
        // keep the partition consistent with bounds that may have moved
        match sides[i] {
            Side::Lower if lo[i] == f64::NEG_INFINITY => sides[i] = Side::Free,
            Side::Upper if hi[i] == f64::INFINITY => sides[i] = Side::Free,
            _ => {}
        }
        if !free[i] && lo[i] == hi[i] {
            sides[i] = Side::Lower;
        }
    }

    let mut best = usize::MAX;
    let mut budget = 3;
    let mut pivots = 0;
    loop {
        let y = solve_partition(problem, lo, hi, sides)?;
        let w = &problem.h * &y - &problem.rhs;
        let scale = 1.0 + problem.rhs.amax().max(problem.h.amax() * y.amax());
        let tol_w = 1e-12 * scale;
        let tol_y = 1e-12 * (1.0 + y.amax());

        let infeasible: Vec<usize> = (0..n)
            .filter(|&i| {
                if free[i] || lo[i] == hi[i] {
                    return false;
                }
                match sides[i] {
                    Side::Free => y[i] < lo[i] - tol_y || y[i] > hi[i] + tol_y,
                    Side::Lower => w[i] < -tol_w,
                    Side::Upper => w[i] > tol_w,
                }
            })
            .collect();
        if infeasible.is_empty() {
            return Ok((y, pivots));
        }
        pivots += 1;
        if pivots > max_pivots {
            return Err(LcpError::PivotFailure {
                pivots,
                reason: "pivot budget exhausted (cycling)",
            });
        }

        let flip = |i: usize, side: Side| -> Side {
            match side {
                Side::Free if y[i] < lo[i] => Side::Lower,
                Side::Free => Side::Upper,
                Side::Lower | Side::Upper => Side::Free,
            }
        };
        if infeasible.len() < best {
            best = infeasible.len();
            budget = 3;
            for &i in &infeasible {
                sides[i] = flip(i, sides[i]);
            }
        } else if budget > 0 {
            budget -= 1;
            for &i in &infeasible {
                sides[i] = flip(i, sides[i]);
            }
        } else {
            let i = *infeasible.last().expect("non-empty");
            sides[i] = flip(i, sides[i]);
        }
    }
}

fn solve_partition(
    problem: &MlcpProblem,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    sides: &[Side],
) -> Result<DVector<f64>, LcpError> {
    let n = problem.dim();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for i in 0..n {
        match sides[i] {
            Side::Free => {
                a.row_mut(i).copy_from(&problem.h.row(i));
                b[i] = problem.rhs[i];
            }
            Side::Lower => {
                a[(i, i)] = 1.0;
                b[i] = lo[i];
            }
            Side::Upper => {
                a[(i, i)] = 1.0;
                b[i] = hi[i];
            }
        }
    }
    let lu = a.clone().lu();
    let mut y = lu.solve(&b).ok_or(LcpError::PivotFailure {
        pivots: 0,
        reason: "singular principal submatrix",
    })?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(LcpError::PivotFailure {
            pivots: 0,
            reason: "singular principal submatrix",
        });
    }
    // one step of iterative refinement
    let r = &b - &a * &y;
    if let Some(dy) = lu.solve(&r) {
        if dy.iter().all(|v| v.is_finite()) {
            y += dy;
        }
    }
    Ok(y)
}
