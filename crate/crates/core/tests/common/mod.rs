//! Shared test helpers: random mixed LCP generator and a brute-force
//! active-set enumeration oracle that does not use the crate's solvers.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use physfilter::lcp::MlcpProblem;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activity {
    Lower,
    Upper,
    Free,
}

/// Saddle-structured problem `[A, -B^T; B, D]` with `A` SPD on the free rows
/// and `D` SPD on the bounded rows.
pub fn random_mlcp<R: Rng>(rng: &mut R, max_n: usize) -> MlcpProblem {
    let n_free = rng.random_range(0..=3usize.min(max_n - 1));
    let n_b = rng.random_range(1..=(max_n - n_free));
    let n = n_free + n_b;

    let q = DMatrix::from_fn(n_free, n_free, |_, _| rng.random_range(-1.0..1.0));
    let a = &q * q.transpose() + DMatrix::identity(n_free, n_free) * rng.random_range(0.5..2.0);
    let b = DMatrix::from_fn(n_b, n_free, |_, _| rng.random_range(-1.0..1.0));
    let c = DMatrix::from_fn(n_b, n_b, |_, _| rng.random_range(-0.5..0.5));
    let d = &c * c.transpose() + DMatrix::identity(n_b, n_b) * rng.random_range(0.2..1.5);

    let mut h = DMatrix::zeros(n, n);
    h.view_mut((0, 0), (n_free, n_free)).copy_from(&a);
    h.view_mut((0, n_free), (n_free, n_b)).copy_from(&(-b.transpose()));
    h.view_mut((n_free, 0), (n_b, n_free)).copy_from(&b);
    h.view_mut((n_free, n_free), (n_b, n_b)).copy_from(&d);

    let rhs = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(n, f64::INFINITY);
    for i in n_free..n {
        match rng.random_range(0..4) {
            0 => lower[i] = 0.0,
            1 => {
                lower[i] = -rng.random_range(0.1..1.5);
                upper[i] = rng.random_range(0.1..1.5);
            }
            2 => upper[i] = rng.random_range(-0.5..1.0),
            _ => {
                lower[i] = rng.random_range(-1.0..0.0);
                upper[i] = lower[i] + rng.random_range(0.2..2.0);
            }
        }
    }
    MlcpProblem::new(h, rhs, lower, upper).expect("valid random problem")
}

/// Enumerates every bound-activity pattern of the bounded rows and returns
/// the feasible ones with their primal vectors.
pub fn enumerate_active_sets(p: &MlcpProblem, tol: f64) -> Vec<(Vec<Activity>, DVector<f64>)> {
    let n = p.h.nrows();
    let bounded: Vec<usize> = (0..n)
        .filter(|&i| p.lower[i].is_finite() || p.upper[i].is_finite())
        .collect();
    let mut found = Vec::new();
    let total = 3usize.pow(bounded.len() as u32);
    'pattern: for code in 0..total {
        let mut pattern = vec![Activity::Free; n];
        let mut c = code;
        for &i in &bounded {
            pattern[i] = match c % 3 {
                0 => Activity::Free,
                1 => Activity::Lower,
                _ => Activity::Upper,
            };
            c /= 3;
            if (pattern[i] == Activity::Lower && !p.lower[i].is_finite())
                || (pattern[i] == Activity::Upper && !p.upper[i].is_finite())
            {
                continue 'pattern;
            }
        }
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for i in 0..n {
            match pattern[i] {
                Activity::Free => {
                    a.row_mut(i).copy_from(&p.h.row(i));
                    b[i] = p.rhs[i];
                }
                Activity::Lower => {
                    a[(i, i)] = 1.0;
                    b[i] = p.lower[i];
                }
                Activity::Upper => {
                    a[(i, i)] = 1.0;
                    b[i] = p.upper[i];
                }
            }
        }
        let Some(y) = a.lu().solve(&b) else { continue };
        let w = &p.h * &y - &p.rhs;
        let ok = (0..n).all(|i| match pattern[i] {
            Activity::Free => y[i] >= p.lower[i] - tol && y[i] <= p.upper[i] + tol,
            Activity::Lower => w[i] >= -tol,
            Activity::Upper => w[i] <= tol,
        });
        if ok {
            found.push((pattern, y));
        }
    }
    found
}

pub fn classify(p: &MlcpProblem, y: &DVector<f64>, tol: f64) -> Vec<Activity> {
    (0..y.len())
        .map(|i| {
            if p.lower[i].is_finite() && (y[i] - p.lower[i]).abs() <= tol {
                Activity::Lower
            } else if p.upper[i].is_finite() && (p.upper[i] - y[i]).abs() <= tol {
                Activity::Upper
            } else {
                Activity::Free
            }
        })
        .collect()
}
