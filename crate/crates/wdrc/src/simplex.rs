//! Dense two-phase primal simplex for small linear programs.
//!
//! Solves `min c'x  s.t.  Ax = b, x >= 0` and returns an optimal basic
//! solution together with the dual vector of the equality constraints.
//! Intended for the transport problems that arise in this crate, where the
//! constraint matrix has at most a few hundred rows.

use crate::{Error, Result};
use nalgebra::DMatrix;

const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Dual multipliers of the equality constraints, one per row of `A`.
    pub duals: Vec<f64>,
}

/// Solve `min c'x : Ax = b, x >= 0` with a two-phase tableau simplex.
///
/// Redundant rows are tolerated; infeasibility and unboundedness are errors.
pub fn solve_equality_form(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Result<LpSolution> {
    let m = a.len();
    if m == 0 {
        return Err(Error::InvalidInput("empty constraint matrix".into()));
    }
    let n = a[0].len();
    if b.len() != m || c.len() != n || a.iter().any(|row| row.len() != n) {
        return Err(Error::DimensionMismatch(
            "simplex: inconsistent A, b, c sizes".into(),
        ));
    }

    // Tableau columns: n structural + m artificial + rhs.
    let width = n + m + 1;
    let mut t = vec![vec![0.0f64; width]; m];
    for i in 0..m {
        let flip = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[i][j] = flip * a[i][j];
        }
        t[i][n + i] = 1.0;
        t[i][width - 1] = flip * b[i];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    // Phase 1: minimize the sum of artificials.
    let mut cost1 = vec![0.0f64; width - 1];
    for j in n..n + m {
        cost1[j] = 1.0;
    }
    let obj1 = run_simplex(&mut t, &mut basis, &cost1, n + m)?;
    if obj1 > FEAS_TOL {
        return Err(Error::Numerical(format!(
            "simplex: infeasible (phase-1 objective {obj1:.3e})"
        )));
    }
    // Drive remaining artificials out of the basis where possible.
    for i in 0..m {
        if basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| t[i][j].abs() > PIVOT_TOL) {
                pivot(&mut t, &mut basis, i, j);
            }
        }
    }

    // Phase 2 on the structural columns only.
    let mut cost2 = vec![0.0f64; width - 1];
    cost2[..n].copy_from_slice(c);
    let objective = run_simplex(&mut t, &mut basis, &cost2, n)?;

    let mut x = vec![0.0f64; n];
    for (i, &bi) in basis.iter().enumerate() {
        if bi < n {
            x[bi] = t[i][width - 1];
        }
    }

    // Duals from B' y = c_B using the original data.
    let duals = recover_duals(a, c, &basis, m, n)?;

    Ok(LpSolution { x, objective, duals })
}

fn recover_duals(a: &[Vec<f64>], c: &[f64], basis: &[usize], m: usize, n: usize) -> Result<Vec<f64>> {
    let mut bt = DMatrix::<f64>::zeros(m, m);
    let mut cb = DMatrix::<f64>::zeros(m, 1);
    for (k, &j) in basis.iter().enumerate() {
        if j < n {
            for i in 0..m {
                bt[(k, i)] = a[i][j];
            }
            cb[(k, 0)] = c[j];
        } else {
            // Artificial column stuck in the basis on a redundant row.
            bt[(k, j - n)] = 1.0;
            cb[(k, 0)] = 0.0;
        }
    }
    let lu = bt.lu();
    let y = lu
        .solve(&cb)
        .ok_or_else(|| Error::Numerical("simplex: singular basis while recovering duals".into()))?;
    Ok(y.column(0).iter().copied().collect())
}

/// Dantzig-rule simplex with a Bland fallback after degenerate stalls.
/// `allowed` limits entering columns to indices `< allowed`.
fn run_simplex(
    t: &mut [Vec<f64>],
    basis: &mut [usize],
    cost: &[f64],
    allowed: usize,
) -> Result<f64> {
    let m = t.len();
    let width = t[0].len();
    let rhs = width - 1;
    let mut degenerate_streak = 0usize;
    let max_iters = 50 * (m + allowed).max(100);

    for _ in 0..max_iters {
        // Reduced costs r_j = c_j - c_B B^{-1} A_j, computed from the tableau.
        let mut entering: Option<usize> = None;
        let mut best = -PIVOT_TOL;
        let bland = degenerate_streak > 2 * m + 10;
        for j in 0..allowed {
            if basis.contains(&j) {
                continue;
            }
            let mut r = cost[j];
            for i in 0..m {
                r -= cost[basis[i]] * t[i][j];
            }
            if r < -PIVOT_TOL {
                if bland {
                    entering = Some(j);
                    break;
                }
                if r < best {
                    best = r;
                    entering = Some(j);
                }
            }
        }
        let Some(j) = entering else {
            let mut obj = 0.0;
            for i in 0..m {
                obj += cost[basis[i]] * t[i][rhs];
            }
            return Ok(obj);
        };

        // Ratio test.
        let mut leave: Option<usize> = None;
        let mut best_ratio = f64::INFINITY;
        for i in 0..m {
            if t[i][j] > PIVOT_TOL {
                let ratio = t[i][rhs] / t[i][j];
                if ratio < best_ratio - 1e-12 || (bland && ratio < best_ratio + 1e-12 && leave.map_or(true, |l| basis[i] < basis[l])) {
                    best_ratio = ratio;
                    leave = Some(i);
                }
            }
        }
        let Some(i) = leave else {
            return Err(Error::Numerical("simplex: unbounded linear program".into()));
        };
        if best_ratio < 1e-12 {
            degenerate_streak += 1;
        } else {
            degenerate_streak = 0;
        }
        pivot(t, basis, i, j);
    }
    Err(Error::NonConverged("simplex: iteration limit".into()))
}

fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], row: usize, col: usize) {
    let m = t.len();
    let width = t[0].len();
    let p = t[row][col];
    for j in 0..width {
        t[row][j] /= p;
    }
    for i in 0..m {
        if i != row {
            let f = t[i][col];
            if f != 0.0 {
                for j in 0..width {
                    t[i][j] -= f * t[row][j];
                }
            }
        }
    }
    basis[row] = col;
}
