//! Dual-reformulated Bellman operators for Wasserstein DR control.
//!
//! The ball-constrained operator `T` is evaluated through its Kantorovich
//! dual: an outer minimization over actions and a one-dimensional convex
//! minimization over the multiplier `lambda >= 0` of
//!
//! ```text
//! g_u(lambda) = lambda theta^p + c(x,u)
//!             + (1/N) sum_i max_{w in w_grid} [alpha v(f(x,u,w)) - lambda d(w, w_i)^p]
//! ```
//!
//! The inner sup over the disturbance support is discretized on a finite
//! `w_grid` that always contains the sample atoms. `g_u` is convex piecewise
//! linear in `lambda` and is minimized by golden-section search.

use crate::distributions::{EmpiricalDistribution, GroundMetric};
use crate::problem::{ControlProblem, Grid, GridValueFunction, StationaryPolicy};
use crate::{Error, Result};
use std::sync::Arc;

/// Wasserstein ambiguity description shared by the DP machinery: the
/// empirical center, the radius, the ground metric, and the disturbance
/// discretization.
#[derive(Debug, Clone)]
pub struct Ambiguity {
    pub nu: EmpiricalDistribution,
    pub theta: f64,
    pub metric: GroundMetric,
    w_grid: Vec<Vec<f64>>,
    /// cost[i][j] = d(w_grid[j], sample_i)^p
    cost: Vec<Vec<f64>>,
    min_positive_cost: f64,
}

impl Ambiguity {
    /// Build from an explicit disturbance grid. Sample atoms missing from the
    /// grid are appended so the discretization always supports `nu` exactly.
    pub fn new(
        nu: EmpiricalDistribution,
        theta: f64,
        metric: GroundMetric,
        mut w_grid: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if theta < 0.0 {
            return Err(Error::InvalidInput(format!("radius theta = {theta} must be >= 0")));
        }
        let l = nu.dim();
        if w_grid.iter().any(|w| w.len() != l) {
            return Err(Error::DimensionMismatch("w_grid atom dimension".into()));
        }
        for atom in nu.atoms() {
            if !w_grid.iter().any(|w| w == atom) {
                w_grid.push(atom.clone());
            }
        }
        let cost: Vec<Vec<f64>> = nu
            .atoms()
            .iter()
            .map(|s| w_grid.iter().map(|w| metric.cost(w, s)).collect())
            .collect();
        let min_positive_cost = cost
            .iter()
            .flatten()
            .copied()
            .filter(|&c| c > 0.0)
            .fold(f64::INFINITY, f64::min);
        Ok(Self { nu, theta, metric, w_grid, cost, min_positive_cost })
    }

    /// Uniform grid over the box `[lower, upper]` with `counts[d]` points per
    /// dimension, plus the sample atoms.
    pub fn with_uniform_grid(
        nu: EmpiricalDistribution,
        theta: f64,
        metric: GroundMetric,
        lower: &[f64],
        upper: &[f64],
        counts: &[usize],
    ) -> Result<Self> {
        let grid = Grid::uniform(lower, upper, counts)?;
        let pts = (0..grid.node_count()).map(|k| grid.coords(k)).collect();
        Self::new(nu, theta, metric, pts)
    }

    pub fn w_grid(&self) -> &[Vec<f64>] {
        &self.w_grid
    }

    pub fn with_theta(&self, theta: f64) -> Result<Self> {
        if theta < 0.0 {
            return Err(Error::InvalidInput(format!("radius theta = {theta} must be >= 0")));
        }
        let mut out = self.clone();
        out.theta = theta;
        Ok(out)
    }

    fn n(&self) -> usize {
        self.nu.len()
    }
}

/// Knobs for the dual search.
#[derive(Debug, Clone)]
pub struct BellmanOpts {
    /// Golden-section iterations for the 1-D search over lambda.
    pub lambda_iters: usize,
    /// Override for the upper end of the lambda search interval.
    pub lambda_max: Option<f64>,
    /// Coordinate-descent refinement rounds for box action sets.
    pub refine_rounds: usize,
    /// Golden-section iterations per refined coordinate.
    pub refine_iters: usize,
}

impl Default for BellmanOpts {
    fn default() -> Self {
        Self { lambda_iters: 64, lambda_max: None, refine_rounds: 2, refine_iters: 20 }
    }
}

impl BellmanOpts {
    /// Cheaper settings for bulk Monte Carlo trials.
    pub fn fast() -> Self {
        Self { lambda_iters: 28, lambda_max: None, refine_rounds: 0, refine_iters: 0 }
    }
}

/// Result of one Bellman solve at a state.
#[derive(Debug, Clone)]
pub struct BellmanSolveResult {
    pub value: f64,
    pub action: Vec<f64>,
    /// Optimal dual multiplier (0 when theta = 0 makes it arbitrary; the
    /// reported value then matches the SAA update).
    pub lambda: f64,
    /// Per-sample inner values `l_i`.
    pub inner: Vec<f64>,
}

/// Finitely supported worst-case distribution at a state.
#[derive(Debug, Clone)]
pub struct WorstCaseDistribution {
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// `theta^p - transport budget` of the extracted atoms. Zero when the
    /// complementary-slackness split is exactly attainable on the grid;
    /// nonzero slack is reported rather than forced.
    pub budget_residual: f64,
}

impl WorstCaseDistribution {
    pub fn to_distribution(&self) -> Result<EmpiricalDistribution> {
        EmpiricalDistribution::new(self.atoms.clone(), self.weights.clone())
    }
}

/// alpha * v(f(x, u, w_j)) for every grid disturbance, with clamping.
fn next_values(
    v: &GridValueFunction,
    problem: &ControlProblem,
    x: &[f64],
    u: &[f64],
    w_grid: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let mut a = Vec::with_capacity(w_grid.len());
    for w in w_grid {
        let next = (problem.dynamics)(x, u, w);
        let (val, _) = v.evaluate_clamping(&next)?;
        if !val.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value at next state {next:?} (from x = {x:?}, u = {u:?})"
            )));
        }
        a.push(problem.alpha * val);
    }
    Ok(a)
}

/// g_u(lambda) minus the `c(x,u)` offset: `lambda theta^p + (1/N) sum_i max_j (...)`.
fn dual_objective(lambda: f64, theta_p: f64, a: &[f64], cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let mut sum = 0.0;
    for row in cost {
        let mut best = f64::NEG_INFINITY;
        for (aj, cij) in a.iter().zip(row) {
            let s = aj - lambda * cij;
            if s > best {
                best = s;
            }
        }
        sum += best;
    }
    lambda * theta_p + sum / n as f64
}

fn default_lambda_max(a: &[f64], amb: &Ambiguity, alpha: f64) -> f64 {
    let vmax = a.iter().fold(0.0f64, |m, &x| m.max(x.abs())) / alpha.max(1e-12);
    let denom = if amb.min_positive_cost.is_finite() { amb.min_positive_cost } else { 1.0 };
    (10.0 * alpha * vmax / denom).clamp(1.0, 1e9)
}

/// Minimize the convex piecewise-linear dual objective over `lambda >= 0`.
/// Returns `(lambda_star, objective)`; `warm` narrows the search interval.
fn minimize_dual(
    theta_p: f64,
    a: &[f64],
    cost: &[Vec<f64>],
    lam_max: f64,
    iters: usize,
    warm: Option<f64>,
) -> (f64, f64) {
    let eval = |lam: f64| dual_objective(lam, theta_p, a, cost);

    let (mut lo, mut hi) = match warm {
        Some(l) if l > 0.0 => ((l / 16.0).max(0.0), (l * 16.0).min(lam_max).max(1e-12)),
        _ => (0.0, lam_max),
    };
    loop {
        let (lam, val) = golden_min(&eval, lo, hi, iters);
        // If the warm window pinched the minimizer against its boundary,
        // widen to the full interval once.
        let full = lo <= 0.0 && hi >= lam_max * (1.0 - 1e-12);
        let at_edge = lam <= lo + (hi - lo) * 1e-3 && lo > 0.0
            || lam >= hi - (hi - lo) * 1e-3 && hi < lam_max * (1.0 - 1e-12);
        if full || !at_edge {
            // Always consider the boundary lambda = 0 explicitly.
            let v0 = eval(0.0);
            if v0 <= val {
                return (0.0, v0);
            }
            return (lam, val);
        }
        lo = 0.0;
        hi = lam_max;
    }
}

fn golden_min(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    let mid = 0.5 * (lo + hi);
    let fm = f(mid);
    if fm <= f1 && fm <= f2 {
        (mid, fm)
    } else if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Per-sample inner values at the optimal multiplier.
fn inner_values(lambda: f64, a: &[f64], cost: &[Vec<f64>]) -> Vec<f64> {
    cost.iter()
        .map(|row| {
            a.iter()
                .zip(row)
                .map(|(aj, cij)| aj - lambda * cij)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Evaluate the dual problem for a fixed action, returning
/// `(value, lambda, inner)` where `value = lambda theta^p + c + (1/N) sum inner`.
fn solve_fixed_action(
    v: &GridValueFunction,
    problem: &ControlProblem,
    amb: &Ambiguity,
    x: &[f64],
    u: &[f64],
    opts: &BellmanOpts,
    warm: Option<f64>,
) -> Result<(f64, f64, Vec<f64>)> {
    let a = next_values(v, problem, x, u, amb.w_grid())?;
    let cxu = (problem.stage_cost)(x, u);
    let theta_p = amb.theta.powf(amb.metric.order());
    if amb.theta == 0.0 {
        // Zero-radius ball: lambda -> infinity collapses the inner max onto
        // the zero-cost (sample) atoms, i.e. the SAA update.
        let mut inner_saa = Vec::with_capacity(amb.n());
        for row in &amb.cost {
            let mut best = f64::NEG_INFINITY;
            for (aj, cij) in a.iter().zip(row) {
                if *cij == 0.0 && *aj > best {
                    best = *aj;
                }
            }
            inner_saa.push(best);
        }
        let value = cxu + inner_saa.iter().sum::<f64>() / amb.n() as f64;
        return Ok((value, 0.0, inner_saa));
    }
    let lam_max = opts.lambda_max.unwrap_or_else(|| default_lambda_max(&a, amb, problem.alpha));
    let (lambda, obj) = minimize_dual(theta_p, &a, &amb.cost, lam_max, opts.lambda_iters, warm);
    let inner = inner_values(lambda, &a, &amb.cost);
    let value = cxu + obj;
    Ok((value, lambda, inner))
}

/// The ball-constrained Bellman operator `T` at a single state.
pub fn apply_t(
    v: &GridValueFunction,
    x: &[f64],
    problem: &ControlProblem,
    amb: &Ambiguity,
    opts: &BellmanOpts,
) -> Result<BellmanSolveResult> {
    apply_t_warm(v, x, problem, amb, opts, None)
}

/// `apply_t` with a warm-started dual multiplier from a previous sweep.
pub fn apply_t_warm(
    v: &GridValueFunction,
    x: &[f64],
    problem: &ControlProblem,
    amb: &Ambiguity,
    opts: &BellmanOpts,
    warm_lambda: Option<f64>,
) -> Result<BellmanSolveResult> {
    let candidates = problem.action_set.candidates(x);
    if candidates.is_empty() {
        return Err(Error::Config(format!("empty action candidate set at x = {x:?}")));
    }
    let mut best: Option<BellmanSolveResult> = None;
    for u in candidates {
        let (value, lambda, inner) = solve_fixed_action(v, problem, amb, x, &u, opts, warm_lambda)?;
        if best.as_ref().map_or(true, |b| value < b.value) {
            best = Some(BellmanSolveResult { value, action: u, lambda, inner });
        }
    }
    let mut best = best.unwrap();

    // Local golden-section refinement along coordinates for box action sets.
    if let (Some((lower, upper)), true) = (problem.action_set.refinement_box(), opts.refine_rounds > 0) {
        let steps: Vec<f64> = lower
            .iter()
            .zip(upper)
            .map(|(&lo, &hi)| (hi - lo) / 4.0)
            .collect();
        for round in 0..opts.refine_rounds {
            let shrink = 0.5f64.powi(round as i32);
            for d in 0..lower.len() {
                let h = steps[d] * shrink;
                let lo = (best.action[d] - h).max(lower[d]);
                let hi = (best.action[d] + h).min(upper[d]);
                if hi <= lo {
                    continue;
                }
                let base = best.action.clone();
                let eval = |t: f64| -> f64 {
                    let mut u = base.clone();
                    u[d] = t;
                    solve_fixed_action(v, problem, amb, x, &u, opts, Some(best.lambda))
                        .map(|(val, _, _)| val)
                        .unwrap_or(f64::INFINITY)
                };
                let (t, val) = golden_min(&eval, lo, hi, opts.refine_iters);
                if val < best.value {
                    let mut u = best.action.clone();
                    u[d] = t;
                    let (value, lambda, inner) =
                        solve_fixed_action(v, problem, amb, x, &u, opts, Some(best.lambda))?;
                    best = BellmanSolveResult { value, action: u, lambda, inner };
                }
            }
        }
    }
    Ok(best)
}

/// The policy-evaluation operator `T^pi` at a single state, together with a
/// worst-case distribution extracted from the dual solution (the N+1-atom
/// form: per-sample argmax atoms plus one split atom chosen so the transport
/// budget meets `theta^p` under complementary slackness).
pub fn apply_t_pi(
    v: &GridValueFunction,
    x: &[f64],
    policy: &StationaryPolicy,
    problem: &ControlProblem,
    amb: &Ambiguity,
    opts: &BellmanOpts,
) -> Result<(f64, WorstCaseDistribution)> {
    let u = policy.action(x)?;
    apply_t_pi_action(v, x, &u, problem, amb, opts, None)
}

/// `apply_t_pi` with the action given explicitly and an optional warm lambda.
pub fn apply_t_pi_action(
    v: &GridValueFunction,
    x: &[f64],
    u: &[f64],
    problem: &ControlProblem,
    amb: &Ambiguity,
    opts: &BellmanOpts,
    warm_lambda: Option<f64>,
) -> Result<(f64, WorstCaseDistribution)> {
    let (value, lambda, _) = solve_fixed_action(v, problem, amb, x, u, opts, warm_lambda)?;

    let n = amb.n();
    let theta_p = amb.theta.powf(amb.metric.order());

    if amb.theta == 0.0 {
        // Zero radius: the worst case is the empirical distribution itself.
        return Ok((
            value,
            WorstCaseDistribution {
                atoms: amb.nu.atoms().to_vec(),
                weights: amb.nu.weights().to_vec(),
                budget_residual: 0.0,
            },
        ));
    }

    let a = next_values(v, problem, x, u, amb.w_grid())?;

    // Per-sample argmax sets at lambda*, with deterministic tie-breaking:
    // smallest transport cost first, then lexicographic grid order.
    let mut cheap = vec![0usize; n];
    let mut expensive = vec![0usize; n];
    for i in 0..n {
        let row = &amb.cost[i];
        let scores: Vec<f64> = a.iter().zip(row).map(|(aj, cij)| aj - lambda * cij).collect();
        let m = scores.iter().fold(f64::NEG_INFINITY, |acc, &s| acc.max(s));
        // lambda* comes from a golden search, so ties at dual kinks are only
        // approximate; absorb the multiplier error (~1e-4 relative) times the
        // transport cost into the tie tolerance.
        let row_max = row.iter().fold(0.0f64, |acc, &c| acc.max(c));
        let tol = 1e-9 * (1.0 + m.abs()) + 1e-4 * (1.0 + lambda) * row_max;
        let mut ch: Option<usize> = None;
        let mut ex: Option<usize> = None;
        for (j, &s) in scores.iter().enumerate() {
            if s >= m - tol {
                if ch.map_or(true, |c| row[j] < row[c] - 1e-15) {
                    ch = Some(j);
                }
                if ex.map_or(true, |e| row[j] > row[e] + 1e-15) {
                    ex = Some(j);
                }
            }
        }
        cheap[i] = ch.unwrap();
        expensive[i] = ex.unwrap_or(cheap[i]);
    }

    let grid_atoms = amb.w_grid();
    let (atoms, weights, residual) = if lambda <= 1e-12 {
        // Unconstrained adversary on the grid: all mass to the argmax atoms.
        let atoms: Vec<Vec<f64>> = cheap.iter().map(|&j| grid_atoms[j].clone()).collect();
        let budget: f64 = cheap.iter().enumerate().map(|(i, &j)| amb.cost[i][j]).sum::<f64>() / n as f64;
        (atoms, vec![1.0 / n as f64; n], theta_p - budget)
    } else {
        // Greedy budget split: start from the cheapest atoms and move samples
        // to their expensive alternative until the budget theta^p is met.
        let inv_n = 1.0 / n as f64;
        let mut choice = cheap.clone();
        let mut budget: f64 = choice.iter().enumerate().map(|(i, &j)| amb.cost[i][j]).sum::<f64>() * inv_n;
        let mut atoms: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        let mut weights: Vec<f64> = Vec::with_capacity(n + 1);
        let mut split: Option<(usize, f64)> = None;

        if budget < theta_p {
            for i in 0..n {
                if cheap[i] == expensive[i] {
                    continue;
                }
                let delta = (amb.cost[i][expensive[i]] - amb.cost[i][cheap[i]]) * inv_n;
                if budget + delta <= theta_p + 1e-15 {
                    choice[i] = expensive[i];
                    budget += delta;
                } else {
                    // Split sample i between its cheap and expensive atom so
                    // the budget lands exactly on theta^p.
                    let p0 = 1.0 - (theta_p - budget) / delta;
                    split = Some((i, p0.clamp(0.0, 1.0)));
                    budget = theta_p;
                    break;
                }
            }
        }
        for i in 0..n {
            match split {
                Some((i0, p0)) if i == i0 => {
                    atoms.push(grid_atoms[cheap[i]].clone());
                    weights.push(p0 * inv_n);
                    atoms.push(grid_atoms[expensive[i]].clone());
                    weights.push((1.0 - p0) * inv_n);
                }
                _ => {
                    atoms.push(grid_atoms[choice[i]].clone());
                    weights.push(inv_n);
                }
            }
        }
        (atoms, weights, theta_p - budget)
    };

    let (atoms, weights) = merge_atoms(atoms, weights);
    Ok((value, WorstCaseDistribution { atoms, weights, budget_residual: residual }))
}

fn merge_atoms(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut out_a: Vec<Vec<f64>> = Vec::new();
    let mut out_w: Vec<f64> = Vec::new();
    for (a, w) in atoms.into_iter().zip(weights) {
        if w <= 0.0 {
            continue;
        }
        if let Some(k) = out_a.iter().position(|b| *b == a) {
            out_w[k] += w;
        } else {
            out_a.push(a);
            out_w.push(w);
        }
    }
    (out_a, out_w)
}

/// The penalty Bellman operator `T'_lambda` at a single state. Returns the
/// value, the minimizing action, and the per-sample argmax atoms.
pub fn apply_t_penalty(
    v: &GridValueFunction,
    x: &[f64],
    lambda: f64,
    problem: &ControlProblem,
    amb: &Ambiguity,
) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    if lambda <= 0.0 {
        return Err(Error::InvalidInput(format!("penalty lambda = {lambda} must be > 0")));
    }
    let candidates = problem.action_set.candidates(x);
    if candidates.is_empty() {
        return Err(Error::Config(format!("empty action candidate set at x = {x:?}")));
    }
    let n = amb.n();
    let mut best: Option<(f64, Vec<f64>, Vec<usize>)> = None;
    for u in candidates {
        let a = next_values(v, problem, x, &u, amb.w_grid())?;
        let mut total = (problem.stage_cost)(x, &u);
        let mut argmax = vec![0usize; n];
        for i in 0..n {
            let row = &amb.cost[i];
            let mut m = f64::NEG_INFINITY;
            let mut mj = 0usize;
            for (j, (aj, cij)) in a.iter().zip(row).enumerate() {
                let s = aj - lambda * cij;
                if s > m + 1e-15 || (s > m - 1e-15 && row[j] < row[mj]) {
                    m = m.max(s);
                    mj = j;
                }
            }
            total += m / n as f64;
            argmax[i] = mj;
        }
        if best.as_ref().map_or(true, |b| total < b.0) {
            best = Some((total, u, argmax));
        }
    }
    let (value, u, argmax) = best.unwrap();
    let atoms = argmax.iter().map(|&j| amb.w_grid()[j].clone()).collect();
    Ok((value, u, atoms))
}

/// Check the penalty duality identity `T v = min_lambda [T'_lambda v + lambda theta^p]`.
/// Returns `(lhs, rhs)`; `lambda_grid` seeds the outer minimization and is
/// refined by golden-section around the best grid point.
pub fn penalty_duality_check(
    v: &GridValueFunction,
    x: &[f64],
    problem: &ControlProblem,
    amb: &Ambiguity,
    opts: &BellmanOpts,
    lambda_grid: &[f64],
) -> Result<(f64, f64)> {
    if lambda_grid.is_empty() {
        return Err(Error::InvalidInput("empty lambda grid".into()));
    }
    let lhs = apply_t(v, x, problem, amb, opts)?.value;

    let theta_p = amb.theta.powf(amb.metric.order());
    let eval = |lam: f64| -> Result<f64> {
        let (val, _, _) = apply_t_penalty(v, x, lam.max(1e-12), problem, amb)?;
        Ok(val + lam * theta_p)
    };
    let mut best_i = 0usize;
    let mut best_val = f64::INFINITY;
    for (i, &lam) in lambda_grid.iter().enumerate() {
        let val = eval(lam)?;
        if val < best_val {
            best_val = val;
            best_i = i;
        }
    }
    let mut lo = if best_i == 0 { 0.0 } else { lambda_grid[best_i - 1] };
    let mut hi = if best_i + 1 < lambda_grid.len() {
        lambda_grid[best_i + 1]
    } else {
        lambda_grid[best_i] * 2.0
    };
    // The outer objective min_u [...] is only piecewise convex in lambda, so
    // shrink the bracket by repeated scans before the final golden pass.
    for _ in 0..4 {
        let pts = 32;
        let mut bi = 0usize;
        let mut bv = f64::INFINITY;
        for i in 0..=pts {
            let lam = lo + (hi - lo) * i as f64 / pts as f64;
            let val = eval(lam)?;
            if val < bv {
                bv = val;
                bi = i;
            }
        }
        best_val = best_val.min(bv);
        let new_lo = lo + (hi - lo) * bi.saturating_sub(1) as f64 / pts as f64;
        let new_hi = lo + (hi - lo) * (bi + 1).min(pts) as f64 / pts as f64;
        lo = new_lo;
        hi = new_hi;
    }
    let (_, refined) = golden_min(&|lam| eval(lam).unwrap_or(f64::INFINITY), lo, hi, 48);
    Ok((lhs, refined.min(best_val)))
}

/// Worst-case distribution of a fixed policy at every grid node.
pub fn extract_worst_case_policy(
    policy: &StationaryPolicy,
    v_pi: &GridValueFunction,
    problem: &ControlProblem,
    amb: &Ambiguity,
    opts: &BellmanOpts,
) -> Result<Vec<WorstCaseDistribution>> {
    let grid = v_pi.grid().clone();
    let mut out = Vec::with_capacity(grid.node_count());
    for k in 0..grid.node_count() {
        let x = grid.coords(k);
        let (_, wc) = apply_t_pi(v_pi, &x, policy, problem, amb, opts)?;
        out.push(wc);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Grid sweeps: node-wise application of the operators with precomputed
// next-state tables. Node applications are independent given the immutable
// value snapshot; results do not depend on evaluation order.
// ---------------------------------------------------------------------------

struct NodeCache {
    x: Vec<f64>,
    /// Per candidate action: (action, stage cost, next state per w_grid atom).
    actions: Vec<(Vec<f64>, f64, Vec<Vec<f64>>)>,
}

/// Precomputed sweep table for repeated applications of `T` (or `T^pi` when
/// built from a policy) on a fixed grid.
pub struct SweepCache {
    grid: Arc<Grid>,
    nodes: Vec<NodeCache>,
    warm_lambda: Vec<f64>,
}

impl SweepCache {
    /// Cache for the optimality operator `T`: all candidate actions per node.
    pub fn for_operator(grid: Arc<Grid>, problem: &ControlProblem, amb: &Ambiguity) -> Result<Self> {
        let mut nodes = Vec::with_capacity(grid.node_count());
        for k in 0..grid.node_count() {
            let x = grid.coords(k);
            let candidates = problem.action_set.candidates(&x);
            if candidates.is_empty() {
                return Err(Error::Config(format!("empty action candidate set at x = {x:?}")));
            }
            let actions = candidates
                .into_iter()
                .map(|u| {
                    let c = (problem.stage_cost)(&x, &u);
                    let nexts = amb.w_grid().iter().map(|w| (problem.dynamics)(&x, &u, w)).collect();
                    (u, c, nexts)
                })
                .collect();
            nodes.push(NodeCache { x, actions });
        }
        let n = grid.node_count();
        Ok(Self { grid, nodes, warm_lambda: vec![0.0; n] })
    }

    /// Cache for the policy-evaluation operator `T^pi`: one action per node.
    pub fn for_policy(
        grid: Arc<Grid>,
        policy: &StationaryPolicy,
        problem: &ControlProblem,
        amb: &Ambiguity,
    ) -> Result<Self> {
        let mut nodes = Vec::with_capacity(grid.node_count());
        for k in 0..grid.node_count() {
            let x = grid.coords(k);
            let u = policy.action(&x)?;
            let c = (problem.stage_cost)(&x, &u);
            let nexts = amb.w_grid().iter().map(|w| (problem.dynamics)(&x, &u, w)).collect();
            nodes.push(NodeCache { x, actions: vec![(u, c, nexts)] });
        }
        let n = grid.node_count();
        Ok(Self { grid, nodes, warm_lambda: vec![0.0; n] })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// One full sweep: returns the updated value function and the per-node
    /// minimizing actions. Dual multipliers are warm-started between sweeps.
    pub fn sweep(
        &mut self,
        v: &GridValueFunction,
        problem: &ControlProblem,
        amb: &Ambiguity,
        opts: &BellmanOpts,
    ) -> Result<(GridValueFunction, Vec<Vec<f64>>)> {
        let theta_p = amb.theta.powf(amb.metric.order());
        let nn = self.nodes.len();
        let mut values = vec![0.0f64; nn];
        let mut actions = Vec::with_capacity(nn);
        let mut a_buf: Vec<f64> = Vec::new();
        for (k, node) in self.nodes.iter().enumerate() {
            let warm = if self.warm_lambda[k] > 0.0 { Some(self.warm_lambda[k]) } else { None };
            let mut best_val = f64::INFINITY;
            let mut best_u: &Vec<f64> = &node.actions[0].0;
            let mut best_lam = 0.0;
            for (u, cxu, nexts) in &node.actions {
                a_buf.clear();
                for nx in nexts {
                    let (val, _) = v.evaluate_clamping(nx)?;
                    if !val.is_finite() {
                        return Err(Error::Numerical(format!(
                            "non-finite value at next state {nx:?} (node {:?})",
                            node.x
                        )));
                    }
                    a_buf.push(problem.alpha * val);
                }
                let (value, lam) = if amb.theta == 0.0 {
                    let mut s = 0.0;
                    for row in &amb.cost {
                        let mut best = f64::NEG_INFINITY;
                        for (aj, cij) in a_buf.iter().zip(row) {
                            if *cij == 0.0 && *aj > best {
                                best = *aj;
                            }
                        }
                        s += best;
                    }
                    (cxu + s / amb.n() as f64, 0.0)
                } else {
                    let lam_max =
                        opts.lambda_max.unwrap_or_else(|| default_lambda_max(&a_buf, amb, problem.alpha));
                    let (lam, obj) =
                        minimize_dual(theta_p, &a_buf, &amb.cost, lam_max, opts.lambda_iters, warm);
                    (cxu + obj, lam)
                };
                if value < best_val {
                    best_val = value;
                    best_u = u;
                    best_lam = lam;
                }
            }
            values[k] = best_val;
            actions.push(best_u.clone());
            self.warm_lambda[k] = best_lam;
        }
        Ok((GridValueFunction::new(self.grid.clone(), values)?, actions))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{ActionSet, WeightFn};
    use approx::assert_relative_eq;

    /// 1-D toy problem: x' = 0.5 x + w, c = x^2 + u^2 with finite actions.
    fn toy_problem(actions: Vec<Vec<f64>>) -> ControlProblem {
        ControlProblem::new(
            Arc::new(|x: &[f64], u: &[f64], w: &[f64]| vec![0.5 * x[0] + 0.2 * u[0] + w[0]]),
            Arc::new(|x: &[f64], u: &[f64]| x[0] * x[0] + u[0] * u[0]),
            ActionSet::Finite(actions),
            0.9,
            WeightFn::One,
            10.0,
            1.0,
            vec![-1.0],
            vec![1.0],
        )
        .unwrap()
    }

    fn toy_ambiguity(theta: f64) -> Ambiguity {
        let nu = EmpiricalDistribution::from_samples(vec![vec![-0.2], vec![0.0], vec![0.3]]).unwrap();
        Ambiguity::with_uniform_grid(nu, theta, GroundMetric::euclidean(1.0).unwrap(), &[-1.0], &[1.0], &[21])
            .unwrap()
    }

    fn value_grid() -> Arc<Grid> {
        Arc::new(Grid::uniform(&[-3.0], &[3.0], &[31]).unwrap())
    }

    #[test]
    fn zero_radius_reduces_to_saa() {
        let problem = toy_problem(vec![vec![0.0], vec![0.5]]);
        let amb = toy_ambiguity(0.0);
        let g = value_grid();
        let v = GridValueFunction::from_fn(g, |x| x[0] * x[0]);
        let res = apply_t(&v, &[0.4], &problem, &amb, &BellmanOpts::default()).unwrap();

        // SAA oracle: min_u [c + (alpha/N) sum v(f(x,u,w_i))], evaluating v
        // through the same grid interpolant the operator sees.
        let mut saa_best = f64::INFINITY;
        for u in [[0.0], [0.5]] {
            let mut s = 0.0;
            for w in amb.nu.atoms() {
                let nx = 0.5 * 0.4 + 0.2 * u[0] + w[0];
                s += v.evaluate_clamping(&[nx]).unwrap().0;
            }
            let val = 0.4 * 0.4 + u[0] * u[0] + 0.9 * s / 3.0;
            saa_best = saa_best.min(val);
        }
        assert_relative_eq!(res.value, saa_best, epsilon = 1e-9);
    }

    #[test]
    fn constant_value_function_gives_lambda_zero() {
        let problem = toy_problem(vec![vec![0.0], vec![1.0]]);
        let amb = toy_ambiguity(0.1);
        let g = value_grid();
        let v0 = 4.2;
        let v = GridValueFunction::constant(g, v0);
        let res = apply_t(&v, &[0.5], &problem, &amb, &BellmanOpts::default()).unwrap();
        // min_u c(x,u) + alpha*V0, with u = 0 optimal here.
        let expect = 0.25 + 0.9 * v0;
        assert_relative_eq!(res.value, expect, epsilon = 1e-7);
        assert!(res.lambda.abs() < 1e-6, "lambda = {}", res.lambda);
    }

    #[test]
    fn result_identity_holds() {
        let problem = toy_problem(vec![vec![0.0], vec![0.5], vec![1.0]]);
        let amb = toy_ambiguity(0.15);
        let g = value_grid();
        let v = GridValueFunction::from_fn(g, |x| (x[0] - 0.5).abs());
        let res = apply_t(&v, &[-0.3], &problem, &amb, &BellmanOpts::default()).unwrap();
        let theta_p = amb.theta; // p = 1
        let c = {
            let x = [-0.3f64];
            x[0] * x[0] + res.action[0] * res.action[0]
        };
        let recon = res.lambda * theta_p + c + res.inner.iter().sum::<f64>() / 3.0;
        assert_relative_eq!(res.value, recon, epsilon = 1e-9);
        assert!(res.lambda >= 0.0);
    }

    #[test]
    fn t_pi_zero_radius_returns_empirical() {
        let problem = toy_problem(vec![vec![0.0]]);
        let amb = toy_ambiguity(0.0);
        let g = value_grid();
        let v = GridValueFunction::from_fn(g.clone(), |x| x[0] * x[0]);
        let pi = StationaryPolicy::tabular(g.clone(), vec![vec![0.0]; g.node_count()]).unwrap();
        let (val, wc) = apply_t_pi(&v, &[0.2], &pi, &problem, &amb, &BellmanOpts::default()).unwrap();
        let t = apply_t(&v, &[0.2], &problem, &amb, &BellmanOpts::default()).unwrap();
        assert_relative_eq!(val, t.value, epsilon = 1e-9);
        assert_eq!(wc.atoms.len(), 3);
        assert_relative_eq!(wc.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn t_pi_budget_met_under_complementary_slackness() {
        // Value increasing in w: adversary pushes atoms toward the max-v end.
        let problem = toy_problem(vec![vec![0.0]]);
        let amb = toy_ambiguity(0.1);
        let g = value_grid();
        let v = GridValueFunction::from_fn(g.clone(), |x| 2.0 * x[0]);
        let pi = StationaryPolicy::tabular(g.clone(), vec![vec![0.0]; g.node_count()]).unwrap();
        let (val, wc) = apply_t_pi(&v, &[0.0], &pi, &problem, &amb, &BellmanOpts::default()).unwrap();
        // The extracted distribution exhausts the transport budget.
        let metric = GroundMetric::euclidean(1.0).unwrap();
        assert!(wc.budget_residual.abs() < 1e-6, "residual = {}", wc.budget_residual);
        // Weights sum to one and the distribution stays in the theta-ball.
        assert_relative_eq!(wc.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let wc_dist = wc.to_distribution().unwrap();
        assert!(crate::distributions::ball_membership(&wc_dist, &amb.nu, amb.theta + 1e-9, &metric).unwrap());
        assert!(val.is_finite());
        // At most N+1 distinct atoms.
        assert!(wc.atoms.len() <= 4);
    }

    #[test]
    fn dominance_t_le_t_pi() {
        let problem = toy_problem(vec![vec![0.0], vec![0.5], vec![1.0]]);
        let amb = toy_ambiguity(0.05);
        let g = value_grid();
        let v = GridValueFunction::from_fn(g.clone(), |x| x[0].cos());
        let pi = StationaryPolicy::tabular(g.clone(), vec![vec![1.0]; g.node_count()]).unwrap();
        for &x in &[-1.0, 0.0, 0.7] {
            let t = apply_t(&v, &[x], &problem, &amb, &BellmanOpts::default()).unwrap();
            let (tp, _) = apply_t_pi(&v, &[x], &pi, &problem, &amb, &BellmanOpts::default()).unwrap();
            assert!(t.value <= tp + 1e-9, "T = {} vs T_pi = {tp}", t.value);
        }
    }

    #[test]
    fn theta_monotonicity() {
        let problem = toy_problem(vec![vec![0.0], vec![0.5]]);
        let g = value_grid();
        let v = GridValueFunction::from_fn(g, |x| (x[0] * 1.3).sin() + x[0] * x[0] * 0.2);
        let mut last = f64::NEG_INFINITY;
        for theta in [0.0, 0.02, 0.05, 0.1, 0.3] {
            let amb = toy_ambiguity(theta);
            let res = apply_t(&v, &[0.25], &problem, &amb, &BellmanOpts::default()).unwrap();
            assert!(res.value >= last - 1e-8, "theta = {theta}: {} < {last}", res.value);
            last = res.value;
        }
    }

    #[test]
    fn penalty_large_lambda_collapses_to_saa() {
        let problem = toy_problem(vec![vec![0.0], vec![0.5]]);
        let amb = toy_ambiguity(0.1);
        let g = value_grid();
        let v = GridValueFunction::from_fn(g, |x| x[0] * x[0]);
        let (val, _, atoms) = apply_t_penalty(&v, &[0.4], 1e12, &problem, &amb).unwrap();
        for (atom, sample) in atoms.iter().zip(amb.nu.atoms()) {
            assert_relative_eq!(atom[0], sample[0], epsilon = 1e-12);
        }
        let amb0 = toy_ambiguity(0.0);
        let saa = apply_t(&v, &[0.4], &problem, &amb0, &BellmanOpts::default()).unwrap();
        assert_relative_eq!(val, saa.value, epsilon = 1e-6);
    }

    #[test]
    fn penalty_zero_value_function() {
        let problem = toy_problem(vec![vec![0.0], vec![0.5]]);
        let amb = toy_ambiguity(0.1);
        let g = value_grid();
        let v = GridValueFunction::constant(g, 0.0);
        let (val, u, atoms) = apply_t_penalty(&v, &[0.4], 3.0, &problem, &amb).unwrap();
        // min_u c(x,u) attained at u = 0; atoms stay at the samples.
        assert_relative_eq!(val, 0.16, epsilon = 1e-12);
        assert_relative_eq!(u[0], 0.0);
        for (atom, sample) in atoms.iter().zip(amb.nu.atoms()) {
            assert_relative_eq!(atom[0], sample[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn penalty_matches_exhaustive_scan() {
        let problem = toy_problem(vec![vec![0.0], vec![0.6]]);
        let amb = toy_ambiguity(0.1);
        let g = value_grid();
        let v = GridValueFunction::from_fn(g.clone(), |x| x[0] * x[0]);
        let lambda = 2.5;
        let (val, _, _) = apply_t_penalty(&v, &[0.3], lambda, &problem, &amb).unwrap();

        // Exhaustive oracle over actions and grid atoms.
        let mut oracle = f64::INFINITY;
        for u in [[0.0], [0.6]] {
            let mut total = 0.3f64 * 0.3 + u[0] * u[0];
            for s in amb.nu.atoms() {
                let mut m = f64::NEG_INFINITY;
                for w in amb.w_grid() {
                    let nx = 0.5 * 0.3 + 0.2 * u[0] + w[0];
                    let vi = v.evaluate_clamping(&[nx]).unwrap().0;
                    m = m.max(0.9 * vi - lambda * (w[0] - s[0]).abs());
                }
                total += m / 3.0;
            }
            oracle = oracle.min(total);
        }
        assert_relative_eq!(val, oracle, epsilon = 1e-10);
    }

    #[test]
    fn penalty_rejects_nonpositive_lambda() {
        let problem = toy_problem(vec![vec![0.0]]);
        let amb = toy_ambiguity(0.1);
        let v = GridValueFunction::constant(value_grid(), 0.0);
        assert!(apply_t_penalty(&v, &[0.0], 0.0, &problem, &amb).is_err());
        assert!(apply_t_penalty(&v, &[0.0], -1.0, &problem, &amb).is_err());
    }

    #[test]
    fn duality_check_constant_value() {
        let problem = toy_problem(vec![vec![0.0], vec![0.5]]);
        let amb = toy_ambiguity(0.1);
        let v = GridValueFunction::constant(value_grid(), 2.0);
        let grid_lam: Vec<f64> = (0..30).map(|i| 0.1 * i as f64 + 0.05).collect();
        let (lhs, rhs) =
            penalty_duality_check(&v, &[0.4], &problem, &amb, &BellmanOpts::default(), &grid_lam).unwrap();
        // Both sides equal min_u c + alpha * 2.
        assert_relative_eq!(lhs, 0.16 + 1.8, epsilon = 1e-6);
        assert_relative_eq!(rhs, lhs, epsilon = 1e-5);
    }

    #[test]
    fn sweep_matches_pointwise_apply() {
        let problem = toy_problem(vec![vec![0.0], vec![0.5]]);
        let amb = toy_ambiguity(0.08);
        let g = Arc::new(Grid::uniform(&[-2.0], &[2.0], &[9]).unwrap());
        let v = GridValueFunction::from_fn(g.clone(), |x| x[0] * x[0] * 0.3);
        let mut cache = SweepCache::for_operator(g.clone(), &problem, &amb).unwrap();
        let (tv, _) = cache.sweep(&v, &problem, &amb, &BellmanOpts::default()).unwrap();
        for k in 0..g.node_count() {
            let x = g.coords(k);
            let direct = apply_t(&v, &x, &problem, &amb, &BellmanOpts::default()).unwrap();
            assert_relative_eq!(tv.values()[k], direct.value, epsilon = 1e-7);
        }
    }
}

