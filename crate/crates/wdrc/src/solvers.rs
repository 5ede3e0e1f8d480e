//! Dynamic-programming solvers for the DR control problem: value iteration,
//! policy iteration, and modified (optimistic) policy iteration, with the
//! a-priori iteration-count bounds and weighted-sup-norm stopping rules.
//!
//! The three algorithms sit behind the [`DpSolver`] trait and are registered
//! by name (`"vi"`, `"pi"`, `"mpi"`) so configuration can select a variant
//! without touching call sites.

use crate::bellman::{Ambiguity, BellmanOpts, SweepCache};
use crate::problem::{weighted_sup_norm_diff, ControlProblem, GridValueFunction, StationaryPolicy};
use crate::{Error, Result};
use std::time::Instant;

/// Convergence record of a solver run.
#[derive(Debug, Clone)]
pub struct SolverReport {
    pub iterations: usize,
    /// Weighted sup-norm of the last successive-iterate difference.
    pub final_residual: f64,
    /// A-priori iteration estimate when an epsilon-mode stop was used.
    pub bound_k: Option<usize>,
    /// Residual per iteration.
    pub history: Vec<f64>,
    /// Cumulative wall-clock seconds per iteration.
    pub wall_times: Vec<f64>,
    pub converged: bool,
}

impl SolverReport {
    /// Write the progress log as CSV: `iteration,residual,wall_time`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["iteration", "residual", "wall_time"])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for (k, (r, t)) in self.history.iter().zip(&self.wall_times).enumerate() {
            wtr.write_record([(k + 1).to_string(), format!("{r:.12e}"), format!("{t:.6}")])
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Stopping rule: either a successive-iterate threshold or an epsilon target
/// translated into an a-priori sweep count.
#[derive(Debug, Clone, Copy)]
pub enum StopRule {
    /// Stop when `||v_{k+1} - v_k||_xi < delta`.
    Delta(f64),
    /// Run exactly `vi_iteration_bound(epsilon, b, tau)` sweeps.
    Epsilon { epsilon: f64, b: f64 },
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidInput(format!("contraction modulus tau = {tau} not in (0,1)")));
    }
    Ok(())
}

/// Smallest integer `k` strictly greater than
/// `(log[(1-tau)^2 eps] - log(2 b tau)) / log tau`; 0 when `b = 0`.
pub fn vi_iteration_bound(epsilon: f64, b: f64, tau: f64) -> Result<usize> {
    check_tau(tau)?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon = {epsilon} must be > 0")));
    }
    if b < 0.0 {
        return Err(Error::InvalidInput(format!("b = {b} must be >= 0")));
    }
    if b == 0.0 {
        return Ok(0);
    }
    let value = (((1.0 - tau).powi(2) * epsilon).ln() - (2.0 * b * tau).ln()) / tau.ln();
    let k = value.floor() + 1.0;
    Ok(if k < 0.0 { 0 } else { k as usize })
}

/// Smallest `k` with `k tau^k < (1-tau)^2 eps / (2 r)`; 0 when `r = 0`.
pub fn mpi_iteration_bound(epsilon: f64, r: f64, tau: f64) -> Result<usize> {
    check_tau(tau)?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon = {epsilon} must be > 0")));
    }
    if r < 0.0 {
        return Err(Error::InvalidInput(format!("r = {r} must be >= 0")));
    }
    if r == 0.0 {
        return Ok(0);
    }
    let target = (1.0 - tau).powi(2) * epsilon / (2.0 * r);
    let mut k = 1usize;
    while (k as f64) * tau.powi(k as i32) >= target {
        k += 1;
        if k > 10_000_000 {
            return Err(Error::NonConverged("mpi_iteration_bound: k exceeded 1e7".into()));
        }
    }
    Ok(k)
}

/// Value iteration: `v_{k+1} = T v_k` node-wise until the stopping rule
/// fires. The returned policy is the greedy minimizer of the final sweep.
pub fn value_iteration(
    problem: &ControlProblem,
    amb: &Ambiguity,
    v0: &GridValueFunction,
    stop: StopRule,
    max_iter: usize,
    opts: &BellmanOpts,
) -> Result<(GridValueFunction, StationaryPolicy, SolverReport)> {
    let grid = v0.grid().clone();
    let mut cache = SweepCache::for_operator(grid.clone(), problem, amb)?;
    let (target_k, delta, bound_k) = match stop {
        StopRule::Delta(d) => (max_iter, d, None),
        StopRule::Epsilon { epsilon, b } => {
            let k = vi_iteration_bound(epsilon, b, problem.tau())?;
            (k.min(max_iter), 0.0, Some(k))
        }
    };

    let start = Instant::now();
    let mut v = v0.clone();
    let mut actions = Vec::new();
    let mut history = Vec::new();
    let mut wall_times = Vec::new();
    let mut converged = bound_k.is_some() && target_k == 0;
    let mut iterations = 0usize;
    while iterations < target_k {
        let (v_next, acts) = cache.sweep(&v, problem, amb, opts)?;
        let residual = weighted_sup_norm_diff(&v_next, &v, &problem.weight)?;
        v = v_next;
        actions = acts;
        iterations += 1;
        history.push(residual);
        wall_times.push(start.elapsed().as_secs_f64());
        match stop {
            StopRule::Delta(_) if residual < delta => {
                converged = true;
                break;
            }
            StopRule::Epsilon { .. } if iterations >= target_k => {
                converged = true;
                break;
            }
            _ => {}
        }
    }
    if actions.is_empty() {
        // Zero sweeps requested (e.g. bound 0): still extract a greedy policy.
        let (_, acts) = cache.sweep(&v, problem, amb, opts)?;
        actions = acts;
    }
    let policy = StationaryPolicy::tabular(grid, actions)?;
    let final_residual = history.last().copied().unwrap_or(0.0);
    Ok((v, policy, SolverReport { iterations, final_residual, bound_k, history, wall_times, converged }))
}

/// Fixed point of `T^pi` by successive approximation.
pub fn policy_evaluation(
    policy: &StationaryPolicy,
    problem: &ControlProblem,
    amb: &Ambiguity,
    v0: &GridValueFunction,
    delta: f64,
    max_iter: usize,
    opts: &BellmanOpts,
) -> Result<(GridValueFunction, SolverReport)> {
    let grid = v0.grid().clone();
    let mut cache = SweepCache::for_policy(grid, policy, problem, amb)?;
    let start = Instant::now();
    let mut v = v0.clone();
    let mut history = Vec::new();
    let mut wall_times = Vec::new();
    let mut converged = false;
    let mut iterations = 0usize;
    while iterations < max_iter {
        let (v_next, _) = cache.sweep(&v, problem, amb, opts)?;
        let residual = weighted_sup_norm_diff(&v_next, &v, &problem.weight)?;
        v = v_next;
        iterations += 1;
        history.push(residual);
        wall_times.push(start.elapsed().as_secs_f64());
        if residual < delta {
            converged = true;
            break;
        }
    }
    let final_residual = history.last().copied().unwrap_or(0.0);
    Ok((v, SolverReport { iterations, final_residual, bound_k: None, history, wall_times, converged }))
}

/// Policy iteration: alternate exact-ish evaluation and greedy improvement
/// until successive policy values differ by less than `delta_stop`.
pub fn policy_iteration(
    problem: &ControlProblem,
    amb: &Ambiguity,
    pi0: &StationaryPolicy,
    delta_eval: f64,
    delta_stop: f64,
    max_outer: usize,
    opts: &BellmanOpts,
) -> Result<(StationaryPolicy, GridValueFunction, SolverReport)> {
    let grid = match pi0 {
        StationaryPolicy::Tabular { grid, .. } => grid.clone(),
        _ => return Err(Error::InvalidInput("policy_iteration needs a tabular initial policy".into())),
    };
    let mut op_cache = SweepCache::for_operator(grid.clone(), problem, amb)?;
    let start = Instant::now();
    let mut pi = pi0.clone();
    let mut v = GridValueFunction::constant(grid.clone(), 0.0);
    let mut prev_v: Option<GridValueFunction> = None;
    let mut history = Vec::new();
    let mut wall_times = Vec::new();
    let mut converged = false;
    let mut iterations = 0usize;
    let eval_cap = 100_000;
    while iterations < max_outer {
        let (v_pi, _) = policy_evaluation(&pi, problem, amb, &v, delta_eval, eval_cap, opts)?;
        let diff = match &prev_v {
            Some(p) => weighted_sup_norm_diff(&v_pi, p, &problem.weight)?,
            None => f64::INFINITY,
        };
        iterations += 1;
        if diff.is_finite() {
            history.push(diff);
            wall_times.push(start.elapsed().as_secs_f64());
        }
        prev_v = Some(v_pi.clone());
        v = v_pi;
        if diff < delta_stop {
            converged = true;
            break;
        }
        // Greedy improvement: one operator sweep on v^{pi_k}.
        let (_, actions) = op_cache.sweep(&v, problem, amb, opts)?;
        pi = StationaryPolicy::tabular(grid.clone(), actions)?;
    }
    let final_residual = history.last().copied().unwrap_or(f64::INFINITY);
    Ok((pi, v, SolverReport { iterations, final_residual, bound_k: None, history, wall_times, converged }))
}

/// Modified (optimistic) policy iteration: a greedy improvement sweep
/// followed by `m_k - 1` further applications of `T^{pi_k}` per outer round.
pub fn modified_policy_iteration(
    problem: &ControlProblem,
    amb: &Ambiguity,
    v0: &GridValueFunction,
    order: &dyn Fn(usize) -> usize,
    delta_stop: f64,
    max_outer: usize,
    opts: &BellmanOpts,
) -> Result<(StationaryPolicy, GridValueFunction, SolverReport)> {
    let grid = v0.grid().clone();
    let mut op_cache = SweepCache::for_operator(grid.clone(), problem, amb)?;
    let start = Instant::now();
    let mut v = v0.clone();
    let mut pi: Option<StationaryPolicy> = None;
    let mut history = Vec::new();
    let mut wall_times = Vec::new();
    let mut converged = false;
    let mut iterations = 0usize;
    while iterations < max_outer {
        let m_k = order(iterations).max(1);
        // Improvement sweep (this is also the first application of T^{pi_k}).
        let (mut v_next, actions) = op_cache.sweep(&v, problem, amb, opts)?;
        let pi_k = StationaryPolicy::tabular(grid.clone(), actions)?;
        if m_k > 1 {
            let mut pi_cache = SweepCache::for_policy(grid.clone(), &pi_k, problem, amb)?;
            for _ in 1..m_k {
                let (w, _) = pi_cache.sweep(&v_next, problem, amb, opts)?;
                v_next = w;
            }
        }
        let residual = weighted_sup_norm_diff(&v_next, &v, &problem.weight)?;
        v = v_next;
        pi = Some(pi_k);
        iterations += 1;
        history.push(residual);
        wall_times.push(start.elapsed().as_secs_f64());
        if residual < delta_stop {
            converged = true;
            break;
        }
    }
    let pi = match pi {
        Some(p) => p,
        None => {
            let (_, actions) = op_cache.sweep(&v, problem, amb, opts)?;
            StationaryPolicy::tabular(grid, actions)?
        }
    };
    let final_residual = history.last().copied().unwrap_or(0.0);
    Ok((pi, v, SolverReport { iterations, final_residual, bound_k: None, history, wall_times, converged }))
}

// ---------------------------------------------------------------------------
// Strategy registry
// ---------------------------------------------------------------------------

/// Options shared by the registered solvers.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub delta: f64,
    pub max_iter: usize,
    pub bellman: BellmanOpts,
    /// Evaluation order `M_k` for modified PI (constant sequence).
    pub mpi_order: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { delta: 1e-6, max_iter: 10_000, bellman: BellmanOpts::default(), mpi_order: 5 }
    }
}

/// Outcome shared by the registered solvers.
pub struct SolveOutcome {
    pub value: GridValueFunction,
    pub policy: StationaryPolicy,
    pub report: SolverReport,
}

/// A DP algorithm variant selectable by name.
pub trait DpSolver {
    fn name(&self) -> &'static str;
    fn solve(
        &self,
        problem: &ControlProblem,
        amb: &Ambiguity,
        v0: &GridValueFunction,
        opts: &SolveOptions,
    ) -> Result<SolveOutcome>;
}

struct ValueIterationSolver;
struct PolicyIterationSolver;
struct ModifiedPiSolver;

impl DpSolver for ValueIterationSolver {
    fn name(&self) -> &'static str {
        "vi"
    }
    fn solve(
        &self,
        problem: &ControlProblem,
        amb: &Ambiguity,
        v0: &GridValueFunction,
        opts: &SolveOptions,
    ) -> Result<SolveOutcome> {
        let (value, policy, report) =
            value_iteration(problem, amb, v0, StopRule::Delta(opts.delta), opts.max_iter, &opts.bellman)?;
        Ok(SolveOutcome { value, policy, report })
    }
}

impl DpSolver for PolicyIterationSolver {
    fn name(&self) -> &'static str {
        "pi"
    }
    fn solve(
        &self,
        problem: &ControlProblem,
        amb: &Ambiguity,
        v0: &GridValueFunction,
        opts: &SolveOptions,
    ) -> Result<SolveOutcome> {
        // Initial policy: greedy with respect to v0.
        let grid = v0.grid().clone();
        let mut cache = SweepCache::for_operator(grid.clone(), problem, amb)?;
        let (_, actions) = cache.sweep(v0, problem, amb, &opts.bellman)?;
        let pi0 = StationaryPolicy::tabular(grid, actions)?;
        let (policy, value, report) = policy_iteration(
            problem,
            amb,
            &pi0,
            opts.delta * 0.1,
            opts.delta,
            opts.max_iter,
            &opts.bellman,
        )?;
        Ok(SolveOutcome { value, policy, report })
    }
}

impl DpSolver for ModifiedPiSolver {
    fn name(&self) -> &'static str {
        "mpi"
    }
    fn solve(
        &self,
        problem: &ControlProblem,
        amb: &Ambiguity,
        v0: &GridValueFunction,
        opts: &SolveOptions,
    ) -> Result<SolveOutcome> {
        let m = opts.mpi_order.max(1);
        let (policy, value, report) = modified_policy_iteration(
            problem,
            amb,
            v0,
            &move |_| m,
            opts.delta,
            opts.max_iter,
            &opts.bellman,
        )?;
        Ok(SolveOutcome { value, policy, report })
    }
}

/// All registered solver variants.
pub fn solver_registry() -> Vec<Box<dyn DpSolver>> {
    vec![Box::new(ValueIterationSolver), Box::new(PolicyIterationSolver), Box::new(ModifiedPiSolver)]
}

/// Look up a solver by its registered name.
pub fn get_solver(name: &str) -> Result<Box<dyn DpSolver>> {
    solver_registry()
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| {
            let names: Vec<_> = solver_registry().iter().map(|s| s.name().to_string()).collect();
            Error::Config(format!("unknown solver '{name}'; available: {}", names.join(", ")))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{EmpiricalDistribution, GroundMetric};
    use crate::problem::{ActionSet, Grid, WeightFn};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn toy_problem() -> ControlProblem {
        ControlProblem::new(
            Arc::new(|x: &[f64], u: &[f64], w: &[f64]| vec![0.6 * x[0] + 0.3 * u[0] + w[0]]),
            Arc::new(|x: &[f64], u: &[f64]| x[0] * x[0] + 0.5 * u[0] * u[0]),
            ActionSet::Finite(vec![vec![-0.5], vec![0.0], vec![0.5]]),
            0.85,
            WeightFn::One,
            20.0,
            1.0,
            vec![-0.5],
            vec![0.5],
        )
        .unwrap()
    }

    fn toy_amb(theta: f64) -> Ambiguity {
        let nu = EmpiricalDistribution::from_samples(vec![vec![-0.1], vec![0.05], vec![0.2]]).unwrap();
        Ambiguity::with_uniform_grid(nu, theta, GroundMetric::euclidean(1.0).unwrap(), &[-0.5], &[0.5], &[11])
            .unwrap()
    }

    fn toy_grid() -> Arc<Grid> {
        Arc::new(Grid::uniform(&[-3.0], &[3.0], &[25]).unwrap())
    }

    #[test]
    fn vi_bound_cases() {
        // b = 0: any policy optimal.
        assert_eq!(vi_iteration_bound(1e-3, 0.0, 0.9).unwrap(), 0);
        // Ratio exactly 1: bound is k > 0, so 1.
        let (b, tau) = (1.0, 0.9);
        let eps = 2.0 * b * tau / (1.0 - tau) / (1.0 - tau);
        assert_eq!(vi_iteration_bound(eps, b, tau).unwrap(), 1);
        // Closed-form evaluation oracle.
        let eps = 1e-3;
        let raw = (((1.0 - tau) * (1.0 - tau) * eps).ln() - (2.0 * b * tau).ln()) / tau.ln();
        let expect = raw.floor() as usize + 1;
        assert_eq!(vi_iteration_bound(eps, b, tau).unwrap(), expect);
        assert!(vi_iteration_bound(1e-3, 1.0, 1.0).is_err());
        assert!(vi_iteration_bound(1e-3, 1.0, 0.0).is_err());
    }

    #[test]
    fn mpi_bound_cases() {
        assert_eq!(mpi_iteration_bound(1.0, 0.0, 0.5).unwrap(), 0);
        // Smallest k with k 0.5^k < 0.125: scan oracle.
        let mut oracle = 1usize;
        while (oracle as f64) * 0.5f64.powi(oracle as i32) >= 0.125 {
            oracle += 1;
        }
        assert_eq!(mpi_iteration_bound(1.0, 1.0, 0.5).unwrap(), oracle);
        // Larger instance against the same scan.
        let (eps, r, tau) = (1e-2, 10.0, 0.9f64);
        let target = (1.0 - tau) * (1.0 - tau) * eps / (2.0 * r);
        let mut k = 1usize;
        while (k as f64) * tau.powi(k as i32) >= target {
            k += 1;
        }
        assert_eq!(mpi_iteration_bound(eps, r, tau).unwrap(), k);
    }

    #[test]
    fn vi_zero_cost_converges_immediately() {
        let mut problem = toy_problem();
        problem.stage_cost = Arc::new(|_: &[f64], _: &[f64]| 0.0);
        let amb = toy_amb(0.1);
        let v0 = GridValueFunction::constant(toy_grid(), 0.0);
        let (v, _, report) =
            value_iteration(&problem, &amb, &v0, StopRule::Delta(1e-12), 100, &BellmanOpts::default())
                .unwrap();
        assert_eq!(report.iterations, 1);
        assert!(v.values().iter().all(|&x| x.abs() < 1e-12));
    }

    /// Independent SAA value iteration: direct expectation over the samples,
    /// no ambiguity machinery.
    fn saa_vi_oracle(problem: &ControlProblem, samples: &[Vec<f64>], grid: &Arc<Grid>, sweeps: usize) -> Vec<f64> {
        let mut v = GridValueFunction::constant(grid.clone(), 0.0);
        for _ in 0..sweeps {
            let mut next = vec![0.0; grid.node_count()];
            for k in 0..grid.node_count() {
                let x = grid.coords(k);
                let mut best = f64::INFINITY;
                for u in problem.action_set.candidates(&x) {
                    let mut total = (problem.stage_cost)(&x, &u);
                    for w in samples {
                        let nx = (problem.dynamics)(&x, &u, w);
                        total += problem.alpha * v.evaluate_clamping(&nx).unwrap().0 / samples.len() as f64;
                    }
                    best = best.min(total);
                }
                next[k] = best;
            }
            v = GridValueFunction::new(grid.clone(), next).unwrap();
        }
        v.values().to_vec()
    }

    #[test]
    fn vi_theta_zero_matches_saa_oracle() {
        let problem = toy_problem();
        let amb = toy_amb(0.0);
        let g = toy_grid();
        let sweeps = 40;
        let mut v = GridValueFunction::constant(g.clone(), 0.0);
        let mut cache = SweepCache::for_operator(g.clone(), &problem, &amb).unwrap();
        for _ in 0..sweeps {
            let (next, _) = cache.sweep(&v, &problem, &amb, &BellmanOpts::default()).unwrap();
            v = next;
        }
        let oracle = saa_vi_oracle(&problem, amb.nu.atoms(), &g, sweeps);
        for (a, b) in v.values().iter().zip(&oracle) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn vi_residuals_contract() {
        let problem = toy_problem();
        let amb = toy_amb(0.05);
        let v0 = GridValueFunction::constant(toy_grid(), 0.0);
        let (_, _, report) =
            value_iteration(&problem, &amb, &v0, StopRule::Delta(1e-8), 500, &BellmanOpts::default())
                .unwrap();
        assert!(report.converged);
        let tau = problem.tau();
        for w in report.history.windows(2) {
            assert!(w[1] <= tau * w[0] + 1e-9, "{} vs {}", w[1], tau * w[0]);
        }
    }

    #[test]
    fn policy_evaluation_zero_cost_and_fixed_point() {
        let mut problem = toy_problem();
        let g = toy_grid();
        let pi = StationaryPolicy::tabular(g.clone(), vec![vec![0.5]; g.node_count()]).unwrap();
        let amb = toy_amb(0.05);
        // Zero cost: v = 0.
        problem.stage_cost = Arc::new(|_: &[f64], _: &[f64]| 0.0);
        let v0 = GridValueFunction::constant(g.clone(), 1.0);
        let (v, rep) = policy_evaluation(&pi, &problem, &amb, &v0, 1e-10, 2000, &BellmanOpts::default())
            .unwrap();
        assert!(rep.converged);
        assert!(v.values().iter().all(|&x| x.abs() < 1e-8));

        // Fixed-point residual bound for the real cost.
        let problem = toy_problem();
        let delta = 1e-7;
        let (v_pi, rep) =
            policy_evaluation(&pi, &problem, &amb, &v0, delta, 5000, &BellmanOpts::default()).unwrap();
        assert!(rep.converged);
        let mut cache = SweepCache::for_policy(g.clone(), &pi, &problem, &amb).unwrap();
        let (tv, _) = cache.sweep(&v_pi, &problem, &amb, &BellmanOpts::default()).unwrap();
        let resid = weighted_sup_norm_diff(&tv, &v_pi, &problem.weight).unwrap();
        let tau = problem.tau();
        assert!(resid <= delta / (1.0 - tau), "{resid}");
    }

    #[test]
    fn policy_evaluation_theta_zero_matches_saa() {
        let problem = toy_problem();
        let amb = toy_amb(0.0);
        let g = toy_grid();
        let pi = StationaryPolicy::tabular(g.clone(), vec![vec![-0.5]; g.node_count()]).unwrap();
        let v0 = GridValueFunction::constant(g.clone(), 0.0);
        let (v_pi, _) =
            policy_evaluation(&pi, &problem, &amb, &v0, 1e-10, 5000, &BellmanOpts::default()).unwrap();

        // Independent SAA policy evaluation.
        let mut v = GridValueFunction::constant(g.clone(), 0.0);
        for _ in 0..500 {
            let mut next = vec![0.0; g.node_count()];
            for k in 0..g.node_count() {
                let x = g.coords(k);
                let u = vec![-0.5];
                let mut total = (problem.stage_cost)(&x, &u);
                for w in amb.nu.atoms() {
                    let nx = (problem.dynamics)(&x, &u, w);
                    total += problem.alpha * v.evaluate_clamping(&nx).unwrap().0 / 3.0;
                }
                next[k] = total;
            }
            v = GridValueFunction::new(g.clone(), next).unwrap();
        }
        for (a, b) in v_pi.values().iter().zip(v.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn pi_from_optimal_policy_stops_fast_and_matches_vi() {
        let problem = toy_problem();
        let amb = toy_amb(0.05);
        let g = toy_grid();
        let v0 = GridValueFunction::constant(g.clone(), 0.0);
        let delta = 1e-7;
        let (v_vi, pi_vi, _) =
            value_iteration(&problem, &amb, &v0, StopRule::Delta(delta), 2000, &BellmanOpts::default())
                .unwrap();

        // Starting PI from the VI-optimal policy terminates immediately-ish.
        let (_, v_pi, rep) =
            policy_iteration(&problem, &amb, &pi_vi, delta, 1e-5, 50, &BellmanOpts::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations <= 3, "outer iterations = {}", rep.iterations);
        let tau = problem.tau();
        let tol = 2.0 * delta.max(1e-5) / (1.0 - tau);
        let d = weighted_sup_norm_diff(&v_pi, &v_vi, &problem.weight).unwrap();
        assert!(d <= tol, "PI vs VI gap {d} > {tol}");

        // PI values are nonincreasing outer-to-outer (monotone improvement).
        let pi0 = StationaryPolicy::tabular(g.clone(), vec![vec![0.5]; g.node_count()]).unwrap();
        let mut prev: Option<GridValueFunction> = None;
        let mut pi_cur = pi0;
        for _ in 0..5 {
            let (v_cur, _) = policy_evaluation(&pi_cur, &problem, &amb, &v0, delta, 10000, &BellmanOpts::default())
                .unwrap();
            if let Some(p) = &prev {
                for (a, b) in v_cur.values().iter().zip(p.values()) {
                    assert!(*a <= b + 1e-5, "monotonicity violated: {a} > {b}");
                }
            }
            let mut cache = SweepCache::for_operator(g.clone(), &problem, &amb).unwrap();
            let (_, actions) = cache.sweep(&v_cur, &problem, &amb, &BellmanOpts::default()).unwrap();
            pi_cur = StationaryPolicy::tabular(g.clone(), actions).unwrap();
            prev = Some(v_cur);
        }
    }

    #[test]
    fn mpi_limits_match_vi_and_pi() {
        let problem = toy_problem();
        let amb = toy_amb(0.05);
        let g = toy_grid();
        let v0 = GridValueFunction::constant(g.clone(), 0.0);
        let delta = 1e-7;
        let (v_vi, _, _) =
            value_iteration(&problem, &amb, &v0, StopRule::Delta(delta), 3000, &BellmanOpts::default())
                .unwrap();

        // M_k = 1 behaves as VI.
        let (_, v_m1, _) =
            modified_policy_iteration(&problem, &amb, &v0, &|_| 1, delta, 3000, &BellmanOpts::default())
                .unwrap();
        let d1 = weighted_sup_norm_diff(&v_m1, &v_vi, &problem.weight).unwrap();
        assert!(d1 < 1e-4, "MPI(1) vs VI gap {d1}");

        // Large M_k behaves as PI.
        let (_, v_mbig, _) =
            modified_policy_iteration(&problem, &amb, &v0, &|_| 400, delta, 200, &BellmanOpts::default())
                .unwrap();
        let dbig = weighted_sup_norm_diff(&v_mbig, &v_vi, &problem.weight).unwrap();
        assert!(dbig < 1e-4, "MPI(big) vs VI gap {dbig}");

        // Default M_k = 5.
        let (_, v_m5, _) =
            modified_policy_iteration(&problem, &amb, &v0, &|_| 5, delta, 1000, &BellmanOpts::default())
                .unwrap();
        let d5 = weighted_sup_norm_diff(&v_m5, &v_vi, &problem.weight).unwrap();
        assert!(d5 < 1e-4, "MPI(5) vs VI gap {d5}");
    }

    #[test]
    fn registry_finds_all_solvers_and_they_agree() {
        let problem = toy_problem();
        let amb = toy_amb(0.05);
        let g = toy_grid();
        let v0 = GridValueFunction::constant(g, 0.0);
        let opts = SolveOptions { delta: 1e-7, ..Default::default() };
        let mut values = Vec::new();
        for name in ["vi", "pi", "mpi"] {
            let solver = get_solver(name).unwrap();
            assert_eq!(solver.name(), name);
            let out = solver.solve(&problem, &amb, &v0, &opts).unwrap();
            assert!(out.report.converged, "{name} did not converge");
            values.push(out.value);
        }
        for pair in values.windows(2) {
            let d = weighted_sup_norm_diff(&pair[0], &pair[1], &problem.weight).unwrap();
            assert!(d < 1e-4, "solver disagreement {d}");
        }
        assert!(get_solver("nope").is_err());
    }

    #[test]
    fn report_csv_has_header_and_rows() {
        let rep = SolverReport {
            iterations: 2,
            final_residual: 0.5,
            bound_k: None,
            history: vec![1.0, 0.5],
            wall_times: vec![0.1, 0.2],
            converged: false,
        };
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("iteration,residual,wall_time"));
        assert_eq!(s.lines().count(), 3);
    }
}
