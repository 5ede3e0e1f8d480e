//! Experiment reproduction: the investment-consumption problem, SAA
//! baselines, out-of-sample cost estimation, reliability sweeps, and the
//! DR-vs-SAA comparison with common random numbers.

use crate::bellman::{Ambiguity, BellmanOpts};
use crate::distributions::{EmpiricalDistribution, GroundMetric};
use crate::problem::{ActionSet, ControlProblem, Grid, GridValueFunction, StationaryPolicy, WeightFn};
use crate::solvers::{value_iteration, StopRule};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Draws one disturbance vector from the "true" distribution.
pub type TrueSampler = Arc<dyn Fn(&mut ChaCha8Rng) -> Vec<f64> + Send + Sync>;

/// Projects a (possibly interpolated) action back into the feasible set.
pub type ProjectionFn = Arc<dyn Fn(&[f64], &mut Vec<f64>) + Send + Sync>;

/// Experiment parameters; seeds are mandatory everywhere.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub problem: String,
    pub n_list: Vec<usize>,
    pub theta_list: Vec<f64>,
    pub trials: usize,
    pub horizon: usize,
    pub rollouts: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: "invest".into(),
            n_list: vec![5, 10, 20],
            theta_list: vec![0.0, 0.005, 0.01, 0.02, 0.05, 0.1],
            trials: 200,
            horizon: 200,
            rollouts: 1000,
            seed: 0,
        }
    }
}

/// Reliability estimate for one `(theta, N)` cell.
#[derive(Debug, Clone)]
pub struct ReliabilityReport {
    pub theta: f64,
    pub n: usize,
    /// Fraction of trials whose out-of-sample cost stayed below the
    /// certificate (conservatively counted: one standard error subtracted
    /// from the cost estimate before comparing).
    pub estimate: f64,
    /// `sqrt(p (1-p) / trials)`.
    pub standard_error: f64,
    pub trials: usize,
    /// Trials excluded because a solver failed.
    pub excluded: usize,
    /// Mean out-of-sample cost over included trials.
    pub mean_cost: f64,
}

/// Independent N(mean, sd^2) disturbance per draw (scalar disturbance).
pub fn gaussian_sampler(mean: f64, sd: f64) -> TrueSampler {
    Arc::new(move |rng: &mut ChaCha8Rng| {
        // Box-Muller transform.
        let u1: f64 = rng.gen::<f64>().max(1e-300);
        let u2: f64 = rng.gen::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        vec![mean + sd * z]
    })
}

/// Always the same disturbance (for deterministic oracles).
pub fn point_mass_sampler(w: Vec<f64>) -> TrueSampler {
    Arc::new(move |_| w.clone())
}

/// Standard normal inverse CDF (Acklam's rational approximation, |err| < 1.2e-9).
fn inv_norm_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let a = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239e0,
    ];
    let b = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    let c = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838e0,
        -2.549732539343734e0,
        4.374664141464968e0,
        2.938163982698783e0,
    ];
    let d = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996e0,
        3.754408661907416e0,
    ];
    let plow = 0.02425;
    if p < plow {
        let q = (-2.0 * p.ln()).sqrt();
        (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
            / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    } else if p <= 1.0 - plow {
        let q = p - 0.5;
        let r = q * q;
        (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
            / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    } else {
        -inv_norm_cdf(1.0 - p)
    }
}

/// Equal-weight stratified quadrature of N(mean, sd^2): atom i is the
/// conditional median of stratum `[i/m, (i+1)/m)` approximated by the
/// inverse CDF at the stratum midpoint.
pub fn gaussian_quadrature(mean: f64, sd: f64, m: usize) -> Result<Ambiguity> {
    if m < 2 {
        return Err(Error::InvalidInput(format!("quadrature size m = {m} must be >= 2")));
    }
    if !(sd > 0.0) {
        return Err(Error::InvalidInput(format!("sd = {sd} must be > 0")));
    }
    let atoms: Vec<Vec<f64>> = (0..m)
        .map(|i| vec![mean + sd * inv_norm_cdf((i as f64 + 0.5) / m as f64)])
        .collect();
    Ambiguity::new(
        EmpiricalDistribution::from_samples(atoms)?,
        0.0,
        GroundMetric::euclidean(1.0)?,
        vec![],
    )
}

/// Exact (up to grid interpolation and quadrature) expected discounted cost
/// of a stationary policy under the distribution encoded by `quad`, read off
/// at the setup's first initial state. Deterministic: no Monte Carlo noise,
/// so identical policies produce bitwise-equal costs.
pub fn exact_policy_cost(
    setup: &TrialSetup,
    policy: &StationaryPolicy,
    quad: &Ambiguity,
) -> Result<f64> {
    let x0 = setup
        .x0_set
        .first()
        .ok_or_else(|| Error::Config("exact_policy_cost needs at least one x0".into()))?;
    let v0 = GridValueFunction::constant(setup.grid.clone(), 0.0);
    let (v, _) = crate::solvers::policy_evaluation(
        policy,
        &setup.problem,
        quad,
        &v0,
        1e-9,
        100_000,
        &setup.bellman,
    )?;
    Ok(v.evaluate_clamping(x0)?.0)
}

/// Investment-consumption problem: wealth dynamics
/// `x' = eta (x - u1 - u2) + w u1` with utility `U(u2) = u2 - zeta u2^2`
/// (stage cost `-U`), actions `{u >= 0, u1 + u2 <= x}` discretized on a
/// state-scaled triangular grid with `action_m + 1` points per edge.
pub fn investment_problem(
    zeta: f64,
    alpha: f64,
    eta: f64,
    x_max: f64,
    grid_n: usize,
    action_m: usize,
) -> Result<(ControlProblem, Arc<Grid>)> {
    if !(zeta > 0.0) {
        return Err(Error::InvalidInput(format!("zeta = {zeta} must be > 0")));
    }
    if !(eta >= 1.0) {
        return Err(Error::InvalidInput(format!("eta = {eta} must be >= 1")));
    }
    if x_max <= 0.0 || grid_n < 2 || action_m < 1 {
        return Err(Error::Config("need x_max > 0, grid_n >= 2, action_m >= 1".into()));
    }
    let grid = Arc::new(Grid::uniform(&[0.0], &[x_max], &[grid_n])?);
    let m = action_m;
    let actions = Arc::new(move |x: &[f64]| -> Vec<Vec<f64>> {
        let cap = x[0].max(0.0);
        let mut out = Vec::new();
        for i in 0..=m {
            for j in 0..=(m - i) {
                let u1 = cap * i as f64 / m as f64;
                let u2 = cap * j as f64 / m as f64;
                if out.is_empty() || cap > 0.0 {
                    out.push(vec![u1, u2]);
                }
            }
        }
        out
    });
    // Utility peaks at u2 = 1/(2 zeta); |c| <= that peak value on the grid.
    let peak = (1.0 / (2.0 * zeta)).min(x_max);
    let b = (peak - zeta * peak * peak).abs().max(1e-6);
    let problem = ControlProblem::new(
        Arc::new(move |x: &[f64], u: &[f64], w: &[f64]| {
            vec![eta * (x[0] - u[0] - u[1]) + w[0] * u[0]]
        }),
        Arc::new(move |_x: &[f64], u: &[f64]| -(u[1] - zeta * u[1] * u[1])),
        ActionSet::PerState(actions),
        alpha,
        WeightFn::One,
        b,
        1.0,
        vec![0.5],
        vec![1.6],
    )?;
    Ok((problem, grid))
}

/// Clamp an interpolated investment action to `{u >= 0, u1 + u2 <= x}`.
pub fn investment_projection() -> ProjectionFn {
    Arc::new(|x: &[f64], u: &mut Vec<f64>| {
        for v in u.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let cap = x[0].max(0.0);
        let total: f64 = u.iter().sum();
        if total > cap {
            let scale = if total > 0.0 { cap / total } else { 0.0 };
            for v in u.iter_mut() {
                *v *= scale;
            }
        }
    })
}

/// Precomputed per-component interpolants for a tabular policy; avoids
/// rebuilding them at every simulation step.
pub struct PolicyLookup {
    comps: Vec<GridValueFunction>,
    fallback: StationaryPolicy,
}

impl PolicyLookup {
    pub fn new(policy: &StationaryPolicy) -> Result<Self> {
        let comps = match policy {
            StationaryPolicy::Tabular { grid, actions } => {
                let m = actions[0].len();
                (0..m)
                    .map(|c| {
                        GridValueFunction::new(grid.clone(), actions.iter().map(|a| a[c]).collect())
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            _ => Vec::new(),
        };
        Ok(Self { comps, fallback: policy.clone() })
    }

    pub fn action(&self, x: &[f64], buf: &mut Vec<f64>) -> Result<()> {
        if self.comps.is_empty() {
            *buf = self.fallback.action(x)?;
            return Ok(());
        }
        buf.clear();
        for c in &self.comps {
            buf.push(c.evaluate_clamping(x)?.0);
        }
        Ok(())
    }
}

/// Out-of-sample Monte Carlo estimate of the discounted cost of a policy
/// under fresh disturbances. Per-rollout seeds are derived from `seed` and
/// the rollout index, so results are independent of evaluation order.
#[derive(Debug)]
pub struct OutOfSample {
    pub mean: f64,
    pub per_rollout: Vec<f64>,
    /// `alpha^T b xi_max / (1 - tau)`.
    pub truncation_bound: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn out_of_sample_cost(
    problem: &ControlProblem,
    policy: &StationaryPolicy,
    project: Option<&ProjectionFn>,
    sampler: &TrueSampler,
    x0: &[f64],
    horizon: usize,
    rollouts: usize,
    seed: u64,
    trunc_tol: f64,
) -> Result<OutOfSample> {
    if horizon == 0 || rollouts == 0 {
        return Err(Error::InvalidInput("horizon and rollouts must be >= 1".into()));
    }
    let tau = problem.tau();
    let bound = problem.alpha.powi(horizon as i32) * problem.growth_b / (1.0 - tau);
    if bound > trunc_tol {
        let required =
            ((trunc_tol * (1.0 - tau) / problem.growth_b).ln() / problem.alpha.ln()).ceil() as usize;
        return Err(Error::Config(format!(
            "truncation bound {bound:.3e} exceeds tolerance {trunc_tol:.3e}; need horizon >= {required}"
        )));
    }
    let lookup = PolicyLookup::new(policy)?;
    let mut per_rollout = Vec::with_capacity(rollouts);
    let mut u = Vec::new();
    for r in 0..rollouts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
        let mut x = x0.to_vec();
        let mut cost = 0.0;
        let mut disc = 1.0;
        for t in 0..horizon {
            lookup.action(&x, &mut u)?;
            if let Some(p) = project {
                p(&x, &mut u);
            }
            cost += disc * (problem.stage_cost)(&x, &u);
            disc *= problem.alpha;
            let w = sampler(&mut rng);
            x = (problem.dynamics)(&x, &u, &w);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("state blew up at step {t} of rollout {r}")));
            }
        }
        per_rollout.push(cost);
    }
    let mean = per_rollout.iter().sum::<f64>() / rollouts as f64;
    Ok(OutOfSample { mean, per_rollout, truncation_bound: bound })
}

fn derive_seed(master: u64, stream: u64) -> u64 {
    master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Shared setup for Monte Carlo trials on a grid-discretized problem.
pub struct TrialSetup {
    pub problem: ControlProblem,
    pub grid: Arc<Grid>,
    pub metric: GroundMetric,
    /// Uniform support points added to the sample atoms when building the
    /// adversary's disturbance grid.
    pub w_extra: usize,
    pub sampler: TrueSampler,
    pub x0_set: Vec<Vec<f64>>,
    pub horizon: usize,
    pub rollouts: usize,
    pub delta: f64,
    pub bellman: BellmanOpts,
    pub project: Option<ProjectionFn>,
}

impl TrialSetup {
    /// Standard investment setup used by experiments.
    pub fn investment(grid_n: usize, action_m: usize) -> Result<Self> {
        let (problem, grid) = investment_problem(0.25, 0.9, 1.02, 1.4, grid_n, action_m)?;
        Ok(Self {
            problem,
            grid,
            metric: GroundMetric::euclidean(1.0)?,
            w_extra: 7,
            sampler: gaussian_sampler(1.08, 0.1),
            x0_set: vec![vec![1.0]],
            horizon: 100,
            rollouts: 300,
            delta: 2e-4,
            bellman: BellmanOpts::fast(),
            project: Some(investment_projection()),
        })
    }

    fn ambiguity(&self, samples: Vec<Vec<f64>>, theta: f64) -> Result<Ambiguity> {
        let nu = EmpiricalDistribution::from_samples(samples)?;
        let counts = vec![self.w_extra.max(2); self.problem.disturbance_lower.len()];
        Ambiguity::with_uniform_grid(
            nu,
            theta,
            self.metric,
            &self.problem.disturbance_lower,
            &self.problem.disturbance_upper,
            &counts,
        )
    }

    fn draw_samples(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| (self.sampler)(rng)).collect()
    }
}

/// Solve the DR problem for each radius in `thetas`, warm-starting the value
/// function along the sweep. Returns `(value, policy)` per theta.
pub fn solve_theta_sweep(
    setup: &TrialSetup,
    samples: &[Vec<f64>],
    thetas: &[f64],
) -> Result<Vec<(GridValueFunction, StationaryPolicy)>> {
    let mut out = Vec::with_capacity(thetas.len());
    let mut v0 = GridValueFunction::constant(setup.grid.clone(), 0.0);
    for &theta in thetas {
        let amb = setup.ambiguity(samples.to_vec(), theta)?;
        let (v, pi, _) = value_iteration(
            &setup.problem,
            &amb,
            &v0,
            StopRule::Delta(setup.delta),
            5000,
            &setup.bellman,
        )?;
        v0 = v.clone();
        out.push((v, pi));
    }
    Ok(out)
}

/// SAA policy: the DR solve with radius zero.
pub fn saa_policy(
    setup: &TrialSetup,
    samples: &[Vec<f64>],
) -> Result<(GridValueFunction, StationaryPolicy)> {
    Ok(solve_theta_sweep(setup, samples, &[0.0])?.pop().unwrap())
}

/// Per-theta reliability and mean cost over `trials` independent training
/// draws of size `n`. A trial succeeds at radius theta when the out-of-sample
/// cost estimate minus one standard error is at most the certificate
/// `v_star(x0)` at every initial state.
pub fn reliability_sweep(
    setup: &TrialSetup,
    thetas: &[f64],
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<ReliabilityReport>> {
    if trials < 30 {
        return Err(Error::InvalidInput(format!("trials = {trials} must be >= 30")));
    }
    if thetas.is_empty() {
        return Err(Error::InvalidInput("empty theta sweep".into()));
    }
    let mut successes = vec![0usize; thetas.len()];
    let mut cost_sums = vec![0.0f64; thetas.len()];
    let mut excluded = 0usize;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, trial as u64));
        let samples = setup.draw_samples(n, &mut rng);
        let solved = match solve_theta_sweep(setup, &samples, thetas) {
            Ok(s) => s,
            Err(_) => {
                excluded += 1;
                continue;
            }
        };
        let eval_seed = derive_seed(seed, 1_000_000 + trial as u64);
        for (ti, (v, pi)) in solved.iter().enumerate() {
            let mut ok = true;
            let mut cost_at_first = 0.0;
            for (xi, x0) in setup.x0_set.iter().enumerate() {
                let cert = v.evaluate_clamping(x0)?.0;
                let oos = out_of_sample_cost(
                    &setup.problem,
                    pi,
                    setup.project.as_ref(),
                    &setup.sampler,
                    x0,
                    setup.horizon,
                    setup.rollouts,
                    eval_seed,
                    f64::INFINITY,
                )?;
                let se = standard_error(&oos.per_rollout);
                if oos.mean - se > cert {
                    ok = false;
                }
                if xi == 0 {
                    cost_at_first = oos.mean;
                }
            }
            if ok {
                successes[ti] += 1;
            }
            cost_sums[ti] += cost_at_first;
        }
    }
    let done = trials - excluded;
    if done == 0 {
        return Err(Error::NonConverged("all trials failed".into()));
    }
    Ok(thetas
        .iter()
        .enumerate()
        .map(|(ti, &theta)| {
            let p = successes[ti] as f64 / done as f64;
            ReliabilityReport {
                theta,
                n,
                estimate: p,
                standard_error: (p * (1.0 - p) / done as f64).sqrt(),
                trials: done,
                excluded,
                mean_cost: cost_sums[ti] / done as f64,
            }
        })
        .collect())
}

/// Single-radius convenience wrapper around [`reliability_sweep`].
pub fn reliability_estimate(
    setup: &TrialSetup,
    theta: f64,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<ReliabilityReport> {
    Ok(reliability_sweep(setup, &[theta], n, trials, seed)?.pop().unwrap())
}

fn standard_error(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (var / n).sqrt()
}

/// DR-vs-SAA comparison over independent training draws, evaluated with
/// common random numbers (the same test seed for every policy of a draw).
#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub thetas: Vec<f64>,
    /// Mean out-of-sample cost per theta (over draws).
    pub dr_mean: Vec<f64>,
    pub saa_mean: f64,
    /// Per-draw costs: `per_draw[d] = (saa_cost, dr_costs_per_theta)`.
    pub per_draw: Vec<(f64, Vec<f64>)>,
    pub best_theta_index: usize,
}

pub fn dr_vs_saa_comparison(
    setup: &TrialSetup,
    n: usize,
    thetas: &[f64],
    training_draws: usize,
    seed: u64,
) -> Result<ComparisonTable> {
    if training_draws < 20 {
        return Err(Error::InvalidInput(format!(
            "training_draws = {training_draws} must be >= 20"
        )));
    }
    if thetas.is_empty() {
        return Err(Error::InvalidInput("empty theta list".into()));
    }
    let x0 = setup
        .x0_set
        .first()
        .ok_or_else(|| Error::Config("comparison needs at least one x0".into()))?
        .clone();
    let mut per_draw = Vec::with_capacity(training_draws);
    let mut dr_sums = vec![0.0f64; thetas.len()];
    let mut saa_sum = 0.0f64;
    for draw in 0..training_draws {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7_000_000 + draw as u64));
        let samples = setup.draw_samples(n, &mut rng);
        let (_, saa_pi) = saa_policy(setup, &samples)?;
        let solved = solve_theta_sweep(setup, &samples, thetas)?;
        // Common random numbers: one evaluation seed shared by all policies.
        let eval_seed = derive_seed(seed, 8_000_000 + draw as u64);
        let eval = |pi: &StationaryPolicy| -> Result<f64> {
            Ok(out_of_sample_cost(
                &setup.problem,
                pi,
                setup.project.as_ref(),
                &setup.sampler,
                &x0,
                setup.horizon,
                setup.rollouts,
                eval_seed,
                f64::INFINITY,
            )?
            .mean)
        };
        let saa_cost = eval(&saa_pi)?;
        let mut dr_costs = Vec::with_capacity(thetas.len());
        for (ti, (_, pi)) in solved.iter().enumerate() {
            let c = eval(pi)?;
            dr_sums[ti] += c;
            dr_costs.push(c);
        }
        saa_sum += saa_cost;
        per_draw.push((saa_cost, dr_costs));
    }
    let dr_mean: Vec<f64> = dr_sums.iter().map(|s| s / training_draws as f64).collect();
    let best_theta_index = dr_mean
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    Ok(ComparisonTable {
        thetas: thetas.to_vec(),
        dr_mean,
        saa_mean: saa_sum / training_draws as f64,
        per_draw,
        best_theta_index,
    })
}

/// Write a reliability grid as CSV: `theta,n,reliability,se,trials,mean_cost`.
pub fn write_reliability_csv<W: std::io::Write>(reports: &[ReliabilityReport], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["theta", "n", "reliability", "se", "trials", "mean_cost"])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in reports {
        wtr.write_record([
            format!("{:.6}", r.theta),
            r.n.to_string(),
            format!("{:.6}", r.estimate),
            format!("{:.6}", r.standard_error),
            r.trials.to_string(),
            format!("{:.8}", r.mean_cost),
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Write a comparison table as CSV: `theta,dr_mean_cost,saa_mean_cost,is_best`.
pub fn write_comparison_csv<W: std::io::Write>(table: &ComparisonTable, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["theta", "dr_mean_cost", "saa_mean_cost", "is_best"])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for (i, (&theta, &cost)) in table.thetas.iter().zip(&table.dr_mean).enumerate() {
        wtr.write_record([
            format!("{theta:.6}"),
            format!("{cost:.8}"),
            format!("{:.8}", table.saa_mean),
            (i == table.best_theta_index).to_string(),
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Spearman rank correlation; used for the monotone-trend checks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let mut r = vec![0.0; vals.len()];
        let mut i = 0;
        while i < idx.len() {
            // Average ranks over ties.
            let mut j = i;
            while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx <= 0.0 || vy <= 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bellman::apply_t;
    use approx::assert_relative_eq;

    fn small_setup() -> TrialSetup {
        let mut s = TrialSetup::investment(15, 4).unwrap();
        s.horizon = 40;
        s.rollouts = 40;
        s.delta = 1e-3;
        s
    }

    #[test]
    fn inverse_normal_cdf_matches_known_quantiles() {
        // (p, z) pairs from standard normal tables.
        for (p, z) in [(0.5, 0.0), (0.975, 1.959964), (0.025, -1.959964), (0.9, 1.281552)] {
            assert!((inv_norm_cdf(p) - z).abs() < 1e-6, "p = {p}");
        }
    }

    #[test]
    fn gaussian_quadrature_moments() {
        let quad = gaussian_quadrature(1.08, 0.1, 513).unwrap();
        let atoms = quad.nu.atoms();
        let m = atoms.len() as f64;
        let mean: f64 = atoms.iter().map(|a| a[0]).sum::<f64>() / m;
        let var: f64 = atoms.iter().map(|a| (a[0] - mean).powi(2)).sum::<f64>() / m;
        assert_relative_eq!(mean, 1.08, epsilon = 1e-9);
        // Stratified midpoints slightly under-disperse; tolerance reflects m = 513.
        assert_relative_eq!(var.sqrt(), 0.1, epsilon = 2e-3);
        assert!(gaussian_quadrature(1.0, 0.1, 1).is_err());
        assert!(gaussian_quadrature(1.0, 0.0, 8).is_err());
    }

    #[test]
    fn exact_policy_cost_is_deterministic_and_matches_saa_value() {
        let setup = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = setup.draw_samples(4, &mut rng);
        let (v, pi) = saa_policy(&setup, &samples).unwrap();
        // Evaluating the SAA policy under its own empirical distribution
        // reproduces the SAA value function at x0 (up to solver tolerance).
        let own = Ambiguity::new(
            EmpiricalDistribution::from_samples(samples).unwrap(),
            0.0,
            GroundMetric::euclidean(1.0).unwrap(),
            vec![],
        )
        .unwrap();
        let c1 = exact_policy_cost(&setup, &pi, &own).unwrap();
        let c2 = exact_policy_cost(&setup, &pi, &own).unwrap();
        assert_eq!(c1, c2);
        // The VI certificate stops at delta = 1e-3, worth up to
        // delta * alpha / (1 - alpha) = 9e-3 of value error.
        let cert = v.evaluate_clamping(&setup.x0_set[0]).unwrap().0;
        assert!((c1 - cert).abs() < 2e-2, "policy value {c1} vs certificate {cert}");
    }

    #[test]
    fn investment_forced_action_at_zero_wealth() {
        let (problem, _) = investment_problem(0.25, 0.9, 1.02, 1.4, 15, 6).unwrap();
        let c = problem.action_set.candidates(&[0.0]);
        assert_eq!(c, vec![vec![0.0, 0.0]]);
        assert_relative_eq!((problem.stage_cost)(&[0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn investment_myopic_consumption_peaks_at_two() {
        // With zeta = 0.25 the per-stage utility peaks at u2 = 2; on a wide
        // state box a one-step problem (v = 0, theta = 0) consumes exactly 2.
        let (problem, _) = investment_problem(0.25, 0.9, 1.02, 4.0, 21, 8).unwrap();
        let grid = Arc::new(Grid::uniform(&[0.0], &[4.0], &[21]).unwrap());
        let v = GridValueFunction::constant(grid, 0.0);
        let nu = EmpiricalDistribution::from_samples(vec![vec![1.0], vec![1.1]]).unwrap();
        let amb = Ambiguity::with_uniform_grid(
            nu,
            0.0,
            GroundMetric::euclidean(1.0).unwrap(),
            &[0.5],
            &[1.6],
            &[5],
        )
        .unwrap();
        let res = apply_t(&v, &[4.0], &problem, &amb, &BellmanOpts::default()).unwrap();
        assert_relative_eq!(res.action[1], 2.0, epsilon = 1e-9);
        assert_relative_eq!(res.value, -(2.0 - 0.25 * 4.0), epsilon = 1e-9);
    }

    #[test]
    fn investment_one_step_saa_hand_oracle() {
        // x = 1, N = 3 samples, theta = 0, v(x) = x: one-step value is
        // min_u [-(u2 - 0.25 u2^2) + 0.9 * mean_i (eta (x-u1-u2) + w_i u1)].
        let (problem, _) = investment_problem(0.25, 0.9, 1.02, 1.4, 15, 4).unwrap();
        let grid = Arc::new(Grid::uniform(&[0.0], &[3.0], &[31]).unwrap());
        let v = GridValueFunction::from_fn(grid, |x| x[0]);
        let samples = vec![vec![1.0], vec![1.1], vec![1.2]];
        let nu = EmpiricalDistribution::from_samples(samples.clone()).unwrap();
        let amb = Ambiguity::with_uniform_grid(
            nu,
            0.0,
            GroundMetric::euclidean(1.0).unwrap(),
            &[0.5],
            &[1.6],
            &[5],
        )
        .unwrap();
        let res = apply_t(&v, &[1.0], &problem, &amb, &BellmanOpts::default()).unwrap();
        let mut oracle = f64::INFINITY;
        for u in problem.action_set.candidates(&[1.0]) {
            let mut val = -(u[1] - 0.25 * u[1] * u[1]);
            for w in &samples {
                val += 0.9 / 3.0 * (1.02 * (1.0 - u[0] - u[1]) + w[0] * u[0]);
            }
            oracle = oracle.min(val);
        }
        assert_relative_eq!(res.value, oracle, epsilon = 1e-9);
    }

    #[test]
    fn out_of_sample_zero_cost_and_series_oracle() {
        // c = 0 gives 0.
        let mut setup = small_setup();
        setup.problem.stage_cost = Arc::new(|_: &[f64], _: &[f64]| 0.0);
        let pi = StationaryPolicy::tabular(
            setup.grid.clone(),
            vec![vec![0.0, 0.0]; setup.grid.node_count()],
        )
        .unwrap();
        let oos = out_of_sample_cost(
            &setup.problem,
            &pi,
            None,
            &setup.sampler,
            &[1.0],
            30,
            10,
            1,
            f64::INFINITY,
        )
        .unwrap();
        assert_relative_eq!(oos.mean, 0.0);

        // Deterministic scalar linear problem: x' = a x + w0, c = x, policy 0.
        let problem = ControlProblem::new(
            Arc::new(|x: &[f64], _: &[f64], w: &[f64]| vec![0.5 * x[0] + w[0]]),
            Arc::new(|x: &[f64], _: &[f64]| x[0]),
            ActionSet::Finite(vec![vec![0.0]]),
            0.9,
            WeightFn::One,
            100.0,
            1.0,
            vec![0.0],
            vec![1.0],
        )
        .unwrap();
        let g = Arc::new(Grid::uniform(&[-5.0], &[5.0], &[5]).unwrap());
        let pi = StationaryPolicy::tabular(g, vec![vec![0.0]; 5]).unwrap();
        let w0 = 0.2;
        let horizon = 150;
        let oos = out_of_sample_cost(
            &problem,
            &pi,
            None,
            &point_mass_sampler(vec![w0]),
            &[1.0],
            horizon,
            3,
            9,
            f64::INFINITY,
        )
        .unwrap();
        // x_t = 0.5^t x0 + w0 (1 - 0.5^t)/0.5... closed form by recursion.
        let mut x = 1.0;
        let mut oracle = 0.0;
        for t in 0..horizon {
            oracle += 0.9f64.powi(t as i32) * x;
            x = 0.5 * x + w0;
        }
        assert_relative_eq!(oos.mean, oracle, epsilon = 1e-10);
    }

    #[test]
    fn out_of_sample_truncation_tolerance_enforced() {
        let setup = small_setup();
        let pi = StationaryPolicy::tabular(
            setup.grid.clone(),
            vec![vec![0.0, 0.0]; setup.grid.node_count()],
        )
        .unwrap();
        let err = out_of_sample_cost(
            &setup.problem,
            &pi,
            None,
            &setup.sampler,
            &[1.0],
            5,
            2,
            1,
            1e-9,
        )
        .unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("horizon >="), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_sample_rollout_seeds_are_stable() {
        let setup = small_setup();
        let pi = StationaryPolicy::tabular(
            setup.grid.clone(),
            vec![vec![0.1, 0.2]; setup.grid.node_count()],
        )
        .unwrap();
        let run = |rollouts: usize| {
            out_of_sample_cost(
                &setup.problem,
                &pi,
                setup.project.as_ref(),
                &setup.sampler,
                &[1.0],
                20,
                rollouts,
                77,
                f64::INFINITY,
            )
            .unwrap()
            .per_rollout
        };
        let a = run(4);
        let b = run(7);
        // The first 4 rollouts are bitwise identical: per-rollout seeds
        // depend only on the rollout index.
        assert_eq!(a[..], b[..4]);
    }

    #[test]
    fn saa_policy_is_theta_zero_solve() {
        let setup = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = setup.draw_samples(4, &mut rng);
        let (v1, _) = saa_policy(&setup, &samples).unwrap();
        let v2 = solve_theta_sweep(&setup, &samples, &[0.0]).unwrap().remove(0).0;
        assert_eq!(v1.values(), v2.values());
    }

    #[test]
    fn huge_theta_certificate_dominates() {
        let mut setup = small_setup();
        setup.rollouts = 60;
        let rep = reliability_estimate(&setup, 5.0, 3, 30, 5).unwrap();
        assert_relative_eq!(rep.estimate, 1.0);
        assert_eq!(rep.excluded, 0);
    }

    #[test]
    fn theta_zero_reliability_is_a_probability() {
        let setup = small_setup();
        let rep = reliability_estimate(&setup, 0.0, 3, 30, 11).unwrap();
        assert!((0.0..=1.0).contains(&rep.estimate));
        assert!(rep.standard_error >= 0.0);
        assert!(reliability_estimate(&setup, 0.0, 3, 10, 11).is_err());
    }

    #[test]
    fn comparison_theta_zero_equals_saa() {
        let mut setup = small_setup();
        setup.rollouts = 30;
        setup.horizon = 30;
        let table = dr_vs_saa_comparison(&setup, 3, &[0.0], 20, 21).unwrap();
        assert_relative_eq!(table.dr_mean[0], table.saa_mean, epsilon = 1e-12);
        for (saa, dr) in &table.per_draw {
            assert_relative_eq!(*saa, dr[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn enormous_theta_is_not_best() {
        let mut setup = small_setup();
        setup.rollouts = 40;
        setup.horizon = 30;
        let table = dr_vs_saa_comparison(&setup, 3, &[0.0, 0.02, 5.0], 20, 33).unwrap();
        // The maximally conservative policy cannot beat the best column.
        let huge = *table.dr_mean.last().unwrap();
        let best = table.dr_mean[table.best_theta_index];
        assert!(huge >= best - 1e-12);
        assert_ne!(table.best_theta_index, 2);
    }

    #[test]
    fn csv_writers_emit_headers() {
        let reports = vec![ReliabilityReport {
            theta: 0.1,
            n: 5,
            estimate: 0.8,
            standard_error: 0.05,
            trials: 30,
            excluded: 0,
            mean_cost: -1.0,
        }];
        let mut buf = Vec::new();
        write_reliability_csv(&reports, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("theta,n,reliability"));

        let table = ComparisonTable {
            thetas: vec![0.0, 0.1],
            dr_mean: vec![-1.0, -1.1],
            saa_mean: -1.0,
            per_draw: vec![],
            best_theta_index: 1,
        };
        let mut buf = Vec::new();
        write_comparison_csv(&table, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("theta,dr_mean_cost"));
        assert!(s.contains("true"));
    }

    #[test]
    fn spearman_basics() {
        assert_relative_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[2.0, 4.0, 9.0]), 1.0);
        assert_relative_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[5.0, 4.0, 3.0]), -1.0);
        assert_relative_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), 0.0);
    }
}
