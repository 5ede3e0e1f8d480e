//! Closed-form distributionally robust linear-quadratic control with a
//! Wasserstein penalty (`d(w,w')^p = ||w - w'||^2`): the DR-Riccati fixed
//! point, optimal gain, worst-case disturbance atoms, the large-`lambda`
//! LQG limit, nonzero-mean augmentation, and closed-loop simulation.

use crate::distributions::EmpiricalDistribution;
use crate::problem::StationaryPolicy;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PD_MARGIN: f64 = 1e-8;
const COND_WARN: f64 = 1e12;

/// DR linear-quadratic problem instance.
#[derive(Debug, Clone)]
pub struct LqProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub alpha: f64,
    /// Wasserstein penalty parameter.
    pub lambda: f64,
    /// Disturbance samples in `R^l`.
    pub samples: EmpiricalDistribution,
}

impl LqProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        xi: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        alpha: f64,
        lambda: f64,
        samples: EmpiricalDistribution,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch("A must be square".into()));
        }
        if b.nrows() != n || xi.nrows() != n {
            return Err(Error::DimensionMismatch("B, Xi row counts must match A".into()));
        }
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::DimensionMismatch("Q must be n x n".into()));
        }
        let m = b.ncols();
        if r.nrows() != m || r.ncols() != m {
            return Err(Error::DimensionMismatch("R must be m x m".into()));
        }
        if samples.dim() != xi.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "sample dimension {} vs Xi columns {}",
                samples.dim(),
                xi.ncols()
            )));
        }
        check_symmetric(&q, "Q")?;
        check_symmetric(&r, "R")?;
        if min_sym_eig(&q) < -1e-10 {
            return Err(Error::InvalidInput("Q must be positive semidefinite".into()));
        }
        if min_sym_eig(&r) <= 0.0 {
            return Err(Error::InvalidInput("R must be positive definite".into()));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidInput(format!("alpha = {alpha} not in (0,1)")));
        }
        if !(lambda > 0.0) {
            return Err(Error::InvalidInput(format!("lambda = {lambda} must be > 0")));
        }
        Ok(Self { a, b, xi, q, r, alpha, lambda, samples })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Sample second-moment matrix after mean removal.
    pub fn sigma(&self) -> DMatrix<f64> {
        let l = self.samples.dim();
        let mean = DVector::from_vec(self.samples.mean());
        let mut sigma = DMatrix::<f64>::zeros(l, l);
        for (atom, &w) in self.samples.atoms().iter().zip(self.samples.weights()) {
            let d = DVector::from_column_slice(atom) - &mean;
            sigma += w * &d * d.transpose();
        }
        sigma
    }
}

fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(Error::InvalidInput(format!("{name} must be symmetric")));
    }
    Ok(())
}

fn min_sym_eig(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, &e| acc.min(e))
}

/// Condition number via singular values; infinite if numerically singular.
fn condition_number(m: &DMatrix<f64>) -> f64 {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
    let smin = svd.singular_values.iter().fold(f64::INFINITY, |a, &s| a.min(s));
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

fn invert(m: &DMatrix<f64>, what: &str, warnings: &mut Vec<String>) -> Result<DMatrix<f64>> {
    let cond = condition_number(m);
    if cond > COND_WARN {
        warnings.push(format!("{what}: condition number {cond:.3e} exceeds {COND_WARN:.0e}"));
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical(format!("{what}: singular matrix")))
}

/// Solution of the DR-Riccati equation.
#[derive(Debug, Clone)]
pub struct DrRiccatiSolution {
    pub p: DMatrix<f64>,
    pub z: f64,
    pub k: DMatrix<f64>,
    /// Certifies `lambda I - alpha Xi' P Xi` stayed positive definite.
    pub lambda_ok: bool,
    /// Frobenius residual of the fixed-point equation at the solution.
    pub residual: f64,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

struct RiccatiTerms {
    /// `(lambda I - alpha Xi' P Xi)^{-1}`
    m: DMatrix<f64>,
    /// `E = I + alpha Xi M Xi' P`
    e: DMatrix<f64>,
    /// `H = R + alpha B' P E B`
    h_inv: DMatrix<f64>,
    s: DMatrix<f64>,
}

fn riccati_terms(lq: &LqProblem, p: &DMatrix<f64>, warnings: &mut Vec<String>) -> Result<RiccatiTerms> {
    let l = lq.xi.ncols();
    let core = DMatrix::<f64>::identity(l, l) * lq.lambda - lq.alpha * lq.xi.transpose() * p * &lq.xi;
    let margin = min_sym_eig(&core);
    if margin <= PD_MARGIN {
        return Err(Error::Numerical(format!(
            "lambda = {} too small: smallest eigenvalue of (lambda I - alpha Xi' P Xi) is {margin:.3e}, \
             need > {PD_MARGIN:.0e}",
            lq.lambda
        )));
    }
    let m = invert(&core, "lambda I - alpha Xi' P Xi", warnings)?;
    let n = lq.a.nrows();
    let e = DMatrix::<f64>::identity(n, n) + lq.alpha * &lq.xi * &m * lq.xi.transpose() * p;
    let h = &lq.r + lq.alpha * lq.b.transpose() * p * &e * &lq.b;
    let h_inv = invert(&h, "R + alpha B'(P + alpha P Xi M Xi' P)B", warnings)?;
    let pxmxp = p * &lq.xi * &m * lq.xi.transpose() * p;
    let s = &pxmxp - e.transpose() * p * &lq.b * &h_inv * lq.b.transpose() * p * &e;
    Ok(RiccatiTerms { m, e, h_inv, s })
}

/// Solve `P = Q + alpha A'PA + alpha^2 A'S(P)A` by fixed-point iteration from
/// `P_0 = Q`, certifying `lambda I - alpha Xi'P Xi > 0` at every iterate.
pub fn solve_dr_riccati(lq: &LqProblem, tol: f64, max_iter: usize) -> Result<DrRiccatiSolution> {
    let mut warnings = Vec::new();
    let mut p = lq.q.clone();
    let mut iterations = 0usize;
    let mut diff = f64::INFINITY;
    while iterations < max_iter {
        let terms = riccati_terms(lq, &p, &mut warnings)?;
        let next = &lq.q
            + lq.alpha * lq.a.transpose() * &p * &lq.a
            + lq.alpha * lq.alpha * lq.a.transpose() * &terms.s * &lq.a;
        // Symmetrize against roundoff drift.
        let next = (&next + next.transpose()) * 0.5;
        diff = (&next - &p).norm();
        p = next;
        iterations += 1;
        if diff <= tol * (1.0 + p.norm()) {
            break;
        }
        if !diff.is_finite() {
            return Err(Error::NonConverged(format!(
                "DR-Riccati iteration diverged at iteration {iterations}"
            )));
        }
    }
    if diff > tol * (1.0 + p.norm()) {
        return Err(Error::NonConverged(format!(
            "DR-Riccati: residual {diff:.3e} after {max_iter} iterations"
        )));
    }
    let terms = riccati_terms(lq, &p, &mut warnings)?;
    let rhs = &lq.q
        + lq.alpha * lq.a.transpose() * &p * &lq.a
        + lq.alpha * lq.alpha * lq.a.transpose() * &terms.s * &lq.a;
    let residual = (&rhs - &p).norm();
    let k = -&terms.h_inv * (lq.alpha * lq.b.transpose() * p.transpose() * &terms.e * &lq.a);
    let sigma = lq.sigma();
    let l = sigma.nrows();
    let z_tr = (lq.lambda * &terms.m - DMatrix::<f64>::identity(l, l)) * &sigma;
    let z = lq.lambda / (1.0 - lq.alpha) * z_tr.trace();
    Ok(DrRiccatiSolution { p, z, k, lambda_ok: true, residual, iterations, warnings })
}

/// Rank of the controllability matrix `[B AB ... A^{n-1}B]` (SVD, tol 1e-8).
fn staircase_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let mut blocks = Vec::with_capacity(n);
    let mut cur = b.clone();
    for _ in 0..n {
        blocks.push(cur.clone());
        cur = a * cur;
    }
    let total_cols: usize = blocks.iter().map(|m| m.ncols()).sum();
    let mut ctrb = DMatrix::<f64>::zeros(n, total_cols);
    let mut col = 0;
    for blk in blocks {
        ctrb.view_mut((0, col), (n, blk.ncols())).copy_from(&blk);
        col += blk.ncols();
    }
    ctrb.rank(1e-8)
}

/// Discrete algebraic Riccati equation for the discounted LQR:
/// `P = Q + alpha A'PA - alpha^2 A'PB (R + alpha B'PB)^{-1} B'PA`,
/// with `K = -alpha (R + alpha B'PB)^{-1} B'PA`.
/// Rank deficiencies in controllability/observability produce warnings, not
/// errors; the fixed-point iteration is still attempted.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<String>)> {
    let n = a.nrows();
    let mut warnings = Vec::new();
    if staircase_rank(a, b) < n {
        warnings.push("(A, B) fails the numerical stabilizability/controllability rank check".into());
    }
    // Observability of (A, C) with Q = C'C is the controllability of (A', C').
    let eig = ((q + q.transpose()) * 0.5).symmetric_eigen();
    let mut c_rows = Vec::new();
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > 1e-12 {
            c_rows.push(ev.sqrt() * eig.eigenvectors.column(i).transpose());
        }
    }
    let c = if c_rows.is_empty() {
        DMatrix::<f64>::zeros(1, n)
    } else {
        DMatrix::from_rows(&c_rows.iter().map(|r| r.row(0).into_owned()).collect::<Vec<_>>())
    };
    if staircase_rank(&a.transpose(), &c.transpose()) < n {
        warnings.push("(A, C) with Q = C'C fails the numerical observability rank check".into());
    }

    let mut p = q.clone();
    for iters in 0..max_iter {
        let h = r + alpha * b.transpose() * &p * b;
        let h_inv = invert(&h, "R + alpha B'PB", &mut warnings)?;
        let next = q + alpha * a.transpose() * &p * a
            - alpha * alpha * a.transpose() * &p * b * &h_inv * b.transpose() * &p * a;
        let next = (&next + next.transpose()) * 0.5;
        let diff = (&next - &p).norm();
        p = next;
        if !diff.is_finite() {
            return Err(Error::NonConverged(format!("DARE iteration diverged at iteration {iters}")));
        }
        if diff <= tol * (1.0 + p.norm()) {
            let h = r + alpha * b.transpose() * &p * b;
            let h_inv = invert(&h, "R + alpha B'PB", &mut warnings)?;
            let k = -alpha * &h_inv * b.transpose() * &p * a;
            return Ok((p, k, warnings));
        }
    }
    Err(Error::NonConverged(format!("DARE: no convergence in {max_iter} iterations")))
}

/// Worst-case disturbance atoms at state `x`:
/// `w'^(i) = (lambda I - alpha Xi'P Xi)^{-1} [alpha Xi'P (A + BK) x + lambda w^(i)]`.
pub fn worst_case_atoms(sol: &DrRiccatiSolution, lq: &LqProblem, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    if !sol.lambda_ok {
        return Err(Error::InvalidInput("solution does not certify lambda large enough".into()));
    }
    if x.len() != lq.state_dim() {
        return Err(Error::DimensionMismatch("state dimension".into()));
    }
    let mut warnings = Vec::new();
    let terms = riccati_terms(lq, &sol.p, &mut warnings)?;
    let xv = DVector::from_column_slice(x);
    let closed = &lq.a + &lq.b * &sol.k;
    let shift = lq.alpha * lq.xi.transpose() * &sol.p * closed * xv;
    let mut out = Vec::with_capacity(lq.samples.len());
    for atom in lq.samples.atoms() {
        let w = DVector::from_column_slice(atom);
        let wc = &terms.m * (&shift + lq.lambda * w);
        out.push(wc.iter().copied().collect());
    }
    Ok(out)
}

/// Nonzero-mean conversion: augmented `(n+1)`-state problem with mean-removed
/// samples, plus the shift `xbar = (I - A)^{-1} Xi wbar` used to map the
/// augmented gain back to an affine policy on the original state.
pub fn augment_nonzero_mean(lq: &LqProblem) -> Result<(LqProblem, Vec<f64>)> {
    let n = lq.state_dim();
    let i_minus_a = DMatrix::<f64>::identity(n, n) - &lq.a;
    let cond = condition_number(&i_minus_a);
    if !cond.is_finite() || cond > 1e14 {
        return Err(Error::UnsupportedInstance(format!(
            "(I - A) is numerically singular (condition {cond:.3e}); no finite mean-offset state exists"
        )));
    }
    let mut warnings = Vec::new();
    let inv = invert(&i_minus_a, "I - A", &mut warnings)?;
    let wbar = DVector::from_vec(lq.samples.mean());
    let xbar = inv * &lq.xi * &wbar;

    // Block matrices A' = diag(A, 1), B' = [B; 0], Xi' = [Xi; 0].
    let mut a2 = DMatrix::<f64>::zeros(n + 1, n + 1);
    a2.view_mut((0, 0), (n, n)).copy_from(&lq.a);
    a2[(n, n)] = 1.0;
    let mut b2 = DMatrix::<f64>::zeros(n + 1, lq.b.ncols());
    b2.view_mut((0, 0), (n, lq.b.ncols())).copy_from(&lq.b);
    let mut xi2 = DMatrix::<f64>::zeros(n + 1, lq.xi.ncols());
    xi2.view_mut((0, 0), (n, lq.xi.ncols())).copy_from(&lq.xi);

    // Q' = [I xbar]' Q [I xbar].
    let mut ix = DMatrix::<f64>::zeros(n, n + 1);
    ix.view_mut((0, 0), (n, n)).copy_from(&DMatrix::<f64>::identity(n, n));
    ix.view_mut((0, n), (n, 1)).copy_from(&xbar);
    let q2 = ix.transpose() * &lq.q * &ix;
    let q2 = (&q2 + q2.transpose()) * 0.5;

    let centered: Vec<Vec<f64>> = lq
        .samples
        .atoms()
        .iter()
        .map(|a| a.iter().zip(wbar.iter()).map(|(x, m)| x - m).collect())
        .collect();
    let samples = EmpiricalDistribution::new(centered, lq.samples.weights().to_vec())?;
    let aug = LqProblem::new(a2, b2, xi2, q2, lq.r.clone(), lq.alpha, lq.lambda, samples)?;
    Ok((aug, xbar.iter().copied().collect()))
}

/// Affine policy `pi(x) = K' ((x - xbar)', 1)'` from an augmented-problem gain.
pub fn deaugment_policy(k_aug: DMatrix<f64>, xbar: Vec<f64>) -> StationaryPolicy {
    StationaryPolicy::Affine { gain: k_aug, xbar }
}

/// Disturbance source for closed-loop simulation.
pub enum DisturbanceMode<'a> {
    /// Deterministic sequence; `w_t = seq[t mod len]`.
    Fixed(&'a [Vec<f64>]),
    /// Seeded sampler drawing a fresh `w_t` each step.
    Sampler { sample: &'a dyn Fn(&mut ChaCha8Rng) -> Vec<f64>, seed: u64 },
    /// Draw uniformly among the state-dependent worst-case atoms.
    WorstCaseAtoms { sol: &'a DrRiccatiSolution, seed: u64 },
}

/// Closed-loop simulation output.
#[derive(Debug, Clone)]
pub struct SimulationResult {
    /// One state trajectory per rollout, `horizon + 1` states each.
    pub trajectories: Vec<Vec<Vec<f64>>>,
    pub discounted_cost_mean: f64,
    pub discounted_cost_per_rollout: Vec<f64>,
    /// `alpha^T * (max stage cost observed) / (1 - alpha)`.
    pub truncation_bound: f64,
}

/// Simulate `x_{t+1} = A x_t + B pi(x_t) + Xi w_t` for `rollouts` rollouts of
/// `horizon` steps, accumulating discounted quadratic costs.
pub fn closed_loop_simulate(
    lq: &LqProblem,
    policy: &StationaryPolicy,
    disturbance: &DisturbanceMode,
    x0: &[f64],
    horizon: usize,
    rollouts: usize,
) -> Result<SimulationResult> {
    if horizon == 0 || rollouts == 0 {
        return Err(Error::InvalidInput("horizon and rollouts must be >= 1".into()));
    }
    if x0.len() != lq.state_dim() {
        return Err(Error::DimensionMismatch("x0 dimension".into()));
    }
    let mut trajectories = Vec::with_capacity(rollouts);
    let mut costs = Vec::with_capacity(rollouts);
    let mut max_stage = 0.0f64;
    for rollout in 0..rollouts {
        // Per-rollout derived seed so results do not depend on scheduling.
        let mut rng = match disturbance {
            DisturbanceMode::Sampler { seed, .. } | DisturbanceMode::WorstCaseAtoms { seed, .. } => {
                ChaCha8Rng::seed_from_u64(seed.wrapping_add(rollout as u64))
            }
            DisturbanceMode::Fixed(_) => ChaCha8Rng::seed_from_u64(rollout as u64),
        };
        let mut x = DVector::from_column_slice(x0);
        let mut traj = Vec::with_capacity(horizon + 1);
        traj.push(x.iter().copied().collect::<Vec<f64>>());
        let mut cost = 0.0;
        let mut disc = 1.0;
        for t in 0..horizon {
            let xs: Vec<f64> = x.iter().copied().collect();
            let u = DVector::from_vec(policy.action(&xs)?);
            let stage = (x.transpose() * &lq.q * &x)[(0, 0)] + (u.transpose() * &lq.r * &u)[(0, 0)];
            cost += disc * stage;
            max_stage = max_stage.max(stage.abs());
            disc *= lq.alpha;
            let w = match disturbance {
                DisturbanceMode::Fixed(seq) => seq[t % seq.len()].clone(),
                DisturbanceMode::Sampler { sample, .. } => sample(&mut rng),
                DisturbanceMode::WorstCaseAtoms { sol, .. } => {
                    let atoms = worst_case_atoms(sol, lq, &xs)?;
                    atoms[rng.gen_range(0..atoms.len())].clone()
                }
            };
            if w.len() != lq.xi.ncols() {
                return Err(Error::DimensionMismatch("disturbance dimension".into()));
            }
            x = &lq.a * &x + &lq.b * u + &lq.xi * DVector::from_vec(w);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "state blew up at step {t} of rollout {rollout}"
                )));
            }
            traj.push(x.iter().copied().collect::<Vec<f64>>());
        }
        trajectories.push(traj);
        costs.push(cost);
    }
    let mean = costs.iter().sum::<f64>() / costs.len() as f64;
    let truncation_bound = lq.alpha.powi(horizon as i32) * max_stage / (1.0 - lq.alpha);
    Ok(SimulationResult {
        trajectories,
        discounted_cost_mean: mean,
        discounted_cost_per_rollout: costs,
        truncation_bound,
    })
}
