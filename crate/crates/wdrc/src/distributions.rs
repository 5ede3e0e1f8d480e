//! Discrete probability distributions, ground metrics, and Wasserstein
//! distances of order `p` solved as dense transport linear programs.

use crate::simplex::{self, LpSolution};
use crate::{Error, Result};
use std::io::Read;

const WEIGHT_SUM_TOL: f64 = 1e-12;
const MARGINAL_TOL: f64 = 1e-10;

/// Finitely supported distribution: atoms in `R^l` with nonnegative weights.
#[derive(Debug, Clone)]
pub struct EmpiricalDistribution {
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl EmpiricalDistribution {
    /// Build from explicit atoms and weights. Weights must be nonnegative
    /// and sum to 1.
    pub fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidInput("distribution needs at least one atom".into()));
        }
        if atoms.len() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} atoms vs {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        let dim = atoms[0].len();
        if dim == 0 || atoms.iter().any(|a| a.len() != dim) {
            return Err(Error::DimensionMismatch("atoms must share a positive dimension".into()));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidInput("negative weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "weights sum to {total}, expected 1 within {WEIGHT_SUM_TOL}"
            )));
        }
        Ok(Self { atoms, weights })
    }

    /// Uniform empirical distribution `nu_N` over raw samples.
    pub fn from_samples(samples: Vec<Vec<f64>>) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty sample set".into()));
        }
        let w = 1.0 / n as f64;
        let mut weights = vec![w; n];
        // Compensate rounding so the invariant holds exactly.
        let sum: f64 = weights.iter().sum();
        weights[0] += 1.0 - sum;
        Self::new(samples, weights)
    }

    /// Point mass at `a`.
    pub fn dirac(a: Vec<f64>) -> Result<Self> {
        Self::new(vec![a], vec![1.0])
    }

    /// Samples ingested from CSV: one row per sample, columns are
    /// coordinates. `has_header` skips the first row.
    pub fn from_csv<R: Read>(reader: R, has_header: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(has_header)
            .flexible(false)
            .from_reader(reader);
        let mut samples = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
            let row: std::result::Result<Vec<f64>, _> =
                rec.iter().map(|f| f.trim().parse::<f64>()).collect();
            samples.push(row.map_err(|e| Error::InvalidInput(format!("csv: {e}")))?);
        }
        Self::from_samples(samples)
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    /// Per-coordinate mean of the distribution.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (a, &w) in self.atoms.iter().zip(&self.weights) {
            for (mi, &ai) in m.iter_mut().zip(a) {
                *mi += w * ai;
            }
        }
        m
    }
}

/// Euclidean-norm ground metric raised to order `p >= 1`.
#[derive(Debug, Clone, Copy)]
pub struct GroundMetric {
    p: f64,
}

impl GroundMetric {
    pub fn euclidean(p: f64) -> Result<Self> {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(Error::InvalidInput(format!("Wasserstein order p = {p} must be in [1, inf)")));
        }
        Ok(Self { p })
    }

    pub fn order(&self) -> f64 {
        self.p
    }

    /// `d(a, b)`: the Euclidean distance.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// Transport cost `d(a, b)^p`.
    pub fn cost(&self, a: &[f64], b: &[f64]) -> f64 {
        let d = self.distance(a, b);
        if self.p == 1.0 {
            d
        } else if self.p == 2.0 {
            d * d
        } else {
            d.powf(self.p)
        }
    }
}

/// Optimal coupling between two discrete distributions.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// `coupling[i][j]` is the mass moved from source atom `i` to target atom `j`.
    pub coupling: Vec<Vec<f64>>,
    /// Total transport cost `sum_ij coupling[i][j] d(a_i, b_j)^p`.
    pub cost: f64,
}

impl TransportPlan {
    /// Check marginal feasibility against the given source/target weights.
    pub fn check_marginals(&self, source: &[f64], target: &[f64]) -> Result<()> {
        for (i, row) in self.coupling.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - source[i]).abs() > MARGINAL_TOL {
                return Err(Error::Numerical(format!(
                    "row {i} sums to {s}, expected {}",
                    source[i]
                )));
            }
        }
        for j in 0..target.len() {
            let s: f64 = self.coupling.iter().map(|row| row[j]).sum();
            if (s - target[j]).abs() > MARGINAL_TOL {
                return Err(Error::Numerical(format!(
                    "column {j} sums to {s}, expected {}",
                    target[j]
                )));
            }
        }
        Ok(())
    }
}

/// Order-`p` Wasserstein distance between two discrete distributions,
/// together with an optimal transport plan.
pub fn wasserstein_distance(
    mu: &EmpiricalDistribution,
    nu: &EmpiricalDistribution,
    metric: &GroundMetric,
) -> Result<(f64, TransportPlan)> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch(format!(
            "atom dimensions {} vs {}",
            mu.dim(),
            nu.dim()
        )));
    }
    let ns = mu.len();
    let nt = nu.len();

    // Transport LP: variables kappa_ij >= 0, row sums = mu weights, column
    // sums = nu weights. One equality is redundant; the simplex handles it.
    let nvars = ns * nt;
    let mut a = vec![vec![0.0f64; nvars]; ns + nt];
    let mut c = vec![0.0f64; nvars];
    for i in 0..ns {
        for j in 0..nt {
            let k = i * nt + j;
            a[i][k] = 1.0;
            a[ns + j][k] = 1.0;
            c[k] = metric.cost(&mu.atoms[i], &nu.atoms[j]);
        }
    }
    let mut b = Vec::with_capacity(ns + nt);
    b.extend_from_slice(mu.weights());
    b.extend_from_slice(nu.weights());

    let LpSolution { x, objective, .. } = simplex::solve_equality_form(&a, &b, &c)?;

    let mut coupling = vec![vec![0.0f64; nt]; ns];
    for i in 0..ns {
        for j in 0..nt {
            coupling[i][j] = x[i * nt + j].max(0.0);
        }
    }
    let cost = objective.max(0.0);
    let distance = cost.powf(1.0 / metric.order());
    Ok((distance, TransportPlan { coupling, cost }))
}

/// Dual potentials of the transport LP, one per source atom and one per
/// target atom. Feasibility (`phi_i + psi_j <= d_ij^p`) certifies optimality.
pub fn transport_duals(
    mu: &EmpiricalDistribution,
    nu: &EmpiricalDistribution,
    metric: &GroundMetric,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ns = mu.len();
    let nt = nu.len();
    let nvars = ns * nt;
    let mut a = vec![vec![0.0f64; nvars]; ns + nt];
    let mut c = vec![0.0f64; nvars];
    for i in 0..ns {
        for j in 0..nt {
            let k = i * nt + j;
            a[i][k] = 1.0;
            a[ns + j][k] = 1.0;
            c[k] = metric.cost(&mu.atoms[i], &nu.atoms[j]);
        }
    }
    let mut b = Vec::with_capacity(ns + nt);
    b.extend_from_slice(mu.weights());
    b.extend_from_slice(nu.weights());
    let sol = simplex::solve_equality_form(&a, &b, &c)?;
    Ok((sol.duals[..ns].to_vec(), sol.duals[ns..].to_vec()))
}

/// True iff `W_p(mu, center) <= theta` (with a 1e-12 feasibility slack).
pub fn ball_membership(
    mu: &EmpiricalDistribution,
    center: &EmpiricalDistribution,
    theta: f64,
    metric: &GroundMetric,
) -> Result<bool> {
    if theta < 0.0 {
        return Err(Error::InvalidInput(format!("negative radius theta = {theta}")));
    }
    let (dist, _) = wasserstein_distance(mu, center, metric)?;
    Ok(dist <= theta + 1e-12)
}
