//! Power-network frequency-control model assembly: Kron reduction of the
//! admittance matrix, swing-equation state space, and zero-order-hold
//! discretization.

use crate::{Error, Result};
use nalgebra::DMatrix;
use num_complex::Complex64;
use std::io::Read;

/// Network description for the generator-frequency model.
#[derive(Debug, Clone)]
pub struct PowerNetwork {
    /// Complex bus admittance matrix (symmetric for reciprocal networks).
    pub y: DMatrix<Complex64>,
    /// Indices of generator buses (kept by Kron reduction).
    pub generators: Vec<usize>,
    /// Inertia per generator (pu s^2/rad).
    pub inertia: Vec<f64>,
    /// Damping per generator (pu s/rad).
    pub damping: Vec<f64>,
    /// Sampling time (s).
    pub dt: f64,
}

impl PowerNetwork {
    pub fn new(
        y: DMatrix<Complex64>,
        generators: Vec<usize>,
        inertia: Vec<f64>,
        damping: Vec<f64>,
        dt: f64,
    ) -> Result<Self> {
        let nb = y.nrows();
        if y.ncols() != nb {
            return Err(Error::DimensionMismatch("Y must be square".into()));
        }
        if generators.is_empty() {
            return Err(Error::InvalidInput("at least one generator bus is required".into()));
        }
        if generators.iter().any(|&g| g >= nb) {
            return Err(Error::InvalidInput("generator index out of range".into()));
        }
        if inertia.len() != generators.len() || damping.len() != generators.len() {
            return Err(Error::DimensionMismatch("one (M, D) pair per generator".into()));
        }
        if inertia.iter().any(|&m| m <= 0.0) || damping.iter().any(|&d| d <= 0.0) {
            return Err(Error::InvalidInput("inertia and damping must be > 0".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!("sampling time dt = {dt} must be > 0")));
        }
        // Reciprocity check: warn-only, reported through the returned struct's
        // asymmetry measure (callers may log it).
        Ok(Self { y, generators, inertia, damping, dt })
    }

    /// Max absolute asymmetry `|Y - Y'|`; nonzero values indicate a
    /// non-reciprocal network.
    pub fn asymmetry(&self) -> f64 {
        let n = self.y.nrows();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((self.y[(i, j)] - self.y[(j, i)]).norm());
            }
        }
        worst
    }

    /// Parse a network from two CSVs.
    ///
    /// Buses: `id,type,M,D` where type is `gen` or `load` (M, D ignored for
    /// loads). Lines: `from,to,susceptance,conductance` referring to bus ids.
    pub fn from_csv<R1: Read, R2: Read>(buses: R1, lines: R2, dt: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(buses);
        let mut ids = Vec::new();
        let mut generators = Vec::new();
        let mut inertia = Vec::new();
        let mut damping = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::InvalidInput(format!("buses csv: {e}")))?;
            if rec.len() != 4 {
                return Err(Error::InvalidInput(format!(
                    "buses csv: expected 4 columns (id,type,M,D), got {}",
                    rec.len()
                )));
            }
            let id: u64 = rec[0].parse().map_err(|e| Error::InvalidInput(format!("buses csv id: {e}")))?;
            let idx = ids.len();
            if ids.contains(&id) {
                return Err(Error::InvalidInput(format!("duplicate bus id {id}")));
            }
            ids.push(id);
            match &rec[1] {
                "gen" => {
                    let m: f64 = rec[2].parse().map_err(|e| Error::InvalidInput(format!("M: {e}")))?;
                    let d: f64 = rec[3].parse().map_err(|e| Error::InvalidInput(format!("D: {e}")))?;
                    generators.push(idx);
                    inertia.push(m);
                    damping.push(d);
                }
                "load" => {}
                other => {
                    return Err(Error::InvalidInput(format!("bus {id}: unknown type '{other}'")));
                }
            }
        }
        let nb = ids.len();
        let lookup = |id: u64| -> Result<usize> {
            ids.iter()
                .position(|&b| b == id)
                .ok_or_else(|| Error::InvalidInput(format!("line references unknown bus {id}")))
        };
        let mut y = DMatrix::<Complex64>::zeros(nb, nb);
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(lines);
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::InvalidInput(format!("lines csv: {e}")))?;
            if rec.len() != 4 {
                return Err(Error::InvalidInput(format!(
                    "lines csv: expected 4 columns (from,to,susceptance,conductance), got {}",
                    rec.len()
                )));
            }
            let f = lookup(rec[0].parse().map_err(|e| Error::InvalidInput(format!("from: {e}")))?)?;
            let t = lookup(rec[1].parse().map_err(|e| Error::InvalidInput(format!("to: {e}")))?)?;
            let b: f64 = rec[2].parse().map_err(|e| Error::InvalidInput(format!("susceptance: {e}")))?;
            let g: f64 = rec[3].parse().map_err(|e| Error::InvalidInput(format!("conductance: {e}")))?;
            let adm = Complex64::new(g, b);
            y[(f, t)] -= adm;
            y[(t, f)] -= adm;
            y[(f, f)] += adm;
            y[(t, t)] += adm;
        }
        Self::new(y, generators, inertia, damping, dt)
    }
}

/// Kron reduction: Gaussian elimination of all buses not in `keep`.
/// The returned matrix is indexed in the order of `keep`.
pub fn kron_reduce(y: &DMatrix<Complex64>, keep: &[usize]) -> Result<DMatrix<Complex64>> {
    let nb = y.nrows();
    if y.ncols() != nb {
        return Err(Error::DimensionMismatch("Y must be square".into()));
    }
    if keep.iter().any(|&k| k >= nb) {
        return Err(Error::InvalidInput("keep index out of range".into()));
    }
    let mut work = y.clone();
    let mut alive: Vec<usize> = (0..nb).collect();
    for k in 0..nb {
        if keep.contains(&k) {
            continue;
        }
        let pos = match alive.iter().position(|&a| a == k) {
            Some(p) => p,
            None => continue,
        };
        let pivot = work[(pos, pos)];
        if pivot.norm() <= 1e-12 {
            return Err(Error::Numerical(format!(
                "kron_reduce: zero diagonal at bus {k}; cannot eliminate"
            )));
        }
        let n = work.nrows();
        let mut next = DMatrix::<Complex64>::zeros(n - 1, n - 1);
        let rows: Vec<usize> = (0..n).filter(|&r| r != pos).collect();
        for (ri, &i) in rows.iter().enumerate() {
            for (ci, &j) in rows.iter().enumerate() {
                next[(ri, ci)] = work[(i, j)] - work[(i, pos)] * work[(pos, j)] / pivot;
            }
        }
        work = next;
        alive.remove(pos);
    }
    // Reorder to the order of `keep`.
    let m = keep.len();
    let mut out = DMatrix::<Complex64>::zeros(m, m);
    for (i, &ki) in keep.iter().enumerate() {
        let pi = alive.iter().position(|&a| a == ki).ok_or_else(|| {
            Error::InvalidInput(format!("keep bus {ki} was eliminated (duplicate keep entry?)"))
        })?;
        for (j, &kj) in keep.iter().enumerate() {
            let pj = alive.iter().position(|&a| a == kj).unwrap();
            out[(i, j)] = work[(pi, pj)];
        }
    }
    Ok(out)
}

/// Swing-equation state space from the Kron-reduced network.
///
/// State `(theta, theta_dot)`, continuous dynamics
/// `A_c = [[0, I], [-M^{-1} L, -M^{-1} D]]`, `B_c = [[0], [M^{-1}]]` (the
/// damping block is negative: the swing equation reads
/// `M theta_dd + D theta_d = P_m - P_e`), discretized by zero-order hold over
/// `dt` via the augmented matrix exponential.
pub fn build_swing_state_space(
    network: &PowerNetwork,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let yk = kron_reduce(&network.y, &network.generators)?;
    let n = network.generators.len();
    // Laplacian from the susceptance part of the reduced matrix.
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let b_ij = -yk[(i, j)].im; // branch susceptance between i and j
                lap[(i, j)] = -b_ij;
                lap[(i, i)] += b_ij;
            }
        }
    }
    let mut a_c = DMatrix::<f64>::zeros(2 * n, 2 * n);
    let mut b_c = DMatrix::<f64>::zeros(2 * n, n);
    for i in 0..n {
        a_c[(i, n + i)] = 1.0;
        for j in 0..n {
            a_c[(n + i, j)] = -lap[(i, j)] / network.inertia[i];
        }
        a_c[(n + i, n + i)] = -network.damping[i] / network.inertia[i];
        b_c[(n + i, i)] = 1.0 / network.inertia[i];
    }
    let (a, b) = zoh_discretize(&a_c, &b_c, network.dt)?;
    Ok((a_c, b_c, a, b))
}

/// Zero-order-hold discretization via the augmented matrix exponential
/// `exp([[A_c, B_c], [0, 0]] dt) = [[A, B], [0, I]]`.
pub fn zoh_discretize(
    a_c: &DMatrix<f64>,
    b_c: &DMatrix<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a_c.nrows();
    let m = b_c.ncols();
    if a_c.ncols() != n || b_c.nrows() != n {
        return Err(Error::DimensionMismatch("A_c, B_c shapes".into()));
    }
    let mut aug = DMatrix::<f64>::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a_c * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(b_c * dt));
    let e = matrix_exp(&aug)?;
    let a = e.view((0, 0), (n, n)).into_owned();
    let b = e.view((0, n), (n, m)).into_owned();
    Ok((a, b))
}

/// Matrix exponential by scaling-and-squaring with a Taylor core.
fn matrix_exp(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let norm = m.norm();
    if !norm.is_finite() {
        return Err(Error::Numerical("matrix_exp: non-finite input".into()));
    }
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = m / 2f64.powi(s);
    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=24 {
        term = &term * &scaled / k as f64;
        result += &term;
        if term.norm() < 1e-18 * result.norm() {
            break;
        }
    }
    for _ in 0..s {
        result = &result * &result;
    }
    if result.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix_exp: did not converge".into()));
    }
    Ok(result)
}

/// Settling times of the frequency deviations in a trajectory.
#[derive(Debug, Clone)]
pub struct FrequencyMetrics {
    /// Per-generator first time after which `|theta_dot_i|` stays below the
    /// threshold; `None` means the horizon was exceeded.
    pub per_bus: Vec<Option<f64>>,
    /// Same for the cross-bus mean of `|theta_dot|`.
    pub mean_time: Option<f64>,
}

/// `trajectory` holds states `(theta, theta_dot)` of dimension `2 n`, sampled
/// every `dt`. The threshold is `threshold_fraction` of the reference
/// deviation, taken as the largest initial `|theta_dot|`. Settling uses
/// last-crossing semantics: the reported time is the first after which the
/// deviation never again reaches the threshold within the recorded horizon.
pub fn frequency_metrics(
    trajectory: &[Vec<f64>],
    dt: f64,
    threshold_fraction: f64,
) -> Result<FrequencyMetrics> {
    if trajectory.is_empty() {
        return Err(Error::InvalidInput("empty trajectory".into()));
    }
    let dim = trajectory[0].len();
    if dim == 0 || dim % 2 != 0 || trajectory.iter().any(|s| s.len() != dim) {
        return Err(Error::DimensionMismatch(
            "trajectory states must share an even dimension (theta, theta_dot)".into(),
        ));
    }
    if !(threshold_fraction > 0.0) {
        return Err(Error::InvalidInput("threshold fraction must be > 0".into()));
    }
    let n = dim / 2;
    let reference = trajectory[0][n..].iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let thr = threshold_fraction * reference;
    let steps = trajectory.len();

    let settle = |value: &dyn Fn(usize) -> f64| -> Option<f64> {
        // Scan from the end for the last threshold violation.
        let mut last_violation: Option<usize> = None;
        for t in (0..steps).rev() {
            if value(t).abs() > thr {
                last_violation = Some(t);
                break;
            }
        }
        match last_violation {
            None => Some(0.0),
            Some(t) if t + 1 < steps => Some((t + 1) as f64 * dt),
            Some(_) => None, // still violating at the final recorded step
        }
    };

    let per_bus: Vec<Option<f64>> = (0..n)
        .map(|i| settle(&|t: usize| trajectory[t][n + i]))
        .collect();
    let mean_time = settle(&|t: usize| {
        trajectory[t][n..].iter().map(|v| v.abs()).sum::<f64>() / n as f64
    });
    Ok(FrequencyMetrics { per_bus, mean_time })
}
