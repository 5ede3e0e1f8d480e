//! Control problem instances and their computational discretization:
//! rectangular grids, multilinearly interpolated value functions, and
//! stationary policies.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Rectangular lattice over a state box, given by per-dimension node lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    nodes: Vec<Vec<f64>>,
}

impl Grid {
    pub fn new(nodes: Vec<Vec<f64>>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidInput("grid needs at least one dimension".into()));
        }
        for (d, axis) in nodes.iter().enumerate() {
            if axis.len() < 2 {
                return Err(Error::InvalidInput(format!(
                    "grid dimension {d} has {} nodes, need >= 2",
                    axis.len()
                )));
            }
            if axis.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidInput(format!(
                    "grid dimension {d} nodes must be strictly increasing"
                )));
            }
        }
        Ok(Self { nodes })
    }

    /// Uniform grid with `counts[d]` nodes over `[lower[d], upper[d]]`.
    pub fn uniform(lower: &[f64], upper: &[f64], counts: &[usize]) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() != counts.len() {
            return Err(Error::DimensionMismatch("uniform grid spec".into()));
        }
        let nodes = lower
            .iter()
            .zip(upper)
            .zip(counts)
            .map(|((&lo, &hi), &n)| {
                (0..n)
                    .map(|i| lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64)
                    .collect()
            })
            .collect();
        Self::new(nodes)
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().map(|a| a.len()).product()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.nodes.iter().map(|a| a[0]).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.nodes.iter().map(|a| *a.last().unwrap()).collect()
    }

    /// Coordinates of the flat node index (last dimension varies fastest).
    pub fn coords(&self, mut flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for d in (0..self.dim()).rev() {
            let n = self.nodes[d].len();
            out[d] = self.nodes[d][flat % n];
            flat /= n;
        }
        out
    }
}

/// Outcome of locating a point in the grid for interpolation.
struct CellLocation {
    /// Per-dimension (lower node index, interpolation fraction).
    cells: Vec<(usize, f64)>,
    clamped: bool,
}

/// Value function stored on a rectangular grid, evaluated by multilinear
/// interpolation. Immutable after construction; sweeps build a fresh one.
#[derive(Debug, Clone)]
pub struct GridValueFunction {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl GridValueFunction {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} grid nodes",
                values.len(),
                grid.node_count()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Arc<Grid>, value: f64) -> Self {
        let n = grid.node_count();
        Self { grid, values: vec![value; n] }
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.node_count()).map(|k| f(&grid.coords(k))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    fn locate(&self, x: &[f64], clamp_tol: f64) -> Result<CellLocation> {
        if x.len() != self.grid.dim() {
            return Err(Error::DimensionMismatch(format!(
                "state dim {} vs grid dim {}",
                x.len(),
                self.grid.dim()
            )));
        }
        let mut cells = Vec::with_capacity(x.len());
        let mut clamped = false;
        for (d, &xi) in x.iter().enumerate() {
            let axis = &self.grid.nodes[d];
            let lo = axis[0];
            let hi = *axis.last().unwrap();
            let mut v = xi;
            if v < lo {
                if lo - v > clamp_tol {
                    return Err(Error::OutOfDomain(format!(
                        "coordinate {d} = {xi} below grid box [{lo}, {hi}]"
                    )));
                }
                v = lo;
                clamped = true;
            } else if v > hi {
                if v - hi > clamp_tol {
                    return Err(Error::OutOfDomain(format!(
                        "coordinate {d} = {xi} above grid box [{lo}, {hi}]"
                    )));
                }
                v = hi;
                clamped = true;
            }
            // Binary search for the cell containing v.
            let idx = match axis.binary_search_by(|a| a.partial_cmp(&v).unwrap()) {
                Ok(i) => i.min(axis.len() - 2),
                Err(i) => i.saturating_sub(1).min(axis.len() - 2),
            };
            let t = (v - axis[idx]) / (axis[idx + 1] - axis[idx]);
            cells.push((idx, t));
        }
        Ok(CellLocation { cells, clamped })
    }

    /// Multilinear interpolation at `x`. Points outside the box by more than
    /// 1e-9 are rejected; within tolerance they are clamped to the boundary.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let loc = self.locate(x, 1e-9)?;
        Ok(self.interpolate(&loc.cells))
    }

    /// Interpolation with unconditional clamping to the grid box. Returns the
    /// value and whether clamping occurred, so callers can count clamps.
    pub fn evaluate_clamping(&self, x: &[f64]) -> Result<(f64, bool)> {
        let loc = self.locate(x, f64::INFINITY)?;
        Ok((self.interpolate(&loc.cells), loc.clamped))
    }

    fn interpolate(&self, cells: &[(usize, f64)]) -> f64 {
        let d = cells.len();
        let mut acc = 0.0;
        // Sum over the 2^d cell corners.
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut flat = 0usize;
            for (dd, &(idx, t)) in cells.iter().enumerate() {
                let hi = (corner >> dd) & 1 == 1;
                w *= if hi { t } else { 1.0 - t };
                let node = idx + hi as usize;
                flat = flat * self.grid.nodes[dd].len() + node;
            }
            if w != 0.0 {
                acc += w * self.values[flat];
            }
        }
        acc
    }
}

/// Weight function `xi(x) >= 1` for the weighted sup-norm.
#[derive(Clone)]
pub enum WeightFn {
    One,
    Custom(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl WeightFn {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            WeightFn::One => 1.0,
            WeightFn::Custom(f) => f(x),
        }
    }
}

impl std::fmt::Debug for WeightFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightFn::One => write!(f, "WeightFn::One"),
            WeightFn::Custom(_) => write!(f, "WeightFn::Custom(..)"),
        }
    }
}

/// Admissible-action description.
#[derive(Clone)]
pub enum ActionSet {
    /// Explicit finite action set, identical at every state.
    Finite(Vec<Vec<f64>>),
    /// Compact box searched on a coarse grid with local refinement.
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
        grid: Vec<usize>,
    },
    /// State-dependent finite candidate set.
    PerState(Arc<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync>),
}

impl ActionSet {
    /// Candidate actions at state `x`.
    pub fn candidates(&self, x: &[f64]) -> Vec<Vec<f64>> {
        match self {
            ActionSet::Finite(actions) => actions.clone(),
            ActionSet::Box { lower, upper, grid } => {
                let mut out = Vec::new();
                let mut idx = vec![0usize; lower.len()];
                loop {
                    out.push(
                        idx.iter()
                            .enumerate()
                            .map(|(d, &i)| {
                                let n = grid[d].max(2);
                                lower[d] + (upper[d] - lower[d]) * i as f64 / (n - 1) as f64
                            })
                            .collect(),
                    );
                    let mut d = lower.len();
                    loop {
                        if d == 0 {
                            return out;
                        }
                        d -= 1;
                        idx[d] += 1;
                        if idx[d] < grid[d].max(2) {
                            break;
                        }
                        idx[d] = 0;
                    }
                }
            }
            ActionSet::PerState(f) => f(x),
        }
    }

    /// Box bounds when local golden-section refinement applies.
    pub fn refinement_box(&self) -> Option<(&[f64], &[f64])> {
        match self {
            ActionSet::Box { lower, upper, .. } => Some((lower, upper)),
            _ => None,
        }
    }
}

impl std::fmt::Debug for ActionSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActionSet::Finite(a) => write!(f, "ActionSet::Finite({} actions)", a.len()),
            ActionSet::Box { lower, upper, .. } => {
                write!(f, "ActionSet::Box({lower:?}..{upper:?})")
            }
            ActionSet::PerState(_) => write!(f, "ActionSet::PerState(..)"),
        }
    }
}

pub type DynamicsFn = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync>;
pub type StageCostFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Discounted distributionally robust control instance.
#[derive(Clone)]
pub struct ControlProblem {
    pub dynamics: DynamicsFn,
    pub stage_cost: StageCostFn,
    pub action_set: ActionSet,
    pub alpha: f64,
    pub weight: WeightFn,
    pub growth_b: f64,
    pub growth_beta: f64,
    /// Disturbance support box `W` in `R^l`.
    pub disturbance_lower: Vec<f64>,
    pub disturbance_upper: Vec<f64>,
}

impl ControlProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dynamics: DynamicsFn,
        stage_cost: StageCostFn,
        action_set: ActionSet,
        alpha: f64,
        weight: WeightFn,
        growth_b: f64,
        growth_beta: f64,
        disturbance_lower: Vec<f64>,
        disturbance_upper: Vec<f64>,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidInput(format!("discount alpha = {alpha} not in (0,1)")));
        }
        if !(growth_beta >= 1.0 && growth_beta < 1.0 / alpha) {
            return Err(Error::InvalidInput(format!(
                "growth beta = {growth_beta} not in [1, 1/alpha) = [1, {})",
                1.0 / alpha
            )));
        }
        if growth_b < 0.0 {
            return Err(Error::InvalidInput("growth constant b must be >= 0".into()));
        }
        if disturbance_lower.len() != disturbance_upper.len() {
            return Err(Error::DimensionMismatch("disturbance box".into()));
        }
        Ok(Self {
            dynamics,
            stage_cost,
            action_set,
            alpha,
            weight,
            growth_b,
            growth_beta,
            disturbance_lower,
            disturbance_upper,
        })
    }

    /// Contraction modulus `tau = alpha * beta`.
    pub fn tau(&self) -> f64 {
        self.alpha * self.growth_beta
    }

    /// Spot-check `|c(x,u)| <= b xi(x)` at every grid node and candidate action.
    pub fn spot_check_growth(&self, grid: &Grid) -> Result<()> {
        for k in 0..grid.node_count() {
            let x = grid.coords(k);
            let bound = self.growth_b * self.weight.eval(&x);
            for u in self.action_set.candidates(&x) {
                let c = (self.stage_cost)(&x, &u);
                if c.abs() > bound + 1e-9 {
                    return Err(Error::InvalidInput(format!(
                        "|c({x:?}, {u:?})| = {} exceeds b*xi = {bound}",
                        c.abs()
                    )));
                }
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlProblem")
            .field("alpha", &self.alpha)
            .field("growth_b", &self.growth_b)
            .field("growth_beta", &self.growth_beta)
            .field("action_set", &self.action_set)
            .finish()
    }
}

/// Deterministic stationary policy.
#[derive(Debug, Clone)]
pub enum StationaryPolicy {
    /// Action stored per grid node, looked up by multilinear interpolation.
    Tabular { grid: Arc<Grid>, actions: Vec<Vec<f64>> },
    /// Linear state feedback `pi(x) = K x`.
    Linear { gain: DMatrix<f64> },
    /// Affine feedback on the augmented state: `pi(x) = K ((x - xbar)', 1)'`.
    Affine { gain: DMatrix<f64>, xbar: Vec<f64> },
}

impl StationaryPolicy {
    pub fn tabular(grid: Arc<Grid>, actions: Vec<Vec<f64>>) -> Result<Self> {
        if actions.len() != grid.node_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} actions for {} nodes",
                actions.len(),
                grid.node_count()
            )));
        }
        Ok(StationaryPolicy::Tabular { grid, actions })
    }

    /// Evaluate the policy at a state. Tabular policies clamp to the grid box.
    pub fn action(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            StationaryPolicy::Tabular { grid, actions } => {
                let m = actions[0].len();
                let mut out = vec![0.0; m];
                for c in 0..m {
                    let component =
                        GridValueFunction::new(grid.clone(), actions.iter().map(|a| a[c]).collect())?;
                    let (v, _) = component.evaluate_clamping(x)?;
                    out[c] = v;
                }
                Ok(out)
            }
            StationaryPolicy::Linear { gain } => {
                let xv = DVector::from_column_slice(x);
                Ok((gain * xv).iter().copied().collect())
            }
            StationaryPolicy::Affine { gain, xbar } => {
                let mut aug: Vec<f64> = x.iter().zip(xbar).map(|(xi, bi)| xi - bi).collect();
                aug.push(1.0);
                let xv = DVector::from_vec(aug);
                Ok((gain * xv).iter().copied().collect())
            }
        }
    }
}

/// Weighted sup-norm distance `max_nodes |v1 - v2| / xi`.
pub fn weighted_sup_norm_diff(
    v1: &GridValueFunction,
    v2: &GridValueFunction,
    xi: &WeightFn,
) -> Result<f64> {
    if !v1.same_grid(v2) {
        return Err(Error::InvalidInput("weighted_sup_norm_diff: grid mismatch".into()));
    }
    let grid = v1.grid();
    let mut best = 0.0f64;
    for k in 0..grid.node_count() {
        let w = xi.eval(&grid.coords(k));
        let d = (v1.values[k] - v2.values[k]).abs() / w;
        if d > best {
            best = d;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid_2d() -> Arc<Grid> {
        Arc::new(Grid::uniform(&[0.0, 0.0], &[1.0, 2.0], &[5, 5]).unwrap())
    }

    #[test]
    fn node_values_are_exact() {
        let g = grid_2d();
        let v = GridValueFunction::from_fn(g.clone(), |x| x[0] * 3.0 - x[1]);
        for k in 0..g.node_count() {
            let x = g.coords(k);
            assert_relative_eq!(v.evaluate(&x).unwrap(), x[0] * 3.0 - x[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn midpoint_of_1d_cell() {
        let g = Arc::new(Grid::new(vec![vec![0.0, 1.0]]).unwrap());
        let v = GridValueFunction::new(g, vec![0.0, 1.0]).unwrap();
        assert_relative_eq!(v.evaluate(&[0.5]).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn bilinear_matches_hand_formula() {
        let g = Arc::new(Grid::new(vec![vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap());
        // values at (0,0), (0,1), (1,0), (1,1)
        let v = GridValueFunction::new(g, vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let (x, y) = (0.3, 0.7);
        let expect = 1.0 * (1.0 - x) * (1.0 - y) + 2.0 * (1.0 - x) * y + 3.0 * x * (1.0 - y) + 5.0 * x * y;
        assert_relative_eq!(v.evaluate(&[x, y]).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn out_of_domain_handling() {
        let g = Arc::new(Grid::new(vec![vec![0.0, 1.0]]).unwrap());
        let v = GridValueFunction::new(g, vec![0.0, 1.0]).unwrap();
        // Within tolerance: clamped.
        assert_relative_eq!(v.evaluate(&[1.0 + 5e-10]).unwrap(), 1.0);
        // Beyond tolerance: error.
        assert!(v.evaluate(&[1.1]).is_err());
        // Unconditional clamp reports the clamp.
        let (val, clamped) = v.evaluate_clamping(&[2.5]).unwrap();
        assert_relative_eq!(val, 1.0);
        assert!(clamped);
    }

    #[test]
    fn sup_norm_examples() {
        let g = grid_2d();
        let v = GridValueFunction::from_fn(g.clone(), |x| x[0].sin());
        assert_relative_eq!(weighted_sup_norm_diff(&v, &v, &WeightFn::One).unwrap(), 0.0);

        let xi = WeightFn::Custom(Arc::new(|x: &[f64]| 1.0 + x[0] * x[0]));
        let shifted = GridValueFunction::new(
            g.clone(),
            (0..g.node_count())
                .map(|k| v.values()[k] + xi.eval(&g.coords(k)))
                .collect(),
        )
        .unwrap();
        assert_relative_eq!(weighted_sup_norm_diff(&v, &shifted, &xi).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sup_norm_matches_exhaustive_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let g = grid_2d();
        let v1 = GridValueFunction::new(g.clone(), (0..25).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let v2 = GridValueFunction::new(g.clone(), (0..25).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let got = weighted_sup_norm_diff(&v1, &v2, &WeightFn::One).unwrap();
        let oracle = (0..25)
            .map(|k| (v1.values()[k] - v2.values()[k]).abs())
            .fold(0.0f64, f64::max);
        assert_relative_eq!(got, oracle, epsilon = 1e-15);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let a = GridValueFunction::constant(grid_2d(), 0.0);
        let g2 = Arc::new(Grid::uniform(&[0.0, 0.0], &[1.0, 1.0], &[5, 5]).unwrap());
        let b = GridValueFunction::constant(g2, 0.0);
        assert!(weighted_sup_norm_diff(&a, &b, &WeightFn::One).is_err());
    }

    #[test]
    fn box_action_candidates() {
        let set = ActionSet::Box {
            lower: vec![0.0, -1.0],
            upper: vec![1.0, 1.0],
            grid: vec![3, 2],
        };
        let c = set.candidates(&[0.0]);
        assert_eq!(c.len(), 6);
        assert!(c.contains(&vec![0.5, -1.0]));
    }

    #[test]
    fn tabular_policy_interpolates_and_linear_policy_multiplies() {
        let g = Arc::new(Grid::new(vec![vec![0.0, 1.0]]).unwrap());
        let pi = StationaryPolicy::tabular(g, vec![vec![0.0], vec![2.0]]).unwrap();
        assert_relative_eq!(pi.action(&[0.25]).unwrap()[0], 0.5, epsilon = 1e-12);

        let k = DMatrix::from_row_slice(1, 2, &[1.0, -2.0]);
        let lin = StationaryPolicy::Linear { gain: k };
        assert_relative_eq!(lin.action(&[3.0, 1.0]).unwrap()[0], 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Multilinear interpolation reproduces affine functions exactly.
        #[test]
        fn affine_exactness(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0,
                            x in 0.0f64..1.0, y in 0.0f64..2.0) {
            let g = grid_2d();
            let v = GridValueFunction::from_fn(g, |s| a * s[0] + b * s[1] + c);
            let expect = a * x + b * y + c;
            prop_assert!((v.evaluate(&[x, y]).unwrap() - expect).abs() < 1e-12);
        }

        /// weighted_sup_norm_diff is symmetric and satisfies the triangle
        /// inequality.
        #[test]
        fn sup_norm_is_metric(vals in proptest::collection::vec(-5.0f64..5.0, 75)) {
            let g = grid_2d();
            let v1 = GridValueFunction::new(g.clone(), vals[0..25].to_vec()).unwrap();
            let v2 = GridValueFunction::new(g.clone(), vals[25..50].to_vec()).unwrap();
            let v3 = GridValueFunction::new(g.clone(), vals[50..75].to_vec()).unwrap();
            let xi = WeightFn::One;
            let d12 = weighted_sup_norm_diff(&v1, &v2, &xi).unwrap();
            let d21 = weighted_sup_norm_diff(&v2, &v1, &xi).unwrap();
            let d13 = weighted_sup_norm_diff(&v1, &v3, &xi).unwrap();
            let d32 = weighted_sup_norm_diff(&v3, &v2, &xi).unwrap();
            prop_assert!((d12 - d21).abs() < 1e-15);
            prop_assert!(d12 <= d13 + d32 + 1e-12);
        }
    }
}
