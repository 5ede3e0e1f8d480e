//! Measure-concentration bound for the Wasserstein distance between a
//! distribution and its empirical estimate, and the induced a-priori radius
//! `theta(N, beta)` guaranteeing ball membership with confidence `1 - beta`.
//!
//! The symbol `beta` is overloaded in the literature; here `confidence_beta`
//! is the tail probability and the growth constant lives on `ControlProblem`
//! as `growth_beta`.

use crate::{Error, Result};

/// Parameters of the concentration inequality. `c1`, `c2` are user-supplied;
/// the defaults `c1 = 2`, `c2 = 1` are demo values, not derived constants.
#[derive(Debug, Clone, Copy)]
pub struct ConcentrationParams {
    /// Disturbance dimension.
    pub l: usize,
    /// Wasserstein order.
    pub p: f64,
    /// Tail exponent (`q > p`).
    pub q: f64,
    pub c1: f64,
    pub c2: f64,
}

impl ConcentrationParams {
    pub fn new(l: usize, p: f64, q: f64, c1: f64, c2: f64) -> Result<Self> {
        if l < 1 {
            return Err(Error::InvalidInput("dimension l must be >= 1".into()));
        }
        if !(p >= 1.0) {
            return Err(Error::InvalidInput(format!("order p = {p} must be >= 1")));
        }
        if !(q > p) {
            return Err(Error::InvalidInput(format!("tail exponent q = {q} must exceed p = {p}")));
        }
        if !(c1 > 0.0 && c2 > 0.0) {
            return Err(Error::InvalidInput(format!("constants c1 = {c1}, c2 = {c2} must be > 0")));
        }
        Ok(Self { l, p, q, c1, c2 })
    }

    /// Demo defaults `c1 = 2`, `c2 = 1`.
    pub fn with_default_constants(l: usize, p: f64, q: f64) -> Result<Self> {
        Self::new(l, p, q, 2.0, 1.0)
    }

    fn half_l(&self) -> f64 {
        self.l as f64 / 2.0
    }
}

/// Value of the concentration bound: the raw formula and the probability
/// clipped to `[0, 1]` for reporting.
#[derive(Debug, Clone, Copy)]
pub struct BoundValue {
    pub raw: f64,
    pub clipped: f64,
}

/// `P[W_p(mu, nu_N) >= theta] <= c1 [b1(N,theta) 1{theta<=1} + b2(N,theta) 1{theta>1}]`
/// with `b1` chosen by the `p` vs `l/2` trichotomy and `b2 = exp(-c2 N theta^{q/p})`.
pub fn concentration_bound(n: usize, theta: f64, params: &ConcentrationParams) -> Result<BoundValue> {
    if n < 1 {
        return Err(Error::InvalidInput("sample count N must be >= 1".into()));
    }
    if !(theta > 0.0) {
        return Err(Error::InvalidInput(format!("theta = {theta} must be > 0")));
    }
    let nf = n as f64;
    let exponent = if theta <= 1.0 {
        let hl = params.half_l();
        if params.p > hl {
            params.c2 * nf * theta * theta
        } else if params.p == hl {
            let r = theta / (2.0 + 1.0 / theta).ln();
            params.c2 * nf * r * r
        } else {
            params.c2 * nf * theta.powf(params.l as f64 / params.p)
        }
    } else {
        params.c2 * nf * theta.powf(params.q / params.p)
    };
    let raw = params.c1 * (-exponent).exp();
    Ok(BoundValue { raw, clipped: raw.clamp(0.0, 1.0) })
}

/// A-priori radius such that `concentration_bound(N, theta) <= beta`.
///
/// Four cases: the small-sample branch `N < log(c1/beta)/c2` uses the tail
/// exponent; otherwise the branch follows the `p` vs `l/2` trichotomy, with
/// the `p = l/2` case solved by bisection on the strictly increasing map
/// `theta / log(2 + 1/theta)`.
pub fn radius(n: usize, confidence_beta: f64, params: &ConcentrationParams) -> Result<f64> {
    if n < 1 {
        return Err(Error::InvalidInput("sample count N must be >= 1".into()));
    }
    if !(confidence_beta > 0.0 && confidence_beta < 1.0) {
        return Err(Error::InvalidInput(format!(
            "confidence beta = {confidence_beta} not in (0,1)"
        )));
    }
    let log_term = (params.c1 / confidence_beta).ln();
    if log_term <= 0.0 {
        // The bound is already <= beta for any positive radius.
        return Ok(1e-12);
    }
    let nf = n as f64;
    let rhs = log_term / (nf * params.c2);
    if nf < log_term / params.c2 {
        return Ok(rhs.powf(params.p / params.q));
    }
    let hl = params.half_l();
    if params.p > hl {
        Ok(rhs.sqrt())
    } else if params.p < hl {
        Ok(rhs.powf(params.p / params.l as f64))
    } else {
        // p = l/2: valid only when the bisection root stays <= 1, i.e.
        // N >= (log 3)^2 / c2 * log(c1/beta).
        let threshold = 3.0f64.ln().powi(2) / params.c2 * log_term;
        if nf < threshold {
            return Err(Error::UnsupportedRegime(format!(
                "p = l/2 radius needs N >= (log 3)^2/c2*log(c1/beta) = {threshold:.6}, got N = {n}"
            )));
        }
        let target = rhs.sqrt();
        let f = |t: f64| t / (2.0 + 1.0 / t).ln();
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        while f(hi) < target {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if (hi - lo) <= 1e-12 * hi.max(1e-300) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Check the defining property of the radius: substituting it back into the
/// concentration bound yields a probability of at most `beta` (with 1e-9
/// relative slack for floating point).
pub fn radius_round_trip(n: usize, confidence_beta: f64, params: &ConcentrationParams) -> Result<bool> {
    let theta = radius(n, confidence_beta, params)?;
    if theta <= 1e-12 {
        // Degenerate c1 <= beta case: the bound holds trivially.
        return Ok(params.c1 <= confidence_beta * (1.0 + 1e-9));
    }
    let bound = concentration_bound(n, theta, params)?;
    Ok(bound.raw <= confidence_beta * (1.0 + 1e-9))
}
