//! Exact analytic solutions used as oracles: the Epstein-Zin aggregator,
//! the unconstrained benchmark, the proportional-leverage solution, the
//! bond-only utility and the two-sided value bounds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelParams;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ClosedFormError {
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("constraint not binding: {0}")]
    ConstraintNotBinding(String),
}

/// Epstein-Zin aggregator `f(c, v) = c^{1-S}/(1-S) * ((1-R) v)^rho`.
///
/// Boundary conventions for the `0 < R < 1`, `rho < 0` branch: `f(0, v) = 0`
/// for any admissible `v` (including `v = 0`), and `f(c, 0) = +inf` for
/// `c > 0`. The infinity is returned as a sentinel rather than an error;
/// the solver never evaluates it on valid iterates.
pub fn aggregator(c: f64, v: f64, params: &ModelParams) -> Result<f64, ClosedFormError> {
    let rr = params.prefs.risk_aversion;
    let ss = params.prefs.eic;
    let rho = params.derived.rho;
    if c < 0.0 {
        return Err(ClosedFormError::DomainError(format!(
            "consumption must be non-negative, got {c}"
        )));
    }
    let w = (1.0 - rr) * v;
    if w < 0.0 {
        return Err(ClosedFormError::DomainError(format!(
            "(1-R) v must be non-negative, got {w}"
        )));
    }
    if c == 0.0 {
        return Ok(0.0);
    }
    if w == 0.0 {
        return Ok(f64::INFINITY);
    }
    // exp/log form keeps relative error uniform for small positive inputs
    Ok((((1.0 - ss) * c.ln() + rho * w.ln()).exp()) / (1.0 - ss))
}

/// Marginal aggregator `f_v(c, v) = rho * f(c, v) / v`, used by the solver
/// to linearize the utility recursion. Non-positive whenever `f >= 0` and
/// `v > 0` because `rho < 0`.
pub fn aggregator_v(c: f64, v: f64, params: &ModelParams) -> Result<f64, ClosedFormError> {
    if v <= 0.0 {
        return Err(ClosedFormError::DomainError(format!(
            "marginal aggregator needs v > 0, got {v}"
        )));
    }
    Ok(params.derived.rho * aggregator(c, v, params)? / v)
}

/// Truncated aggregator `f_m(c, v) = (c ^ m)^{1-S}/(1-S) * ((1-R)v v 1/m)^rho`
/// with `^` = min and `v` = max. Globally Lipschitz in `v` and bounded by
/// `m^{1-S-rho}/(1-S)`; converges to `aggregator` pointwise as `m -> inf`.
///
/// Accepts any real `v` (the max-clamp makes the driver total), which is
/// what the Monte Carlo recursion needs.
pub fn aggregator_truncated(
    c: f64,
    v: f64,
    m: f64,
    params: &ModelParams,
) -> Result<f64, ClosedFormError> {
    if !(m > 0.0) {
        return Err(ClosedFormError::DomainError(format!(
            "truncation level must be positive, got {m}"
        )));
    }
    if c < 0.0 {
        return Err(ClosedFormError::DomainError(format!(
            "consumption must be non-negative, got {c}"
        )));
    }
    let rr = params.prefs.risk_aversion;
    let ss = params.prefs.eic;
    let rho = params.derived.rho;
    let cm = c.min(m);
    if cm == 0.0 {
        return Ok(0.0);
    }
    let w = ((1.0 - rr) * v).max(1.0 / m);
    Ok((((1.0 - ss) * cm.ln() + rho * w.ln()).exp()) / (1.0 - ss))
}

/// Marginal of the truncated aggregator in `v`. Zero on the clamped branch
/// `(1-R) v < 1/m`, `rho f_m / v` otherwise; always non-positive.
pub fn aggregator_truncated_v(
    c: f64,
    v: f64,
    m: f64,
    params: &ModelParams,
) -> Result<f64, ClosedFormError> {
    let rr = params.prefs.risk_aversion;
    if (1.0 - rr) * v <= 1.0 / m {
        return Ok(0.0);
    }
    Ok(params.derived.rho * aggregator_truncated(c, v, m, params)? / v)
}

/// Which special case a closed-form solution belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SolutionKind {
    /// Unconstrained benchmark (`g = +inf`).
    Unconstrained,
    /// Proportional bound `g(x) = k x` with binding `k`.
    Proportional(f64),
    /// All wealth in the bond, consumption `r x`.
    BondOnly,
}

/// A value function of the form `coefficient * x^{1-R}/(1-R)` together with
/// its proportional feedback policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormSolution {
    /// Multiplier on `x^{1-R}/(1-R)`.
    pub value_coefficient: f64,
    /// Consumption rate per unit wealth (per year).
    pub consumption_rate: f64,
    /// Risky fraction of wealth.
    pub portfolio_rate: f64,
    pub kind: SolutionKind,
    risk_aversion: f64,
}

impl ClosedFormSolution {
    /// `J(x) = coefficient * x^{1-R}/(1-R)`; zero at `x = 0`.
    pub fn value(&self, x: f64) -> f64 {
        if x == 0.0 {
            return 0.0;
        }
        self.value_coefficient * x.powf(1.0 - self.risk_aversion) / (1.0 - self.risk_aversion)
    }

    /// `J_x(x) = coefficient * x^{-R}`.
    pub fn value_prime(&self, x: f64) -> f64 {
        self.value_coefficient * x.powf(-self.risk_aversion)
    }

    /// `J_xx(x) = -R * coefficient * x^{-R-1}`.
    pub fn value_second(&self, x: f64) -> f64 {
        -self.risk_aversion * self.value_coefficient * x.powf(-self.risk_aversion - 1.0)
    }

    /// Optimal consumption `c(x) = consumption_rate * x`.
    pub fn consumption(&self, x: f64) -> f64 {
        self.consumption_rate * x
    }

    /// Optimal risky position `pi(x) = portfolio_rate * x`.
    pub fn portfolio(&self, x: f64) -> f64 {
        self.portfolio_rate * x
    }
}

/// Unconstrained benchmark: `J^ez(x) = eta^{-nu S} x^{1-R}/(1-R)`,
/// `c = eta x`, `pi = merton_ratio * x`.
pub fn benchmark_solution(params: &ModelParams) -> ClosedFormSolution {
    let d = params.derived;
    ClosedFormSolution {
        value_coefficient: d.eta.powf(-d.nu * params.prefs.eic),
        consumption_rate: d.eta,
        portfolio_rate: d.merton_ratio,
        kind: SolutionKind::Unconstrained,
        risk_aversion: params.prefs.risk_aversion,
    }
}

/// Benchmark value `J^ez(x)`.
pub fn benchmark_value(x: f64, params: &ModelParams) -> f64 {
    benchmark_solution(params).value(x)
}

/// Consumption rate of the proportional-leverage solution,
/// `eta0 = ((S-1)/S) [k(mu-r) - sigma^2 R k^2 / 2 + r - delta nu/(1-R)]`.
fn proportional_rate(k: f64, params: &ModelParams) -> f64 {
    let m = params.market;
    let rr = params.prefs.risk_aversion;
    let ss = params.prefs.eic;
    (ss - 1.0) / ss
        * (k * m.excess_return() - 0.5 * m.sigma * m.sigma * rr * k * k + m.r
            - params.delta_nu() / (1.0 - rr))
}

/// Exact solution under the proportional bound `g(x) = k x` when the bound
/// binds (`0 < k < merton_ratio`): value coefficient `(eta0)^{-nu S}`,
/// consumption `eta0 x` and portfolio `k x`. The rate satisfies
/// `eta0 > eta > 0`.
pub fn proportional_solution(
    k: f64,
    params: &ModelParams,
) -> Result<ClosedFormSolution, ClosedFormError> {
    if !(k > 0.0) {
        return Err(ClosedFormError::DomainError(format!(
            "proportional slope must be positive, got {k}"
        )));
    }
    if k >= params.derived.merton_ratio {
        return Err(ClosedFormError::ConstraintNotBinding(format!(
            "k = {k} >= merton ratio {}; the unconstrained benchmark applies",
            params.derived.merton_ratio
        )));
    }
    let eta0 = proportional_rate(k, params);
    debug_assert!(eta0 > params.derived.eta);
    Ok(ClosedFormSolution {
        value_coefficient: eta0.powf(-params.derived.nu * params.prefs.eic),
        consumption_rate: eta0,
        portfolio_rate: k,
        kind: SolutionKind::Proportional(k),
        risk_aversion: params.prefs.risk_aversion,
    })
}

/// Utility of the strategy `(pi, c) = (0, r x)`:
/// `delta^{-nu} (r x)^{1-R}/(1-R)`. This is the lower bound of the value
/// sandwich and the exact target of the Monte Carlo bond-only oracle.
pub fn bond_only_utility(x: f64, params: &ModelParams) -> f64 {
    bond_only_solution(params).value(x)
}

/// The bond-only strategy as a `ClosedFormSolution` (value coefficient
/// `delta^{-nu} r^{1-R}`, consumption rate `r`, portfolio rate 0).
pub fn bond_only_solution(params: &ModelParams) -> ClosedFormSolution {
    let d = params.derived;
    let rr = params.prefs.risk_aversion;
    ClosedFormSolution {
        value_coefficient: params.prefs.delta.powf(-d.nu) * params.market.r.powf(1.0 - rr),
        consumption_rate: params.market.r,
        portfolio_rate: 0.0,
        kind: SolutionKind::BondOnly,
        risk_aversion: rr,
    }
}

/// Two-sided growth bounds on the value function:
/// `delta^{-nu}(r x)^{1-R}/(1-R) <= J(x) <= eta^{-nu S} x^{1-R}/(1-R)`.
pub fn value_bounds(x: f64, params: &ModelParams) -> (f64, f64) {
    (bond_only_utility(x, params), benchmark_value(x, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MarketParams, ModelParams, PreferenceParams};
    use approx::assert_relative_eq;

    pub(crate) fn example_params() -> ModelParams {
        ModelParams::new(
            MarketParams::new(0.08, 0.2, 0.02).unwrap(),
            PreferenceParams::new(0.8, 0.5, 0.1).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn aggregator_examples() {
        let p = example_params();
        // f(0, v) = 0 for any admissible v
        assert_eq!(aggregator(0.0, 3.0, &p).unwrap(), 0.0);
        assert_eq!(aggregator(0.0, 0.0, &p).unwrap(), 0.0);
        // (R=0.8, S=0.5): f(1, 5) = 1^{0.5}/0.5 * 1^{-1.5} = 2
        assert_relative_eq!(aggregator(1.0, 5.0, &p).unwrap(), 2.0, max_relative = 1e-14);
        // f(4, 5) = 4^{0.5}/0.5 = 4
        assert_relative_eq!(aggregator(4.0, 5.0, &p).unwrap(), 4.0, max_relative = 1e-14);
        // f(c, 0) = +inf sentinel for c > 0
        assert_eq!(aggregator(1.0, 0.0, &p).unwrap(), f64::INFINITY);
        // domain errors
        assert!(aggregator(-1.0, 1.0, &p).is_err());
        assert!(aggregator(1.0, -1.0, &p).is_err());
    }

    #[test]
    fn aggregator_monotonicity() {
        // decreasing in v for fixed c > 0 (rho < 0), increasing in c.
        let p = example_params();
        let mut prev = f64::INFINITY;
        for v in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let f = aggregator(1.0, v, &p).unwrap();
            assert!(f < prev);
            prev = f;
        }
        let mut prev = 0.0;
        for c in [0.5, 1.0, 2.0, 4.0] {
            let f = aggregator(c, 3.0, &p).unwrap();
            assert!(f > prev);
            prev = f;
        }
    }

    #[test]
    fn truncated_aggregator_examples() {
        let p = example_params();
        // truncation active on c only: c > m, (1-R)v >= 1/m
        let big_v = 50.0;
        assert_relative_eq!(
            aggregator_truncated(20.0, big_v, 10.0, &p).unwrap(),
            aggregator(10.0, big_v, &p).unwrap(),
            max_relative = 1e-14
        );
        // truncation inactive: m=10, c=1, v=5 -> f = 2
        assert_relative_eq!(
            aggregator_truncated(1.0, 5.0, 10.0, &p).unwrap(),
            2.0,
            max_relative = 1e-14
        );
        assert!(aggregator_truncated(1.0, 5.0, 0.0, &p).is_err());
        assert!(aggregator_truncated(1.0, 5.0, -1.0, &p).is_err());
    }

    #[test]
    fn truncated_aggregator_bounded_and_monotone_in_m() {
        let p = example_params();
        let cases = [
            (0.0, 0.0),
            (0.5, 0.1),
            (1.0, 5.0),
            (100.0, 0.01),
            (3.0, -2.0), // negative v is clamped, not rejected
            (1e6, 1e6),
        ];
        for m in [0.5f64, 1.0, 10.0, 100.0] {
            let cap = m.powf(1.0 - p.prefs.eic - p.derived.rho) / (1.0 - p.prefs.eic);
            for &(c, v) in &cases {
                let f = aggregator_truncated(c, v, m, &p).unwrap();
                assert!((0.0..=cap * (1.0 + 1e-12)).contains(&f), "f={f} cap={cap}");
            }
        }
        // non-decreasing in m, converging to the untruncated value once m
        // dominates both c and 1/((1-R)v)
        for &(c, v) in &cases {
            if v < 0.0 {
                continue;
            }
            let mut prev = 0.0f64;
            for m in [1.0, 2.0, 8.0, 64.0, 1024.0, 1e8] {
                let f = aggregator_truncated(c, v, m, &p).unwrap();
                assert!(f >= prev - 1e-13 * (1.0 + prev.abs()));
                prev = f;
            }
            let exact = aggregator(c, v, &p).unwrap();
            if exact.is_finite() && c > 0.0 && v > 0.0 {
                assert_relative_eq!(prev, exact, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn benchmark_matches_frozen_oracle() {
        // Recomputed independently at 30 digits:
        // eta^{-nu S} = 1.51876632270138, J^ez(1) = 7.59383161350691
        let p = example_params();
        let b = benchmark_solution(&p);
        assert_relative_eq!(b.value_coefficient, 1.5187663227013810, max_relative = 1e-12);
        assert_relative_eq!(benchmark_value(1.0, &p), 7.5938316135069052, max_relative = 1e-12);
        assert_eq!(benchmark_value(0.0, &p), 0.0);
        assert_relative_eq!(b.consumption(1.0), 0.12375, max_relative = 1e-14);
        assert_relative_eq!(b.portfolio(1.0), 1.875, max_relative = 1e-14);
    }

    #[test]
    fn benchmark_homogeneity() {
        let p = example_params();
        let rr = p.prefs.risk_aversion;
        for x in [0.3, 1.0, 4.7] {
            for m in [0.5, 2.0, 10.0] {
                assert_relative_eq!(
                    benchmark_value(m * x, &p),
                    m.powf(1.0 - rr) * benchmark_value(x, &p),
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn proportional_matches_frozen_oracle() {
        // eta0(k=1) = 0.136 exactly; lambda0 = 0.136^{-0.2} = 1.49036354279376,
        // J0(1) = 7.45181771396882 (recomputed independently at 30 digits).
        let p = example_params();
        let s = proportional_solution(1.0, &p).unwrap();
        assert_relative_eq!(s.consumption_rate, 0.136, max_relative = 1e-13);
        assert_relative_eq!(s.value_coefficient, 1.4903635427937645, max_relative = 1e-12);
        assert_relative_eq!(s.value(1.0), 7.4518177139688226, max_relative = 1e-12);
        assert_eq!(s.portfolio_rate, 1.0);
        // eta0 > eta > 0
        assert!(s.consumption_rate > p.derived.eta);
    }

    #[test]
    fn proportional_rejects_non_binding_or_bad_slope() {
        let p = example_params();
        assert!(matches!(
            proportional_solution(1.875, &p),
            Err(ClosedFormError::ConstraintNotBinding(_))
        ));
        assert!(matches!(
            proportional_solution(2.5, &p),
            Err(ClosedFormError::ConstraintNotBinding(_))
        ));
        assert!(matches!(
            proportional_solution(0.0, &p),
            Err(ClosedFormError::DomainError(_))
        ));
    }

    #[test]
    fn proportional_rate_decreasing_in_k() {
        let p = example_params();
        let mut prev = f64::INFINITY;
        for k in [0.2, 0.5, 0.8, 1.0, 1.4, 1.8] {
            let eta0 = proportional_solution(k, &p).unwrap().consumption_rate;
            assert!(eta0 < prev, "eta0 not decreasing at k={k}");
            assert!(eta0 > p.derived.eta);
            prev = eta0;
        }
    }

    #[test]
    fn bond_only_matches_frozen_oracle() {
        // delta^{-nu} (r)^{1-R}/(1-R) = 5.74349177498518 (30-digit recompute).
        let p = example_params();
        assert_relative_eq!(bond_only_utility(1.0, &p), 5.7434917749851750, max_relative = 1e-12);
        assert_eq!(bond_only_utility(0.0, &p), 0.0);
    }

    #[test]
    fn value_bounds_sandwich() {
        let p = example_params();
        let (lo, hi) = value_bounds(1.0, &p);
        assert_relative_eq!(lo, 5.7434917749851750, max_relative = 1e-12);
        assert_relative_eq!(hi, 7.5938316135069052, max_relative = 1e-12);
        assert!(lo <= hi);
        assert_eq!(value_bounds(0.0, &p), (0.0, 0.0));
        // lo/hi constant in x
        let ratio = lo / hi;
        for x in [0.01, 0.3, 2.0, 40.0] {
            let (l, h) = value_bounds(x, &p);
            assert!(l <= h);
            assert_relative_eq!(l / h, ratio, max_relative = 1e-12);
            assert!(bond_only_utility(x, &p) <= benchmark_value(x, &p));
        }
    }
}
