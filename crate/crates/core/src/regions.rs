//! Region classification and structural checks: constrained/unconstrained
//! labels, free-boundary location by smooth fit, region ODE residuals,
//! closed-form bound chains and the value-scaling identity.
//!
//! Analysis near `x_min` is unreliable because the solver pins the node to
//! the lower value bound; classification therefore skips a boundary layer
//! of `REGION_BUFFER_FACTOR * x_min`, and the bound-chain checks skip the
//! wider `BOUND_CHAIN_BUFFER_FACTOR * x_min` where the layer still
//! perturbs consumption at the per-mille level.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closed_form::{benchmark_solution, proportional_solution};
use crate::grid::WealthGrid;
use crate::model::{LeverageSpec, ModelParams};
use crate::report::ValidationReport;
use crate::solver::{
    consumption_sup_value, policy_iteration_solve, RegionLabel, SolutionField, SolverConfig,
    SolverError,
};

/// Nodes below this multiple of `x_min` are excluded from region
/// classification (Dirichlet boundary layer).
pub const REGION_BUFFER_FACTOR: f64 = 10.0;
/// Nodes below this multiple of `x_min` are excluded from bound-chain
/// checks (the layer perturbs consumption further out than the labels).
pub const BOUND_CHAIN_BUFFER_FACTOR: f64 = 100.0;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum RegionError {
    #[error("field has not converged; region analysis needs a converged solve")]
    UnconvergedField,
    #[error("region structure violation: {0}")]
    StructureViolation(String),
    #[error("domain error: {0}")]
    Domain(String),
}

/// Per-node `pi_M(x) - g(x)`: negative in the unconstrained region,
/// positive where the bound binds. `-inf` under an unbounded constraint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BindingIndicator {
    pub values: Vec<f64>,
}

pub fn binding_indicator(
    field: &SolutionField,
    leverage: &LeverageSpec,
    params: &ModelParams,
) -> BindingIndicator {
    if leverage.is_unbounded() {
        return BindingIndicator {
            values: vec![f64::NEG_INFINITY; field.grid.len()],
        };
    }
    let pi_m = field.pi_merton(params);
    let values = field
        .grid
        .nodes()
        .iter()
        .zip(pi_m)
        .map(|(&x, pm)| pm - leverage.eval(x).unwrap_or(f64::INFINITY))
        .collect();
    BindingIndicator { values }
}

/// A located boundary between regions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Boundary {
    /// Zero of the binding indicator by linear interpolation.
    pub x_star: f64,
    /// Relative mismatch between `pi_M` at the bracketing nodes and the
    /// bound at `x_star`; O(h) when the value function is C^2 through the
    /// boundary (smooth fit).
    pub smooth_fit_residual: f64,
}

/// Ordered partition of the analysis window into labeled intervals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionMap {
    pub intervals: Vec<(f64, f64, RegionLabel)>,
    pub boundaries: Vec<Boundary>,
}

fn analysis_start(grid: &WealthGrid) -> f64 {
    grid.x_min().max(REGION_BUFFER_FACTOR * grid.x_min())
}

/// Classify the field into contiguous regions and locate the boundaries.
pub fn region_map(
    field: &SolutionField,
    leverage: &LeverageSpec,
    params: &ModelParams,
) -> Result<RegionMap, RegionError> {
    if !field.converged {
        return Err(RegionError::UnconvergedField);
    }
    let x = field.grid.nodes();
    let indicator = binding_indicator(field, leverage, params);
    let start = analysis_start(&field.grid);
    let label_of = |v: f64| {
        if v >= 0.0 {
            RegionLabel::Constrained
        } else {
            RegionLabel::Unconstrained
        }
    };

    let first = x.iter().position(|&xi| xi >= start).unwrap_or(0);
    let mut intervals: Vec<(f64, f64, RegionLabel)> = Vec::new();
    let mut boundaries = Vec::new();
    let mut lo = field.grid.x_min();
    let mut current = label_of(indicator.values[first]);
    let pi_m = field.pi_merton(params);

    for i in first..x.len() - 1 {
        let (a, b) = (indicator.values[i], indicator.values[i + 1]);
        let next = label_of(b);
        if next != label_of(a) {
            let t = a / (a - b);
            let x_star = x[i] + t * (x[i + 1] - x[i]);
            let g_star = leverage.eval(x_star).unwrap_or(f64::INFINITY);
            let residual = if g_star.is_finite() && g_star > 0.0 {
                ((pi_m[i] - g_star).abs().max((pi_m[i + 1] - g_star).abs())) / g_star
            } else {
                f64::NAN
            };
            boundaries.push(Boundary {
                x_star,
                smooth_fit_residual: residual,
            });
            intervals.push((lo, x_star, current));
            lo = x_star;
            current = next;
        }
    }
    intervals.push((lo, field.grid.x_max(), current));
    Ok(RegionMap {
        intervals,
        boundaries,
    })
}

/// Locate free boundaries. Under a constant bound (`Linear` with zero
/// slope and positive intercept) the two-region structure is guaranteed:
/// anything other than exactly one crossing signals a solver failure and
/// is raised as `StructureViolation`.
pub fn find_free_boundary(
    field: &SolutionField,
    leverage: &LeverageSpec,
    params: &ModelParams,
) -> Result<Vec<Boundary>, RegionError> {
    let map = region_map(field, leverage, params)?;
    if let LeverageSpec::Linear { slope, intercept } = leverage {
        if *slope == 0.0 && *intercept > 0.0 {
            if map.boundaries.len() != 1 {
                return Err(RegionError::StructureViolation(format!(
                    "constant bound must produce exactly one crossing, found {}",
                    map.boundaries.len()
                )));
            }
            let b = &map.boundaries[0];
            if !(b.x_star > 0.0 && b.x_star.is_finite()) {
                return Err(RegionError::StructureViolation(format!(
                    "free boundary must be positive and finite, got {}",
                    b.x_star
                )));
            }
            if map.intervals.first().map(|iv| iv.2) != Some(RegionLabel::Unconstrained) {
                return Err(RegionError::StructureViolation(
                    "lowest interval must be unconstrained under a constant bound".into(),
                ));
            }
        }
    }
    Ok(map.boundaries)
}

/// Residuals of the region ODEs at the labeled nodes: in the unconstrained
/// region `delta nu J = -kappa J_x^2/J_xx + (consumption sup) + r x J_x`,
/// in the constrained region the `pi = g` quadratic replaces the kappa
/// term. Residuals are scaled by `delta nu J` and compared against `tol`.
pub fn check_region_odes(
    field: &SolutionField,
    params: &ModelParams,
    leverage: &LeverageSpec,
    tol: f64,
) -> ValidationReport {
    let mut report = ValidationReport::new("region_odes");
    let x = field.grid.nodes();
    let m = params.market;
    let dn = params.delta_nu();
    let start = analysis_start(&field.grid);
    let mut worst_u: f64 = 0.0;
    let mut worst_b: f64 = 0.0;
    let mut n_u = 0usize;
    let mut n_b = 0usize;
    for i in 1..x.len() - 1 {
        if x[i] < start {
            continue;
        }
        let (j, jx, jxx) = (field.j[i], field.jx[i], field.jxx[i]);
        if !(j > 0.0 && jx > 0.0 && jxx < 0.0) {
            continue;
        }
        let cons = consumption_sup_value(j, jx, params);
        let common = cons + m.r * x[i] * jx - dn * j;
        let scale = dn * j;
        match field.region[i] {
            RegionLabel::Unconstrained => {
                let res = common - params.derived.kappa * jx * jx / jxx;
                worst_u = worst_u.max((res / scale).abs());
                n_u += 1;
            }
            RegionLabel::Constrained => {
                let g = leverage.eval(x[i]).unwrap_or(f64::INFINITY);
                if !g.is_finite() {
                    continue;
                }
                let res = common
                    + m.excess_return() * g * jx
                    + 0.5 * m.sigma * m.sigma * g * g * jxx;
                worst_b = worst_b.max((res / scale).abs());
                n_b += 1;
            }
        }
    }
    report.check(
        "unconstrained_ode",
        n_u == 0 || worst_u <= tol,
        format!("max scaled residual {worst_u:.3e} over {n_u} nodes (tol {tol:.1e})"),
    );
    report.check(
        "constrained_ode",
        n_b == 0 || worst_b <= tol,
        format!("max scaled residual {worst_b:.3e} over {n_b} nodes (tol {tol:.1e})"),
    );
    report
}

/// Verify the closed-form bound chains for a binding general linear bound
/// `g(x) = k x + L` with `k, L > 0`, `Lbar = L/k`:
/// value sandwich against the proportional and benchmark solutions,
/// two-sided consumption envelopes, portfolio bounds on the unconstrained
/// region and the asymptotic consumption rates at both ends.
///
/// Each inequality is granted `1e-6` absolute slack plus `2 h_i / x_i`
/// relative discretization slack per node.
pub fn check_bound_chains(
    field: &SolutionField,
    params: &ModelParams,
    leverage: &LeverageSpec,
) -> Result<ValidationReport, RegionError> {
    if !field.converged {
        return Err(RegionError::UnconvergedField);
    }
    let (k, l) = match leverage {
        LeverageSpec::Linear { slope, intercept } if *slope > 0.0 && *intercept > 0.0 => {
            (*slope, *intercept)
        }
        _ => {
            return Err(RegionError::Domain(
                "bound chains require a linear bound with positive slope and intercept".into(),
            ))
        }
    };
    let proportional = proportional_solution(k, params)
        .map_err(|e| RegionError::Domain(e.to_string()))?;
    let benchmark = benchmark_solution(params);
    let eta = params.derived.eta;
    let eta0 = proportional.consumption_rate;
    let lbar = l / k;
    let ss = params.prefs.eic;
    let rr = params.prefs.risk_aversion;
    let m = params.market;
    let dn = params.delta_nu();

    let x = field.grid.nodes();
    let start = field.grid.x_min() * BOUND_CHAIN_BUFFER_FACTOR;
    let mut report = ValidationReport::new("bound_chains");

    // worst signed margins, positive = satisfied with room
    let mut value_lower = f64::INFINITY; // J - J0
    let mut value_upper = f64::INFINITY; // Jez - J
    let mut value_shift = f64::INFINITY; // J0(x+Lbar) - J
    let mut cons_lower = f64::INFINITY;
    let mut cons_upper = f64::INFINITY;
    let mut pi_upper = f64::INFINITY;
    let mut pi_lower = f64::INFINITY;
    let mut checked = 0usize;

    for i in 0..x.len() {
        let xi = x[i];
        if xi < start || xi <= 0.0 {
            continue;
        }
        checked += 1;
        let h = if i > 0 { xi - x[i - 1] } else { x[1] - x[0] };
        let slack_rel = 2.0 * h / xi;
        let slack = |reference: f64| 1e-6 + slack_rel * reference.abs();

        let j0 = proportional.value(xi);
        let jez = benchmark.value(xi);
        let j0_shift = proportional.value(xi + lbar);
        value_lower = value_lower.min(field.j[i] - j0 + slack(j0));
        value_upper = value_upper.min(jez - field.j[i] + slack(jez));
        value_shift = value_shift.min(j0_shift - field.j[i] + slack(j0_shift));

        let c = field.c_star[i];
        let ratio = (xi + lbar) / xi;
        let c_lo = (eta * xi).max(eta0 * xi * ratio.powf(1.0 - 1.0 / ss));
        let c_hi = eta0 * xi * ratio.powf(1.0 / ss);
        cons_lower = cons_lower.min(c - c_lo + slack(c_lo));
        cons_upper = cons_upper.min(c_hi - c + slack(c_hi));

        if field.region[i] == RegionLabel::Unconstrained {
            let pi = field.pi_star[i];
            let hi = params.derived.merton_ratio * xi
                + 2.0 * dn * lbar / ((1.0 - rr) * m.excess_return());
            let lo = k * xi
                + 2.0 / m.excess_return() * (ss * eta0 / (1.0 - ss)) * (1.0 - ratio.powf(1.0 / ss));
            pi_upper = pi_upper.min(hi - pi + slack(hi));
            pi_lower = pi_lower.min(pi - lo + slack(lo.abs().max(k * xi)));
        }
    }

    report.check(
        "value_above_proportional",
        value_lower >= 0.0,
        format!("min slack-adjusted margin of J - J0: {value_lower:.3e}"),
    );
    report.check(
        "value_below_benchmark",
        value_upper >= 0.0,
        format!("min slack-adjusted margin of Jez - J: {value_upper:.3e}"),
    );
    report.check(
        "value_below_shifted_proportional",
        value_shift >= 0.0,
        format!("min slack-adjusted margin of J0(x+Lbar) - J: {value_shift:.3e}"),
    );
    report.check(
        "consumption_lower_envelope",
        cons_lower >= 0.0,
        format!("min slack-adjusted margin: {cons_lower:.3e}"),
    );
    report.check(
        "consumption_upper_envelope",
        cons_upper >= 0.0,
        format!("min slack-adjusted margin: {cons_upper:.3e}"),
    );
    report.check(
        "portfolio_upper_bound",
        pi_upper >= 0.0,
        format!("min slack-adjusted margin on U nodes: {pi_upper:.3e}"),
    );
    report.check(
        "portfolio_lower_bound",
        pi_lower >= 0.0,
        format!("min slack-adjusted margin on U nodes: {pi_lower:.3e}"),
    );

    let n = x.len() - 1;
    let tail_rate = field.c_star[n] / x[n];
    report.check(
        "tail_consumption_rate",
        (tail_rate - eta0).abs() <= 0.02 * eta0,
        format!("c*(x_max)/x_max = {tail_rate:.6} vs eta0 = {eta0:.6}"),
    );
    let i_one = x
        .iter()
        .position(|&xi| xi >= 1.0_f64.min(field.grid.x_max()))
        .unwrap_or(n);
    report.check(
        "head_consumption_vanishes",
        field.c_star[0] <= 1e-2 * field.c_star[i_one],
        format!(
            "c*(x_min) = {:.3e} vs 1e-2 c*(~1) = {:.3e}",
            field.c_star[0],
            1e-2 * field.c_star[i_one]
        ),
    );
    report.check(
        "nodes_checked",
        checked > 0,
        format!("{checked} nodes beyond the boundary layer"),
    );
    Ok(report)
}

/// Scaling identity of the value in `(x, L)` jointly: solving with bound
/// `k x + m L` on the `m`-scaled grid must reproduce
/// `m^{1-R} J(x; k, L)` at `m x`. On node-wise scaled grids the discrete
/// problems are exactly equivalent, so the comparison tolerance is a
/// multiple of the solver's own stopping tolerance.
pub fn homogeneity_check(
    params: &ModelParams,
    k: f64,
    l: f64,
    pairs: &[(f64, f64)],
    grid: &WealthGrid,
    config: &SolverConfig,
) -> Result<ValidationReport, SolverError> {
    let rr = params.prefs.risk_aversion;
    let mut report = ValidationReport::new("homogeneity");
    let base_leverage = LeverageSpec::linear(k, l).map_err(|e| SolverError::Domain(e.to_string()))?;
    let base = policy_iteration_solve(params, &base_leverage, grid, config)?;
    let tolerance = 3.0 * (2.0 * config.tol_value);

    for &(x, m) in pairs {
        if !(m > 0.0 && x > 0.0) {
            return Err(SolverError::Domain(format!(
                "homogeneity pairs need positive (x, m), got ({x}, {m})"
            )));
        }
        let scaled_value = if m == 1.0 {
            base.grid.interpolate(&base.j, x)
        } else {
            let scaled_grid = grid
                .scaled(m)
                .map_err(|e| SolverError::Domain(e.to_string()))?;
            let scaled_leverage = LeverageSpec::linear(k, m * l)
                .map_err(|e| SolverError::Domain(e.to_string()))?;
            let scaled = policy_iteration_solve(params, &scaled_leverage, &scaled_grid, config)?;
            scaled.grid.interpolate(&scaled.j, m * x)
        };
        let predicted = m.powf(1.0 - rr) * base.grid.interpolate(&base.j, x);
        let gap = (scaled_value - predicted).abs() / scaled_value.abs().max(f64::MIN_POSITIVE);
        report.check(
            format!("scale_x{x}_m{m}"),
            gap <= tolerance,
            format!(
                "J({:.4}; k={k}, L={:.4}) = {scaled_value:.12}, m^(1-R) J({x}; k={k}, L={l}) = {predicted:.12}, rel gap {gap:.3e} (tol {tolerance:.1e})",
                m * x,
                m * l
            ),
        );
    }
    Ok(report)
}
