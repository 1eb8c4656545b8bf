//! Stationary HJB solver: monotone upwind discretization on a truncated
//! wealth grid, solved by policy iteration.
//!
//! Each iteration improves the feedback policies from the current discrete
//! derivatives (pointwise Hamiltonian maximization) and then evaluates the
//! frozen policy by one tridiagonal solve. The aggregator's nonlinearity in
//! the value is handled by first-order freezing: `f(c, J)` is expanded
//! around the previous iterate and the non-positive slope `f_v` is merged
//! into the diagonal, which preserves diagonal dominance.
//!
//! Boundary conditions: Dirichlet at `x_min` with the lower bound of the
//! value sandwich (exact at `x_min = 0`), and at `x_max` the homogeneity
//! Robin condition `J_x * x = (1-R) J`, which the two-sided homogeneity
//! inequalities pinch onto as `x` grows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closed_form::{
    aggregator, benchmark_solution, bond_only_utility, value_bounds, ClosedFormSolution,
};
use crate::grid::WealthGrid;
use crate::model::{LeverageSpec, ModelParams};

#[derive(Error, Debug)]
pub enum SolverError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("singular tridiagonal system: {0}")]
    SingularSystem(String),
    #[error(
        "policy iteration did not converge after {iterations} iterations \
         (value change {value_change:.3e}, scaled residual {residual:.3e})"
    )]
    NotConverged {
        field: Box<SolutionField>,
        iterations: usize,
        value_change: f64,
        residual: f64,
    },
}

/// Stopping tolerances and safeguards for the policy iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Relative sup-norm change of the value between sweeps.
    pub tol_value: f64,
    /// Scaled residual of the discrete equation at the current policies.
    pub tol_residual: f64,
    pub max_iterations: usize,
    /// Under-relaxation in (0, 1]; 1 = undamped.
    pub damping: f64,
    /// Expand `f(c, .)` to first order around the previous iterate (with
    /// `f_v <= 0` on the diagonal). When off, `f` enters as a frozen source
    /// term, which converges more slowly.
    pub linearize_aggregator: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_value: 1e-10,
            tol_residual: 1e-8,
            max_iterations: 200,
            damping: 1.0,
            linearize_aggregator: true,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<(), SolverError> {
        if !(self.tol_value > 0.0) || !(self.tol_residual > 0.0) {
            return Err(SolverError::Domain(
                "tolerances must be positive".into(),
            ));
        }
        if self.max_iterations < 1 {
            return Err(SolverError::Domain("max_iterations must be >= 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(SolverError::Domain(format!(
                "damping must lie in (0,1], got {}",
                self.damping
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionLabel {
    Unconstrained,
    Constrained,
}

impl std::fmt::Display for RegionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RegionLabel::Unconstrained => write!(f, "unconstrained"),
            RegionLabel::Constrained => write!(f, "constrained"),
        }
    }
}

/// Converged (or best-effort) solve output on a wealth grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionField {
    pub grid: WealthGrid,
    pub j: Vec<f64>,
    pub jx: Vec<f64>,
    pub jxx: Vec<f64>,
    pub c_star: Vec<f64>,
    pub pi_star: Vec<f64>,
    pub region: Vec<RegionLabel>,
    /// HJB residual evaluated with the stored derivatives (O(h) for
    /// converged discrete solves, ~machine precision for analytic fields).
    pub residual: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl SolutionField {
    /// Value at arbitrary wealth, linear inside the grid and extended by
    /// the `x^{1-R}` homogeneity power outside it.
    pub fn value_at(&self, x: f64, params: &ModelParams) -> f64 {
        let rr = params.prefs.risk_aversion;
        let nodes = self.grid.nodes();
        if x <= nodes[0] {
            if nodes[0] <= 0.0 || x <= 0.0 {
                return 0.0;
            }
            return self.j[0] * (x / nodes[0]).powf(1.0 - rr);
        }
        if x >= self.grid.x_max() {
            return self.j[self.j.len() - 1] * (x / self.grid.x_max()).powf(1.0 - rr);
        }
        self.grid.interpolate(&self.j, x)
    }

    /// Discrete monotonicity: `J` strictly increasing across nodes.
    pub fn monotone_increasing(&self) -> bool {
        self.j.windows(2).all(|w| w[1] > w[0])
    }

    /// Strict discrete concavity of `J` at all interior nodes.
    pub fn strictly_concave_interior(&self) -> bool {
        let x = self.grid.nodes();
        (1..x.len() - 1).all(|i| second_difference(x, &self.j, i) < 0.0)
    }

    /// Unclipped portfolio `pi_M = -(mu-r) J_x / (sigma^2 J_xx)` per node,
    /// `+inf` where the stored curvature is non-negative.
    pub fn pi_merton(&self, params: &ModelParams) -> Vec<f64> {
        let m = params.market;
        self.jx
            .iter()
            .zip(&self.jxx)
            .map(|(&jx, &jxx)| {
                if jxx < 0.0 {
                    -m.excess_return() * jx / (m.sigma * m.sigma * jxx)
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    }

    /// Build a field from a closed-form solution with analytic derivatives;
    /// used to feed exact data into residual and region checks.
    pub fn from_closed_form(
        grid: WealthGrid,
        solution: &ClosedFormSolution,
        params: &ModelParams,
        leverage: &LeverageSpec,
    ) -> Self {
        let nodes = grid.nodes().to_vec();
        let j: Vec<f64> = nodes.iter().map(|&x| solution.value(x)).collect();
        let jx: Vec<f64> = nodes.iter().map(|&x| solution.value_prime(x)).collect();
        let jxx: Vec<f64> = nodes.iter().map(|&x| solution.value_second(x)).collect();
        let c_star: Vec<f64> = nodes.iter().map(|&x| solution.consumption(x)).collect();
        let pi_star: Vec<f64> = nodes.iter().map(|&x| solution.portfolio(x)).collect();
        let region: Vec<RegionLabel> = nodes
            .iter()
            .zip(jx.iter().zip(&jxx))
            .map(|(&x, (&jx, &jxx))| {
                let g = leverage.eval(x).unwrap_or(f64::INFINITY);
                label_from_derivatives(jx, jxx, g, params)
            })
            .collect();
        let mut field = Self {
            grid,
            j,
            jx,
            jxx,
            c_star,
            pi_star,
            region,
            residual: Vec::new(),
            iterations: 0,
            converged: true,
        };
        field.residual = hamiltonian_residual(&field, params, leverage);
        field
    }
}

fn label_from_derivatives(jx: f64, jxx: f64, g: f64, params: &ModelParams) -> RegionLabel {
    if g.is_infinite() {
        return RegionLabel::Unconstrained;
    }
    let m = params.market;
    let pi_m = if jxx < 0.0 {
        -m.excess_return() * jx / (m.sigma * m.sigma * jxx)
    } else {
        f64::INFINITY
    };
    // tie pi_M = g labeled constrained, keeping labels right-continuous
    if pi_m >= g {
        RegionLabel::Constrained
    } else {
        RegionLabel::Unconstrained
    }
}

/// Feedback consumption `c* = (J_x)^{-1/S} ((1-R) J)^{rho/S}`, the unique
/// maximizer of `c -> f(c, J) - c J_x` over `c >= 0`.
pub fn optimal_consumption(j: f64, jx: f64, params: &ModelParams) -> Result<f64, SolverError> {
    if !(j > 0.0) || !(jx > 0.0) {
        return Err(SolverError::Domain(format!(
            "optimal consumption needs J > 0 and J_x > 0, got J={j}, J_x={jx}"
        )));
    }
    let ss = params.prefs.eic;
    let rho = params.derived.rho;
    let w = (1.0 - params.prefs.risk_aversion) * j;
    Ok(((-jx.ln() + rho * w.ln()) / ss).exp())
}

/// Value of the consumption supremum at the maximizer,
/// `(S/(1-S)) ((1-R)J)^{rho/S} (J_x)^{1-1/S}`.
pub fn consumption_sup_value(j: f64, jx: f64, params: &ModelParams) -> f64 {
    let ss = params.prefs.eic;
    let rho = params.derived.rho;
    let w = (1.0 - params.prefs.risk_aversion) * j;
    ss / (1.0 - ss) * ((rho / ss) * w.ln() + (1.0 - 1.0 / ss) * jx.ln()).exp()
}

/// Feedback portfolio `pi* = min(-(mu-r) J_x / (sigma^2 J_xx), bound)`,
/// the maximizer of `pi -> pi (mu-r) J_x + sigma^2 pi^2 J_xx / 2` over
/// `|pi| <= bound`. Pass `f64::INFINITY` for an unbounded position.
pub fn optimal_portfolio(
    jx: f64,
    jxx: f64,
    bound: f64,
    params: &ModelParams,
) -> Result<f64, SolverError> {
    if !(jx > 0.0) || !(jxx < 0.0) {
        return Err(SolverError::Domain(format!(
            "optimal portfolio needs J_x > 0 and J_xx < 0, got J_x={jx}, J_xx={jxx}"
        )));
    }
    if bound < 0.0 {
        return Err(SolverError::Domain(format!(
            "leverage bound must be non-negative, got {bound}"
        )));
    }
    let m = params.market;
    let pi_m = -m.excess_return() * jx / (m.sigma * m.sigma * jxx);
    Ok(pi_m.min(bound))
}

/// Non-uniform three-point first derivative (second order on smooth grids).
fn first_difference(x: &[f64], y: &[f64], i: usize) -> f64 {
    let hm = x[i] - x[i - 1];
    let hp = x[i + 1] - x[i];
    (hm * hm * y[i + 1] + (hp * hp - hm * hm) * y[i] - hp * hp * y[i - 1])
        / (hm * hp * (hm + hp))
}

/// Non-uniform three-point second derivative.
fn second_difference(x: &[f64], y: &[f64], i: usize) -> f64 {
    let hm = x[i] - x[i - 1];
    let hp = x[i + 1] - x[i];
    2.0 * (hm * y[i + 1] - (hm + hp) * y[i] + hp * y[i - 1]) / (hm * hp * (hm + hp))
}

/// Central-style derivative estimates at every node; one-sided first
/// derivatives at the ends with curvature from the `x^{1-R}` far-field
/// shape (`J_xx = -R J_x / x`), consistent with the boundary conditions.
fn derivative_estimates(x: &[f64], j: &[f64], params: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let rr = params.prefs.risk_aversion;
    let mut jx = vec![0.0; n];
    let mut jxx = vec![0.0; n];
    for i in 1..n - 1 {
        jx[i] = first_difference(x, j, i);
        jxx[i] = second_difference(x, j, i);
    }
    jx[0] = (j[1] - j[0]) / (x[1] - x[0]);
    jx[n - 1] = (j[n - 1] - j[n - 2]) / (x[n - 1] - x[n - 2]);
    jxx[0] = if x[0] > 0.0 {
        -rr * jx[0] / x[0]
    } else {
        jxx[1]
    };
    jxx[n - 1] = -rr * jx[n - 1] / x[n - 1];
    (jx, jxx)
}

struct Policies {
    c: Vec<f64>,
    pi: Vec<f64>,
    region: Vec<RegionLabel>,
}

/// Pointwise Hamiltonian maximization from the current value iterate.
/// Transient iterates can wander (a kink forms at the Dirichlet node in
/// the first sweeps), so the formulas are applied with floors on `J`, on
/// `J_x` and a cap on the consumption rate; the safeguards are inactive
/// at convergence.
fn improve_policies(
    x: &[f64],
    j: &[f64],
    jx: &[f64],
    jxx: &[f64],
    params: &ModelParams,
    leverage: &LeverageSpec,
) -> Policies {
    let n = x.len();
    let ss = params.prefs.eic;
    let rho = params.derived.rho;
    let rr = params.prefs.risk_aversion;
    let merton = params.derived.merton_ratio;
    let c_rate_cap = 1e3 * params.derived.eta;
    let mut c = vec![0.0; n];
    let mut pi = vec![0.0; n];
    let mut region = vec![RegionLabel::Unconstrained; n];
    for i in 0..n {
        let g = leverage.eval(x[i]).unwrap_or(f64::INFINITY);
        if x[i] <= 0.0 {
            // A(0) = {(0, 0)}: only the null strategy is admissible
            c[i] = 0.0;
            pi[i] = 0.0;
            region[i] = label_from_derivatives(jx[i], jxx[i], g, params);
            continue;
        }
        let j_floor = 1e-6 * bond_only_utility(x[i], params);
        let j_safe = j[i].max(j_floor).max(f64::MIN_POSITIVE);
        let jx_floor = 1e-8 * (1.0 - rr) * j_safe / x[i];
        let jx_safe = jx[i].max(jx_floor);
        let w = (1.0 - rr) * j_safe;
        c[i] = ((-jx_safe.ln() + rho * w.ln()) / ss)
            .exp()
            .min(c_rate_cap * x[i]);
        pi[i] = if jxx[i] < 0.0 {
            let pi_m = -params.market.excess_return() * jx_safe
                / (params.market.sigma * params.market.sigma * jxx[i]);
            pi_m.min(g)
        } else if g.is_finite() {
            // non-concave curvature: the quadratic is maximized at the bound
            g
        } else {
            merton * x[i]
        };
        region[i] = label_from_derivatives(jx_safe, jxx[i], g, params);
    }
    Policies { c, pi, region }
}

/// Solve the tridiagonal system in place (Thomas algorithm).
/// `lower[i]`, `diag[i]`, `upper[i]` are the coefficients of row `i`.
fn thomas_solve(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &mut [f64],
) -> Result<(), SolverError> {
    let n = rhs.len();
    let mut w = vec![0.0; n];
    let mut pivot = diag[0];
    if pivot.abs() < f64::MIN_POSITIVE {
        return Err(SolverError::SingularSystem("zero pivot in row 0".into()));
    }
    w[0] = upper[0] / pivot;
    rhs[0] /= pivot;
    for i in 1..n {
        pivot = diag[i] - lower[i] * w[i - 1];
        if pivot.abs() < 1e-300 {
            return Err(SolverError::SingularSystem(format!(
                "vanishing pivot in row {i}"
            )));
        }
        w[i] = upper[i] / pivot;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= w[i] * rhs[i + 1];
    }
    Ok(())
}

/// One linear solve of the frozen-policy equation
/// `delta nu J = (r x + (mu-r) pi - c) D[J] + sigma^2 pi^2 D^2[J] / 2 + f_lin(c, J)`
/// with upwind first differences, central second differences, Dirichlet
/// data at `x_min` (the lower value bound) and the homogeneity Robin
/// condition at `x_max`.
pub fn policy_evaluation(
    c: &[f64],
    pi: &[f64],
    j_prev: &[f64],
    grid: &WealthGrid,
    params: &ModelParams,
    config: &SolverConfig,
) -> Result<Vec<f64>, SolverError> {
    let x = grid.nodes();
    let n = x.len();
    assert!(c.len() == n && pi.len() == n && j_prev.len() == n);
    let dn = params.delta_nu();
    let rr = params.prefs.risk_aversion;
    let m = params.market;

    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = vec![0.0; n];

    diag[0] = 1.0;
    rhs[0] = bond_only_utility(x[0], params);

    for i in 1..n - 1 {
        let hm = x[i] - x[i - 1];
        let hp = x[i + 1] - x[i];
        let v_prev = j_prev[i].max(f64::MIN_POSITIVE);
        let f_val = aggregator(c[i], v_prev, params)
            .map_err(|e| SolverError::Domain(e.to_string()))?;
        let f_v = if config.linearize_aggregator && f_val.is_finite() {
            params.derived.rho * f_val / v_prev
        } else {
            0.0
        };
        debug_assert!(f_v <= 0.0);

        let drift = m.r * x[i] + m.excess_return() * pi[i] - c[i];
        let diffusion = 0.5 * m.sigma * m.sigma * pi[i] * pi[i];

        let mut d = dn - f_v;
        let mut lo_c = 0.0;
        let mut up_c = 0.0;
        if drift >= 0.0 {
            d += drift / hp;
            up_c -= drift / hp;
        } else {
            d -= drift / hm;
            lo_c += drift / hm;
        }
        lo_c -= 2.0 * diffusion / (hm * (hm + hp));
        d += 2.0 * diffusion / (hm * hp);
        up_c -= 2.0 * diffusion / (hp * (hm + hp));

        // monotone-scheme coefficient signs, checked every assembly
        debug_assert!(lo_c <= 0.0 && up_c <= 0.0 && d > 0.0);
        if !(lo_c <= 0.0 && up_c <= 0.0 && d > lo_c.abs() + up_c.abs() - 1e-12 * d.abs()) {
            return Err(SolverError::SingularSystem(format!(
                "monotonicity lost in row {i}: lower={lo_c}, diag={d}, upper={up_c}"
            )));
        }

        lower[i] = lo_c;
        diag[i] = d;
        upper[i] = up_c;
        rhs[i] = f_val - f_v * j_prev[i];
    }

    // Robin row: J_x(x_max) = (1-R) J(x_max) / x_max with a one-sided
    // difference. Not strictly diagonally dominant, but far from singular
    // for any grid fine enough to resolve the far field.
    let h_end = x[n - 1] - x[n - 2];
    let d_end = 1.0 / h_end - (1.0 - rr) / x[n - 1];
    if d_end <= 0.0 {
        return Err(SolverError::SingularSystem(
            "grid too coarse at x_max for the Robin boundary row".into(),
        ));
    }
    lower[n - 1] = -1.0 / h_end;
    diag[n - 1] = d_end;
    rhs[n - 1] = 0.0;

    thomas_solve(&lower, &diag, &upper, &mut rhs)?;
    Ok(rhs)
}

/// Residual of the discrete equation at the current policies with `f`
/// evaluated at `J` itself (no freezing); this is the quantity driven to
/// zero by the iteration.
fn scheme_residual(
    c: &[f64],
    pi: &[f64],
    j: &[f64],
    grid: &WealthGrid,
    params: &ModelParams,
) -> f64 {
    let x = grid.nodes();
    let n = x.len();
    let dn = params.delta_nu();
    let m = params.market;
    let mut worst: f64 = 0.0;
    for i in 1..n - 1 {
        let hm = x[i] - x[i - 1];
        let hp = x[i + 1] - x[i];
        let drift = m.r * x[i] + m.excess_return() * pi[i] - c[i];
        let dj = if drift >= 0.0 {
            (j[i + 1] - j[i]) / hp
        } else {
            (j[i] - j[i - 1]) / hm
        };
        let d2j = second_difference(x, j, i);
        let f_val = aggregator(c[i], j[i].max(f64::MIN_POSITIVE), params).unwrap_or(f64::NAN);
        let res = dn * j[i]
            - drift * dj
            - 0.5 * m.sigma * m.sigma * pi[i] * pi[i] * d2j
            - f_val;
        let scale = dn * j[i].abs() + f64::MIN_POSITIVE;
        worst = worst.max((res / scale).abs());
    }
    worst
}

/// HJB residual `-delta nu J + H(x, J, J_x, J_xx)` per node, evaluated
/// with the field's stored derivatives and fresh pointwise maximization.
/// Zero at the exact solution; O(h) for a converged discrete field, and
/// machine precision for closed forms with analytic derivatives. Nodes
/// where the stored data leave the Hamiltonian undefined (`J <= 0`,
/// `J_x <= 0`, or non-concave curvature under an unbounded constraint)
/// yield NaN.
pub fn hamiltonian_residual(
    field: &SolutionField,
    params: &ModelParams,
    leverage: &LeverageSpec,
) -> Vec<f64> {
    let m = params.market;
    let dn = params.delta_nu();
    field
        .grid
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let (j, jx, jxx) = (field.j[i], field.jx[i], field.jxx[i]);
            if x <= 0.0 && j == 0.0 {
                return 0.0;
            }
            if !(j > 0.0) || !(jx > 0.0) {
                return f64::NAN;
            }
            let g = leverage.eval(x).unwrap_or(f64::INFINITY);
            let portfolio_sup = if jxx < 0.0 {
                let pi_m = -m.excess_return() * jx / (m.sigma * m.sigma * jxx);
                let pi = pi_m.min(g);
                pi * m.excess_return() * jx + 0.5 * m.sigma * m.sigma * pi * pi * jxx
            } else if g.is_finite() {
                g * m.excess_return() * jx + 0.5 * m.sigma * m.sigma * g * g * jxx
            } else {
                return f64::NAN;
            };
            -dn * j + consumption_sup_value(j, jx, params) + portfolio_sup + m.r * x * jx
        })
        .collect()
}

/// Solve the constrained HJB equation by policy iteration. The initial
/// guess is the unconstrained benchmark clipped to the value sandwich.
pub fn policy_iteration_solve(
    params: &ModelParams,
    leverage: &LeverageSpec,
    grid: &WealthGrid,
    config: &SolverConfig,
) -> Result<SolutionField, SolverError> {
    config.validate()?;
    if grid.len() < 100 {
        return Err(SolverError::Domain(format!(
            "solver grids need at least 100 nodes, got {}",
            grid.len()
        )));
    }
    if grid.x_max() / grid.x_min().max(1e-12) < 10.0 {
        return Err(SolverError::Domain(
            "solver grids must span at least a decade of wealth".into(),
        ));
    }
    let x = grid.nodes();
    let benchmark = benchmark_solution(params);
    let mut j: Vec<f64> = x
        .iter()
        .map(|&xi| {
            let (lo, hi) = value_bounds(xi, params);
            benchmark.value(xi).clamp(lo, hi)
        })
        .collect();
    j[0] = bond_only_utility(x[0], params);

    let mut value_change = f64::INFINITY;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    for it in 1..=config.max_iterations {
        iterations = it;
        let (jx, jxx) = derivative_estimates(x, &j, params);
        let policies = improve_policies(x, &j, &jx, &jxx, params, leverage);
        let j_new = policy_evaluation(&policies.c, &policies.pi, &j, grid, params, config)?;

        value_change = j
            .iter()
            .zip(&j_new)
            .map(|(&a, &b)| (b - a).abs() / a.abs().max(f64::MIN_POSITIVE))
            .fold(0.0f64, f64::max);

        if config.damping < 1.0 {
            for (ji, &jn) in j.iter_mut().zip(&j_new) {
                *ji += config.damping * (jn - *ji);
            }
        } else {
            j = j_new;
        }

        residual = scheme_residual(&policies.c, &policies.pi, &j, grid, params);
        if value_change < config.tol_value && residual < config.tol_residual {
            converged = true;
            break;
        }
    }

    let (jx, jxx) = derivative_estimates(x, &j, params);
    let policies = improve_policies(x, &j, &jx, &jxx, params, leverage);
    let mut field = SolutionField {
        grid: grid.clone(),
        j,
        jx,
        jxx,
        c_star: policies.c,
        pi_star: policies.pi,
        region: policies.region,
        residual: Vec::new(),
        iterations,
        converged,
    };
    field.residual = hamiltonian_residual(&field, params, leverage);

    if !converged {
        return Err(SolverError::NotConverged {
            iterations,
            value_change,
            residual,
            field: Box::new(field),
        });
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_form::proportional_solution;
    use crate::grid::{build_grid, GridSpacing};
    use crate::model::{MarketParams, PreferenceParams};
    use approx::assert_relative_eq;

    fn example_params() -> ModelParams {
        ModelParams::new(
            MarketParams::new(0.08, 0.2, 0.02).unwrap(),
            PreferenceParams::new(0.8, 0.5, 0.1).unwrap(),
        )
        .unwrap()
    }

    fn default_grid() -> WealthGrid {
        build_grid(1e-3, 50.0, 2000, GridSpacing::LogUniform).unwrap()
    }

    #[test]
    fn optimal_consumption_reproduces_benchmark_rate() {
        // With J = J^ez and its analytic derivative the feedback rule gives
        // c* = eta x identically.
        let p = example_params();
        let b = benchmark_solution(&p);
        for x in [0.5, 1.0, 2.0] {
            let c = optimal_consumption(b.value(x), b.value_prime(x), &p).unwrap();
            assert_relative_eq!(c, p.derived.eta * x, max_relative = 1e-12);
        }
        assert!(optimal_consumption(-1.0, 1.0, &p).is_err());
        assert!(optimal_consumption(1.0, 0.0, &p).is_err());
    }

    #[test]
    fn optimal_consumption_first_order_condition() {
        // d f(c, J) / dc at c* equals J_x; five-point finite difference.
        let p = example_params();
        let b = benchmark_solution(&p);
        for x in [0.5, 1.0, 2.0] {
            let j = b.value(x);
            let jx = b.value_prime(x);
            let c = optimal_consumption(j, jx, &p).unwrap();
            let h = c * 1e-3;
            let f = |cc: f64| aggregator(cc, j, &p).unwrap();
            let deriv = (-f(c + 2.0 * h) + 8.0 * f(c + h) - 8.0 * f(c - h) + f(c - 2.0 * h))
                / (12.0 * h);
            assert_relative_eq!(deriv, jx, max_relative = 1e-10);
        }
    }

    #[test]
    fn optimal_consumption_vanishes_for_steep_marginal_value() {
        let p = example_params();
        let c1 = optimal_consumption(1.0, 1e3, &p).unwrap();
        let c2 = optimal_consumption(1.0, 1e6, &p).unwrap();
        assert!(c2 < c1 && c2 < 1e-9);
    }

    #[test]
    fn optimal_portfolio_clipping() {
        let p = example_params();
        // pi_M = 3 against bound 1 -> 1
        let jx = 1.0;
        let jxx = -p.market.excess_return() / (p.market.sigma * p.market.sigma * 3.0);
        assert_relative_eq!(optimal_portfolio(jx, jxx, 1.0, &p).unwrap(), 1.0);
        // pi_M = 0.5, unbounded -> 0.5
        let jxx = -p.market.excess_return() / (p.market.sigma * p.market.sigma * 0.5);
        assert_relative_eq!(
            optimal_portfolio(jx, jxx, f64::INFINITY, &p).unwrap(),
            0.5,
            max_relative = 1e-12
        );
        assert!(optimal_portfolio(1.0, 0.5, 1.0, &p).is_err());
        assert!(optimal_portfolio(0.0, -1.0, 1.0, &p).is_err());
    }

    #[test]
    fn optimal_portfolio_agrees_with_exhaustive_scan() {
        let p = example_params();
        let m = p.market;
        let cases = [(1.0, -0.5, 2.0), (0.3, -2.0, 1.0), (2.0, -0.1, 4.0)];
        for &(jx, jxx, bound) in &cases {
            let pi_star = optimal_portfolio(jx, jxx, bound, &p).unwrap();
            let objective =
                |pi: f64| pi * m.excess_return() * jx + 0.5 * m.sigma * m.sigma * pi * pi * jxx;
            let n = 100_000;
            let mut best = f64::NEG_INFINITY;
            let mut best_pi = 0.0;
            for i in 0..=n {
                let pi = -bound + 2.0 * bound * i as f64 / n as f64;
                let v = objective(pi);
                if v > best {
                    best = v;
                    best_pi = pi;
                }
            }
            let grid_step = 2.0 * bound / n as f64;
            assert!(
                (pi_star - best_pi).abs() <= grid_step,
                "formula {pi_star} vs scan {best_pi}"
            );
        }
    }

    #[test]
    fn closed_forms_null_the_hamiltonian() {
        // J^ez with g unbounded and J0 with g(x) = kx solve the equation
        // identically; analytic derivatives leave only rounding noise.
        let p = example_params();
        let grid = build_grid(0.1, 50.0, 500, GridSpacing::LogUniform).unwrap();
        let dn = p.delta_nu();

        let unbounded = LeverageSpec::Unbounded;
        let field = SolutionField::from_closed_form(
            grid.clone(),
            &benchmark_solution(&p),
            &p,
            &unbounded,
        );
        for (i, &res) in field.residual.iter().enumerate() {
            let scale = dn * field.j[i];
            assert!(
                (res / scale).abs() < 1e-12,
                "benchmark residual {res} at node {i}"
            );
        }

        let proportional = LeverageSpec::linear(1.0, 0.0).unwrap();
        let field = SolutionField::from_closed_form(
            grid,
            &proportional_solution(1.0, &p).unwrap(),
            &p,
            &proportional,
        );
        for (i, &res) in field.residual.iter().enumerate() {
            let scale = dn * field.j[i];
            assert!(
                (res / scale).abs() < 1e-12,
                "proportional residual {res} at node {i}"
            );
        }
    }

    #[test]
    fn overvalued_field_has_negative_residual() {
        let p = example_params();
        let grid = build_grid(0.1, 50.0, 200, GridSpacing::LogUniform).unwrap();
        let mut doubled = benchmark_solution(&p);
        doubled.value_coefficient *= 2.0;
        let field =
            SolutionField::from_closed_form(grid, &doubled, &p, &LeverageSpec::Unbounded);
        assert!(field.residual.iter().all(|&r| r < 0.0));
    }

    #[test]
    fn policy_evaluation_bond_only_is_exact() {
        // Policy (0, r x) has zero drift and zero diffusion, so the frozen
        // equation is pointwise algebraic and reproduces the bond-only
        // utility to rounding precision.
        let p = example_params();
        let grid = default_grid();
        let x = grid.nodes();
        let c: Vec<f64> = x.iter().map(|&xi| p.market.r * xi).collect();
        let pi = vec![0.0; x.len()];
        let j_prev: Vec<f64> = x.iter().map(|&xi| bond_only_utility(xi, &p)).collect();
        let j = policy_evaluation(&c, &pi, &j_prev, &grid, &p, &SolverConfig::default()).unwrap();
        let n = j.len();
        for i in 0..n - 1 {
            assert_relative_eq!(j[i], j_prev[i], max_relative = 1e-11);
        }
        // the one-sided Robin row at x_max is first-order accurate
        assert_relative_eq!(j[n - 1], j_prev[n - 1], max_relative = 1e-5);
    }

    #[test]
    fn policy_evaluation_proportional_fixed_point() {
        // Frozen at the exact proportional solution the solve returns it,
        // up to upwind O(h) error and the Dirichlet boundary layer.
        let p = example_params();
        let grid = default_grid();
        let x = grid.nodes();
        let sol = proportional_solution(1.0, &p).unwrap();
        let c: Vec<f64> = x.iter().map(|&xi| sol.consumption(xi)).collect();
        let pi: Vec<f64> = x.iter().map(|&xi| sol.portfolio(xi)).collect();
        let j_prev: Vec<f64> = x.iter().map(|&xi| sol.value(xi)).collect();
        let j = policy_evaluation(&c, &pi, &j_prev, &grid, &p, &SolverConfig::default()).unwrap();
        let mut worst: f64 = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            if xi < 0.1 || xi > 20.0 {
                continue;
            }
            worst = worst.max(((j[i] - j_prev[i]) / j_prev[i]).abs());
        }
        assert!(worst < 1.5e-3, "fixed-point drift {worst}");
    }

    #[test]
    fn solve_proportional_matches_closed_form() {
        let p = example_params();
        let leverage = LeverageSpec::linear(1.0, 0.0).unwrap();
        let field =
            policy_iteration_solve(&p, &leverage, &default_grid(), &SolverConfig::default())
                .unwrap();
        assert!(field.converged);
        let sol = proportional_solution(1.0, &p).unwrap();
        let x = field.grid.nodes();
        let mut worst_j: f64 = 0.0;
        let mut worst_c: f64 = 0.0;
        let mut worst_pi: f64 = 0.0;
        for i in 0..x.len() {
            if x[i] < 0.1 || x[i] > 20.0 {
                continue;
            }
            worst_j = worst_j.max(((field.j[i] - sol.value(x[i])) / sol.value(x[i])).abs());
            worst_c = worst_c.max((field.c_star[i] / x[i] - sol.consumption_rate).abs());
            worst_pi = worst_pi.max((field.pi_star[i] / x[i] - 1.0).abs());
        }
        assert!(worst_j <= 1e-3, "J error {worst_j}");
        assert!(worst_c <= 1e-3, "c rate error {worst_c}");
        assert!(worst_pi <= 1e-2, "pi rate error {worst_pi}");
        // all constrained outside the Dirichlet boundary layer
        assert!(field
            .region
            .iter()
            .zip(x)
            .filter(|&(_, &xi)| xi >= 10.0 * x[0])
            .all(|(&l, _)| l == RegionLabel::Constrained));
    }

    #[test]
    fn solve_respects_sandwich_shape_and_monotonicity_in_g() {
        let p = example_params();
        let grid = default_grid();
        let cfg = SolverConfig::default();
        let tight = policy_iteration_solve(
            &p,
            &LeverageSpec::linear(0.5, 0.0).unwrap(),
            &grid,
            &cfg,
        )
        .unwrap();
        let loose = policy_iteration_solve(
            &p,
            &LeverageSpec::linear(1.0, 0.0).unwrap(),
            &grid,
            &cfg,
        )
        .unwrap();
        for (i, &xi) in grid.nodes().iter().enumerate() {
            let (lo, hi) = value_bounds(xi, &p);
            assert!(tight.j[i] >= lo * (1.0 - 1e-6) && tight.j[i] <= hi * (1.0 + 1e-6));
            // larger admissible set dominates pointwise
            assert!(tight.j[i] <= loose.j[i] * (1.0 + 1e-9) + 1e-12);
        }
        assert!(tight.monotone_increasing());
        assert!(tight.strictly_concave_interior());
    }

    #[test]
    fn solve_unbounded_matches_benchmark_and_labels() {
        let p = example_params();
        let field = policy_iteration_solve(
            &p,
            &LeverageSpec::Unbounded,
            &default_grid(),
            &SolverConfig::default(),
        )
        .unwrap();
        let x = field.grid.nodes();
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            if x[i] < 0.1 || x[i] > 20.0 {
                continue;
            }
            let exact = benchmark_value(x[i], &p);
            worst = worst.max(((field.j[i] - exact) / exact).abs());
        }
        assert!(worst <= 1e-3, "unbounded J error {worst}");
        assert!(field
            .region
            .iter()
            .all(|&l| l == RegionLabel::Unconstrained));
    }

    #[test]
    fn refinement_reduces_oracle_error() {
        // First-order behavior away from the boundary layers: halving h
        // shrinks the proportional-oracle error by at least 1.7x.
        let p = example_params();
        let leverage = LeverageSpec::linear(1.0, 0.0).unwrap();
        let sol = proportional_solution(1.0, &p).unwrap();
        let cfg = SolverConfig::default();
        let mut errs = Vec::new();
        for m in [1000, 2000] {
            let grid = build_grid(1e-3, 50.0, m, GridSpacing::LogUniform).unwrap();
            let field = policy_iteration_solve(&p, &leverage, &grid, &cfg).unwrap();
            let mut worst: f64 = 0.0;
            for (i, &xi) in field.grid.nodes().iter().enumerate() {
                if xi < 1.0 || xi > 20.0 {
                    continue;
                }
                worst = worst.max(((field.j[i] - sol.value(xi)) / sol.value(xi)).abs());
            }
            errs.push(worst);
        }
        assert!(
            errs[0] / errs[1] >= 1.7,
            "refinement ratio {} (errors {:?})",
            errs[0] / errs[1],
            errs
        );
    }

    #[test]
    fn consumption_vanishes_at_small_wealth() {
        let p = example_params();
        let field = policy_iteration_solve(
            &p,
            &LeverageSpec::linear(1.0, 0.5).unwrap(),
            &default_grid(),
            &SolverConfig::default(),
        )
        .unwrap();
        let x = field.grid.nodes();
        let c_at = |target: f64| {
            let i = x
                .iter()
                .position(|&xi| xi >= target)
                .unwrap_or(x.len() - 1);
            field.c_star[i]
        };
        assert!(field.c_star[0] <= 1e-2 * c_at(1.0));
        assert!(field.c_star.iter().skip(1).all(|&c| c > 0.0));
    }

    #[test]
    fn not_converged_carries_best_iterate() {
        let p = example_params();
        let cfg = SolverConfig {
            max_iterations: 2,
            tol_value: 1e-14,
            ..SolverConfig::default()
        };
        let err = policy_iteration_solve(
            &p,
            &LeverageSpec::linear(1.0, 0.0).unwrap(),
            &default_grid(),
            &cfg,
        )
        .unwrap_err();
        match err {
            SolverError::NotConverged {
                field, iterations, ..
            } => {
                assert_eq!(iterations, 2);
                assert!(!field.converged);
                assert_eq!(field.j.len(), 2000);
            }
            other => panic!("expected NotConverged, got {other}"),
        }
    }

    #[test]
    fn solver_rejects_undersized_grids() {
        let p = example_params();
        let grid = build_grid(1e-3, 50.0, 50, GridSpacing::LogUniform).unwrap();
        assert!(matches!(
            policy_iteration_solve(
                &p,
                &LeverageSpec::Unbounded,
                &grid,
                &SolverConfig::default()
            ),
            Err(SolverError::Domain(_))
        ));
    }

    #[test]
    fn thomas_solves_reference_system() {
        let lower = [0.0, -1.0, -1.0, -1.0];
        let diag = [4.0, 4.0, 4.0, 4.0];
        let upper = [-1.0, -1.0, -1.0, 0.0];
        let mut rhs = [5.0, 5.0, 5.0, 5.0];
        thomas_solve(&lower, &diag, &upper, &mut rhs).unwrap();
        // verify A x = b
        let x = rhs;
        let b0 = 4.0 * x[0] - x[1];
        let b1 = -x[0] + 4.0 * x[1] - x[2];
        let b2 = -x[1] + 4.0 * x[2] - x[3];
        let b3 = -x[2] + 4.0 * x[3];
        for b in [b0, b1, b2, b3] {
            assert_relative_eq!(b, 5.0, max_relative = 1e-12);
        }
    }

    use crate::closed_form::benchmark_value;
}
