//! Model parameters: market, preferences, derived constants and the
//! leverage-constraint function.
//!
//! All types validate their invariants at construction and are immutable
//! afterwards, so downstream modules can assume validity and share them
//! freely across threads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::report::{CheckResult, ValidationReport};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid market parameters: {0}")]
    InvalidMarket(String),
    #[error("invalid preference parameters: {0}")]
    InvalidPreference(String),
    #[error("no well-posed solution: {0}")]
    NoWellPosedSolution(String),
    #[error("wealth must be non-negative, got {0}")]
    NegativeWealth(f64),
    #[error("invalid leverage specification: {0}")]
    InvalidLeverage(String),
}

/// Black-Scholes market: risky drift `mu`, volatility `sigma`, risk-free
/// rate `r`, all in annual units. Requires `sigma > 0` and `0 < r < mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    pub mu: f64,
    pub sigma: f64,
    pub r: f64,
}

impl MarketParams {
    pub fn new(mu: f64, sigma: f64, r: f64) -> Result<Self, ModelError> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(ModelError::InvalidMarket(format!(
                "sigma must be positive and finite, got {sigma}"
            )));
        }
        if !(r > 0.0 && r < mu) || !mu.is_finite() {
            return Err(ModelError::InvalidMarket(format!(
                "require 0 < r < mu, got r={r}, mu={mu}"
            )));
        }
        Ok(Self { mu, sigma, r })
    }

    /// Excess return of the risky asset, `mu - r`.
    pub fn excess_return(&self) -> f64 {
        self.mu - self.r
    }
}

/// Epstein-Zin preferences: relative risk aversion `R`, elasticity of
/// intertemporal complementarity `S` (the reciprocal of the EIS) and
/// subjective discount rate `delta`.
///
/// Both `R` and `S` must lie in (0,1). The degenerate CRRA case `R == S`
/// is rejected at construction; callers wanting the time-separable limit
/// should approach it through a sequence with `S < R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceParams {
    /// Relative risk aversion R.
    pub risk_aversion: f64,
    /// Elasticity of intertemporal complementarity S = 1/EIS.
    pub eic: f64,
    /// Subjective discount rate delta (per year).
    pub delta: f64,
}

impl PreferenceParams {
    pub fn new(risk_aversion: f64, eic: f64, delta: f64) -> Result<Self, ModelError> {
        if !(risk_aversion > 0.0 && risk_aversion < 1.0) {
            return Err(ModelError::InvalidPreference(format!(
                "risk aversion R must lie in (0,1), got {risk_aversion}"
            )));
        }
        if !(eic > 0.0 && eic < 1.0) {
            return Err(ModelError::InvalidPreference(format!(
                "EIC S must lie in (0,1), got {eic}"
            )));
        }
        if risk_aversion == eic {
            return Err(ModelError::InvalidPreference(
                "R == S (CRRA limit) is excluded; use S < R".into(),
            ));
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(ModelError::InvalidPreference(format!(
                "discount rate delta must be positive, got {delta}"
            )));
        }
        Ok(Self {
            risk_aversion,
            eic,
            delta,
        })
    }
}

/// Constants derived from market and preference parameters.
///
/// `nu = (1-R)/(1-S)`, `rho = (S-R)/(1-R) = 1 - 1/nu`,
/// `kappa = (mu-r)^2 / (2 sigma^2)`,
/// `eta = (1/S)[delta + (S-1)(r + kappa/R)]`,
/// `merton_ratio = (mu-r)/(R sigma^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedParams {
    pub nu: f64,
    pub rho: f64,
    pub kappa: f64,
    pub eta: f64,
    pub merton_ratio: f64,
}

/// Compute the derived constants, rejecting parameter combinations for
/// which the benchmark problem is ill-posed (`nu` outside (0,1) or
/// `eta <= 0`).
pub fn derive_params(
    market: &MarketParams,
    prefs: &PreferenceParams,
) -> Result<DerivedParams, ModelError> {
    let rr = prefs.risk_aversion;
    let ss = prefs.eic;
    let nu = (1.0 - rr) / (1.0 - ss);
    if !(nu > 0.0 && nu < 1.0) {
        return Err(ModelError::InvalidPreference(format!(
            "nu = (1-R)/(1-S) = {nu} must lie in (0,1); require S < R"
        )));
    }
    let rho = (ss - rr) / (1.0 - rr);
    let kappa = market.excess_return().powi(2) / (2.0 * market.sigma * market.sigma);
    let eta = (prefs.delta + (ss - 1.0) * (market.r + kappa / rr)) / ss;
    if !(eta > 0.0) {
        return Err(ModelError::NoWellPosedSolution(format!(
            "eta = {eta} must be positive for the benchmark utility to be finite"
        )));
    }
    let merton_ratio = market.excess_return() / (rr * market.sigma * market.sigma);
    Ok(DerivedParams {
        nu,
        rho,
        kappa,
        eta,
        merton_ratio,
    })
}

/// Validated bundle of market, preference and derived parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub market: MarketParams,
    pub prefs: PreferenceParams,
    pub derived: DerivedParams,
}

impl ModelParams {
    pub fn new(market: MarketParams, prefs: PreferenceParams) -> Result<Self, ModelError> {
        let derived = derive_params(&market, &prefs)?;
        Ok(Self {
            market,
            prefs,
            derived,
        })
    }

    /// `delta * nu`, the effective discount rate of the stationary utility
    /// recursion.
    pub fn delta_nu(&self) -> f64 {
        self.prefs.delta * self.derived.nu
    }

    #[doc(hidden)]
    /// Test hook: flip the sign of kappa to exercise negative-control paths
    /// in the validation pipeline. Never use outside tests.
    pub fn corrupt_kappa_sign(&mut self) {
        self.derived.kappa = -self.derived.kappa;
    }
}

/// Leverage bound `g(x)` capping the dollar risky position: admissible
/// portfolios satisfy `|pi| <= g(X)`.
///
/// `PiecewiseLinear` segments are joined continuously at the thresholds:
/// the declared `intercept` applies to the first segment and every later
/// segment offset is recomputed so that `g` is continuous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LeverageSpec {
    /// `g(x) = slope * x + intercept`.
    Linear { slope: f64, intercept: f64 },
    /// Slopes `slopes[i]` on `(thresholds[i-1], thresholds[i])` with
    /// continuous concatenation; `slopes.len() == thresholds.len() + 1`.
    PiecewiseLinear {
        thresholds: Vec<f64>,
        slopes: Vec<f64>,
        intercept: f64,
    },
    /// No constraint; `eval` returns `f64::INFINITY`.
    Unbounded,
}

impl LeverageSpec {
    pub fn linear(slope: f64, intercept: f64) -> Result<Self, ModelError> {
        if !(slope >= 0.0) || !(intercept >= 0.0) {
            return Err(ModelError::InvalidLeverage(format!(
                "linear leverage requires slope >= 0 and intercept >= 0, got ({slope}, {intercept})"
            )));
        }
        Ok(Self::Linear { slope, intercept })
    }

    /// Piecewise-linear bound. Thresholds must be strictly increasing and
    /// positive, slopes non-negative. Slope monotonicity (the concavity of
    /// `g`) is deliberately not a construction error: `validate` reports it
    /// so that ill-shaped specifications can be diagnosed.
    pub fn piecewise_linear(
        thresholds: Vec<f64>,
        slopes: Vec<f64>,
        intercept: f64,
    ) -> Result<Self, ModelError> {
        if slopes.len() != thresholds.len() + 1 {
            return Err(ModelError::InvalidLeverage(format!(
                "need one more slope than thresholds, got {} slopes for {} thresholds",
                slopes.len(),
                thresholds.len()
            )));
        }
        if thresholds.is_empty() {
            return Err(ModelError::InvalidLeverage(
                "piecewise spec needs at least one threshold; use Linear instead".into(),
            ));
        }
        if !thresholds.windows(2).all(|w| w[0] < w[1]) || thresholds[0] <= 0.0 {
            return Err(ModelError::InvalidLeverage(
                "thresholds must be positive and strictly increasing".into(),
            ));
        }
        if slopes.iter().any(|k| !(*k >= 0.0)) || !(intercept >= 0.0) {
            return Err(ModelError::InvalidLeverage(
                "slopes and intercept must be non-negative".into(),
            ));
        }
        Ok(Self::PiecewiseLinear {
            thresholds,
            slopes,
            intercept,
        })
    }

    /// Evaluate `g(x)`. Returns `f64::INFINITY` for `Unbounded`.
    pub fn eval(&self, x: f64) -> Result<f64, ModelError> {
        if x < 0.0 {
            return Err(ModelError::NegativeWealth(x));
        }
        Ok(match self {
            Self::Linear { slope, intercept } => slope * x + intercept,
            Self::PiecewiseLinear {
                thresholds,
                slopes,
                intercept,
            } => {
                let mut value = *intercept;
                let mut prev = 0.0;
                for (i, &w) in thresholds.iter().enumerate() {
                    if x <= w {
                        return Ok(value + slopes[i] * (x - prev));
                    }
                    value += slopes[i] * (w - prev);
                    prev = w;
                }
                value + slopes[thresholds.len()] * (x - prev)
            }
            Self::Unbounded => f64::INFINITY,
        })
    }

    pub fn is_unbounded(&self) -> bool {
        matches!(self, Self::Unbounded)
    }

    /// Declared Lipschitz constant: the largest slope.
    pub fn lipschitz_constant(&self) -> f64 {
        match self {
            Self::Linear { slope, .. } => *slope,
            Self::PiecewiseLinear { slopes, .. } => {
                slopes.iter().cloned().fold(0.0f64, f64::max)
            }
            Self::Unbounded => f64::INFINITY,
        }
    }

    /// Check the hypotheses required of a leverage bound on a sample grid:
    /// monotonicity, concavity (chord condition on consecutive triples),
    /// the declared Lipschitz constant, and positivity for `x > 0`.
    ///
    /// Failures are reported, not raised: a spec that fails here is outside
    /// the theory but may still be of diagnostic interest.
    pub fn validate(&self, sample_grid: &[f64]) -> ValidationReport {
        let mut report = ValidationReport::new("leverage");
        if self.is_unbounded() {
            report.push(CheckResult::pass("unbounded", "g = +inf; no constraint to check"));
            return report;
        }
        let tol = 1e-12;
        let g: Vec<f64> = sample_grid
            .iter()
            .map(|&x| self.eval(x).unwrap_or(f64::NAN))
            .collect();

        let monotone = sample_grid
            .windows(2)
            .zip(g.windows(2))
            .all(|(xs, gs)| gs[1] >= gs[0] - tol * (1.0 + gs[0].abs()) || xs[1] <= xs[0]);
        report.push(CheckResult::new(
            "monotone",
            monotone,
            "g non-decreasing on sample grid",
        ));

        let mut concave = true;
        for (xs, gs) in sample_grid.windows(3).zip(g.windows(3)) {
            let span = xs[2] - xs[0];
            if span <= 0.0 {
                continue;
            }
            let w = (xs[1] - xs[0]) / span;
            let chord = (1.0 - w) * gs[0] + w * gs[2];
            if gs[1] < chord - tol * (1.0 + chord.abs()) {
                concave = false;
                break;
            }
        }
        report.push(CheckResult::new(
            "concave",
            concave,
            "g concave on sampled triples",
        ));

        let lip = self.lipschitz_constant();
        let lipschitz_ok = sample_grid.windows(2).zip(g.windows(2)).all(|(xs, gs)| {
            let dx = xs[1] - xs[0];
            dx <= 0.0 || (gs[1] - gs[0]).abs() <= lip * dx + tol * (1.0 + lip)
        });
        report.push(CheckResult::new(
            "lipschitz",
            lipschitz_ok,
            format!("difference quotients bounded by K = {lip}"),
        ));

        let positive = sample_grid
            .iter()
            .zip(&g)
            .all(|(&x, &gx)| x <= 0.0 || gx > 0.0);
        report.push(CheckResult::new(
            "positive",
            positive,
            "g(x) > 0 for sampled x > 0",
        ));
        report
    }
}
