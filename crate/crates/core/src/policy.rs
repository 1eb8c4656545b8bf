//! Feedback policies decoupled from optimality: a consumption and
//! portfolio rule on a wealth grid, evaluated anywhere by interpolation.

use serde::{Deserialize, Serialize};

use crate::model::{LeverageSpec, ModelError, ModelParams};
use crate::solver::SolutionField;

/// A feedback policy `(c(x), pi(x))` sampled on a grid. Between nodes the
/// policy interpolates linearly; outside the grid it extends by the
/// boundary rates `c(x) = (c(x_end)/x_end) x` (same for `pi`), matching
/// the asymptotic proportionality of the optimal controls. At `x = 0`
/// only the null strategy is admissible and both controls vanish.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyField {
    nodes: Vec<f64>,
    consumption: Vec<f64>,
    portfolio: Vec<f64>,
}

impl PolicyField {
    pub fn new(nodes: Vec<f64>, consumption: Vec<f64>, portfolio: Vec<f64>) -> Self {
        assert!(nodes.len() >= 2 && nodes.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(nodes.len(), consumption.len());
        assert_eq!(nodes.len(), portfolio.len());
        Self {
            nodes,
            consumption,
            portfolio,
        }
    }

    /// The solver's optimal feedback controls.
    pub fn from_solution(field: &SolutionField) -> Self {
        Self::new(
            field.grid.nodes().to_vec(),
            field.c_star.clone(),
            field.pi_star.clone(),
        )
    }

    /// Proportional controls `c = c_rate x`, `pi = pi_rate x`.
    pub fn proportional(pi_rate: f64, c_rate: f64) -> Self {
        let nodes = vec![1e-6, 1.0, 1e6];
        Self::new(
            nodes.clone(),
            nodes.iter().map(|x| c_rate * x).collect(),
            nodes.iter().map(|x| pi_rate * x).collect(),
        )
    }

    /// The bond-only strategy `(pi, c) = (0, r x)`.
    pub fn bond_only(params: &ModelParams) -> Self {
        Self::proportional(0.0, params.market.r)
    }

    /// Zero consumption, zero risky position.
    pub fn zero() -> Self {
        Self::proportional(0.0, 0.0)
    }

    fn eval(&self, values: &[f64], x: f64) -> f64 {
        let n = self.nodes.len();
        if x <= 0.0 {
            return 0.0;
        }
        if x < self.nodes[0] {
            return values[0] / self.nodes[0] * x;
        }
        if x > self.nodes[n - 1] {
            return values[n - 1] / self.nodes[n - 1] * x;
        }
        let i = match self
            .nodes
            .binary_search_by(|node| node.partial_cmp(&x).unwrap())
        {
            Ok(i) => return values[i],
            Err(i) => i,
        };
        let w = (x - self.nodes[i - 1]) / (self.nodes[i] - self.nodes[i - 1]);
        values[i - 1] * (1.0 - w) + values[i] * w
    }

    pub fn consumption(&self, x: f64) -> f64 {
        self.eval(&self.consumption, x).max(0.0)
    }

    pub fn portfolio(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        self.eval(&self.portfolio, x)
    }

    /// A copy with consumption scaled by `factor` everywhere.
    pub fn with_scaled_consumption(&self, factor: f64) -> Self {
        let mut p = self.clone();
        for c in p.consumption.iter_mut() {
            *c *= factor;
        }
        p
    }

    /// A copy with the risky position scaled by `factor` everywhere.
    pub fn with_scaled_portfolio(&self, factor: f64) -> Self {
        let mut p = self.clone();
        for pi in p.portfolio.iter_mut() {
            *pi *= factor;
        }
        p
    }

    /// Largest sampled consumption over wealth up to `x_cap` (including
    /// the extension value at the cap itself).
    pub fn max_consumption_below(&self, x_cap: f64) -> f64 {
        let mut c_max = self.consumption(x_cap.max(0.0));
        for (&x, &c) in self.nodes.iter().zip(&self.consumption) {
            if x <= x_cap {
                c_max = c_max.max(c);
            }
        }
        c_max
    }

    /// Admissibility on the sampled nodes: `c >= 0` and `|pi| <= g + tol`.
    pub fn check_admissible(
        &self,
        leverage: &LeverageSpec,
        tol: f64,
    ) -> Result<(), ModelError> {
        for (i, &x) in self.nodes.iter().enumerate() {
            if self.consumption[i] < 0.0 {
                return Err(ModelError::InvalidLeverage(format!(
                    "negative consumption {} at x = {x}",
                    self.consumption[i]
                )));
            }
            let g = leverage.eval(x)?;
            if self.portfolio[i].abs() > g + tol * (1.0 + g.abs()) {
                return Err(ModelError::InvalidLeverage(format!(
                    "portfolio {} exceeds bound {g} at x = {x}",
                    self.portfolio[i]
                )));
            }
        }
        Ok(())
    }
}
