//! Wealth grids for the truncated solve domain.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GridError {
    #[error("bad grid: {0}")]
    BadGrid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GridSpacing {
    Uniform,
    LogUniform,
}

/// Strictly increasing wealth nodes `x_0 < x_1 < ... < x_M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WealthGrid {
    nodes: Vec<f64>,
    spacing: GridSpacing,
}

/// Build a grid with `m` nodes from `x_min` to `x_max`. `LogUniform`
/// requires `x_min > 0` and places nodes geometrically with ratio
/// `(x_max/x_min)^{1/(m-1)}`.
pub fn build_grid(
    x_min: f64,
    x_max: f64,
    m: usize,
    spacing: GridSpacing,
) -> Result<WealthGrid, GridError> {
    if !(x_min >= 0.0 && x_min < x_max) || !x_max.is_finite() {
        return Err(GridError::BadGrid(format!(
            "require 0 <= x_min < x_max, got [{x_min}, {x_max}]"
        )));
    }
    if m < 2 {
        return Err(GridError::BadGrid(format!("need at least 2 nodes, got {m}")));
    }
    let nodes = match spacing {
        GridSpacing::Uniform => {
            let h = (x_max - x_min) / (m - 1) as f64;
            let mut nodes: Vec<f64> = (0..m).map(|i| x_min + h * i as f64).collect();
            nodes[m - 1] = x_max;
            nodes
        }
        GridSpacing::LogUniform => {
            if x_min <= 0.0 {
                return Err(GridError::BadGrid(
                    "log-uniform spacing requires x_min > 0".into(),
                ));
            }
            let step = (x_max / x_min).ln() / (m - 1) as f64;
            let mut nodes: Vec<f64> = (0..m)
                .map(|i| x_min * (step * i as f64).exp())
                .collect();
            nodes[m - 1] = x_max;
            nodes
        }
    };
    debug_assert!(nodes.windows(2).all(|w| w[0] < w[1]));
    Ok(WealthGrid { nodes, spacing })
}

impl WealthGrid {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn x_min(&self) -> f64 {
        self.nodes[0]
    }

    pub fn x_max(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn spacing(&self) -> GridSpacing {
        self.spacing
    }

    /// The grid scaled node-by-node by `factor > 0`. Used by homogeneity
    /// checks: on a scaled grid the discrete problem is exactly the scaled
    /// problem, so the scaling identity holds to solver tolerance.
    pub fn scaled(&self, factor: f64) -> Result<WealthGrid, GridError> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(GridError::BadGrid(format!(
                "scale factor must be positive and finite, got {factor}"
            )));
        }
        Ok(WealthGrid {
            nodes: self.nodes.iter().map(|x| x * factor).collect(),
            spacing: self.spacing,
        })
    }

    /// Linear interpolation of per-node `values` at `x`, clamped to the
    /// grid range. Panics if `values.len() != self.len()`.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        assert_eq!(values.len(), self.nodes.len());
        let n = self.nodes.len();
        if x <= self.nodes[0] {
            return values[0];
        }
        if x >= self.nodes[n - 1] {
            return values[n - 1];
        }
        let i = match self
            .nodes
            .binary_search_by(|node| node.partial_cmp(&x).unwrap())
        {
            Ok(i) => return values[i],
            Err(i) => i,
        };
        let (x0, x1) = (self.nodes[i - 1], self.nodes[i]);
        let w = (x - x0) / (x1 - x0);
        values[i - 1] * (1.0 - w) + values[i] * w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_grid_nodes() {
        let g = build_grid(0.0, 10.0, 11, GridSpacing::Uniform).unwrap();
        let expected: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        for (a, b) in g.nodes().iter().zip(&expected) {
            assert_relative_eq!(a, b, max_relative = 1e-15);
        }
    }

    #[test]
    fn log_uniform_ratio() {
        let g = build_grid(0.1, 10.0, 21, GridSpacing::LogUniform).unwrap();
        let ratio = 100.0f64.powf(1.0 / 20.0);
        for w in g.nodes().windows(2) {
            assert_relative_eq!(w[1] / w[0], ratio, max_relative = 1e-10);
        }
        assert_relative_eq!(g.x_min(), 0.1);
        assert_relative_eq!(g.x_max(), 10.0);
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(build_grid(1.0, 1.0, 10, GridSpacing::Uniform).is_err());
        assert!(build_grid(2.0, 1.0, 10, GridSpacing::Uniform).is_err());
        assert!(build_grid(0.0, 1.0, 1, GridSpacing::Uniform).is_err());
        assert!(build_grid(0.0, 1.0, 10, GridSpacing::LogUniform).is_err());
    }

    #[test]
    fn interpolation_is_exact_on_linear_data() {
        let g = build_grid(0.5, 8.0, 40, GridSpacing::LogUniform).unwrap();
        let values: Vec<f64> = g.nodes().iter().map(|x| 3.0 * x - 1.0).collect();
        for x in [0.5, 0.77, 1.9, 5.3, 8.0] {
            assert_relative_eq!(g.interpolate(&values, x), 3.0 * x - 1.0, max_relative = 1e-12);
        }
        // clamped outside
        assert_relative_eq!(g.interpolate(&values, 0.1), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn scaled_grid_is_nodewise_product() {
        let g = build_grid(1e-3, 50.0, 100, GridSpacing::LogUniform).unwrap();
        let s = g.scaled(2.0).unwrap();
        for (a, b) in g.nodes().iter().zip(s.nodes()) {
            assert_eq!(*b, *a * 2.0);
        }
    }
}
