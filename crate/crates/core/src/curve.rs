//! Time series on a grid, used for both deterministic limits and scaled
//! Monte Carlo observables.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitCurve {
    pub grid: Vec<f64>,
    /// One vector per grid point.
    pub values: Vec<Vec<f64>>,
}

impl LimitCurve {
    pub fn new(grid: Vec<f64>, values: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(grid.len(), values.len());
        Self { grid, values }
    }

    /// Builds a one-dimensional curve.
    pub fn scalar(grid: Vec<f64>, values: Vec<f64>) -> Self {
        let values = values.into_iter().map(|v| vec![v]).collect();
        Self { grid, values }
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn component(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[j]).collect()
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.values.last().map(Vec::as_slice)
    }

    /// Linear interpolation of component `j`; `None` outside the grid.
    pub fn interpolate(&self, t: f64, j: usize) -> Option<f64> {
        let (first, last) = (*self.grid.first()?, *self.grid.last()?);
        if t < first || t > last {
            return None;
        }
        let k = self.grid.partition_point(|&g| g <= t);
        if k == 0 {
            return Some(self.values[0][j]);
        }
        if k == self.grid.len() {
            return Some(self.values[k - 1][j]);
        }
        let (t0, t1) = (self.grid[k - 1], self.grid[k]);
        let w = (t - t0) / (t1 - t0);
        Some(self.values[k - 1][j] * (1.0 - w) + self.values[k][j] * w)
    }

    /// Same grid within `tol`.
    pub fn same_grid(&self, other: &LimitCurve, tol: f64) -> bool {
        self.grid.len() == other.grid.len()
            && self
                .grid
                .iter()
                .zip(&other.grid)
                .all(|(a, b)| (a - b).abs() <= tol * (1.0 + a.abs()))
    }
}

/// `n` equally spaced points from 0 to `horizon` inclusive.
pub fn uniform_grid(horizon: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|i| {
                if i + 1 == n {
                    horizon
                } else {
                    horizon * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}
