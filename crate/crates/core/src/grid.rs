//! Time discretization of `[0, T]`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Strictly increasing grid `0 = t_0 < ... < t_K = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(LabError::Config("time grid needs at least one step".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(LabError::Config(format!("horizon must be positive, got {horizon}")));
        }
        let h = horizon / steps as f64;
        let mut nodes: Vec<f64> = (0..=steps).map(|k| k as f64 * h).collect();
        nodes[steps] = horizon;
        Ok(Self { nodes })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(LabError::Config("time grid needs at least one step".into()));
        }
        if nodes[0] != 0.0 {
            return Err(LabError::Config("time grid must start at 0".into()));
        }
        if nodes.iter().any(|t| !t.is_finite()) || nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LabError::Config("time grid nodes must be finite and strictly increasing".into()));
        }
        Ok(Self { nodes })
    }

    /// Grid in the clock `u = s / (1 - s)`, uniform in `s` and cut at `u = horizon`.
    ///
    /// Resolves early times finely and late times coarsely, which is what a time change
    /// `u(t) = t / (T - t)` of a finite interval produces.
    pub fn compactified(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) || steps == 0 {
            return Err(LabError::Config("compactified grid needs positive horizon and steps".into()));
        }
        let s_max = horizon / (1.0 + horizon);
        let mut nodes: Vec<f64> = (0..=steps)
            .map(|k| {
                let s = s_max * k as f64 / steps as f64;
                s / (1.0 - s)
            })
            .collect();
        nodes[steps] = horizon;
        Self::from_nodes(nodes)
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn t(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }

    pub fn is_uniform(&self) -> bool {
        let h = self.dt(0);
        (0..self.steps()).all(|k| (self.dt(k) - h).abs() <= 1e-12 * h.max(1.0))
    }

    /// Every `factor`-th node; `factor` must divide the step count.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps() % factor != 0 {
            return Err(LabError::Config(format!(
                "coarsening factor {factor} does not divide {} steps",
                self.steps()
            )));
        }
        Self::from_nodes(self.nodes.iter().step_by(factor).copied().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_endpoints() {
        let g = TimeGrid::uniform(2.0, 7).unwrap();
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.horizon(), 2.0);
        assert_eq!(g.steps(), 7);
        assert!(g.is_uniform());
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::uniform(1.0, 0).is_err());
        assert!(TimeGrid::uniform(-1.0, 3).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::from_nodes(vec![0.1, 0.5]).is_err());
    }

    #[test]
    fn compactified_is_increasing_and_hits_horizon() {
        let g = TimeGrid::compactified(40.0, 100).unwrap();
        assert_eq!(g.horizon(), 40.0);
        assert!(g.dt(0) < g.dt(99));
    }

    #[test]
    fn coarsen_keeps_endpoints() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let c = g.coarsen(4).unwrap();
        assert_eq!(c.steps(), 2);
        assert_eq!(c.nodes(), &[0.0, 0.5, 1.0]);
        assert!(g.coarsen(3).is_err());
    }
}
