//! Uniform time grid on a finite horizon.
//!
//! Every path, schedule, and kernel in this crate lives on one of these
//! grids. Nodes are `t_k = T * k / N` so that `node(N)` is exactly `T`,
//! and indices rather than times are passed around internally.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    /// `horizon` must be positive and finite, `steps >= 1`.
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument {
                arg: "horizon",
                reason: format!("must be positive and finite, got {horizon}"),
            });
        }
        if steps == 0 {
            return Err(Error::InvalidArgument {
                arg: "steps",
                reason: "must be at least 1".into(),
            });
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps N; the grid has N + 1 nodes.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes, N + 1.
    pub fn num_nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node time t_k. `node(N)` returns the horizon exactly.
    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        self.horizon * (k as f64 / self.steps as f64)
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| self.node(k))
    }

    /// Grid with the same horizon and `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.horizon, self.steps * factor.max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.node(3), 1.0);

        let g = TimeGrid::new(2.7, 7).unwrap();
        assert_eq!(g.node(7), 2.7);
    }

    #[test]
    fn nodes_strictly_increase() {
        let g = TimeGrid::new(3.0, 1000).unwrap();
        let nodes: Vec<f64> = g.nodes().collect();
        assert_eq!(nodes.len(), 1001);
        for w in nodes.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(-1.0, 10).is_err());
        assert!(TimeGrid::new(f64::NAN, 10).is_err());
        assert!(TimeGrid::new(f64::INFINITY, 10).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn dt_times_steps_spans_horizon() {
        let g = TimeGrid::new(1.0, 10_000).unwrap();
        assert!((g.dt() * g.steps() as f64 - g.horizon()).abs() < 1e-12);
    }
}
