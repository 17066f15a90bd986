//! State estimation on realized data: the finite-dimensional estimator
//! recursion driven by a recorded observation and control path.
//!
//! The estimate recursion steps through the same pinned-order helper as
//! the plant itself, so in degenerate cases where estimate and state
//! agree algebraically (no state noise, point-mass initial law) they
//! agree bitwise as well.

use nalgebra::{DVector, DVectorView};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::SystemModel;
use crate::path::SamplePath;
use crate::sim::{drift_gain_step, GridCoeffs};
use crate::synthesis::EstimatorSolution;

/// Result of one filtering pass.
#[derive(Debug, Clone)]
pub struct FilterRun {
    /// Conditional-mean state estimate at every node.
    pub estimate: SamplePath,
    /// Per-step innovation increments dv_k = dy_k - C x_est dt,
    /// step-major.
    innovation: Vec<f64>,
    obs_dim: usize,
}

impl FilterRun {
    pub fn innovation_increment(&self, step: usize) -> &[f64] {
        &self.innovation[step * self.obs_dim..(step + 1) * self.obs_dim]
    }

    /// Cumulative innovation as a path starting at zero.
    pub fn innovation_path(&self) -> SamplePath {
        let grid = *self.estimate.grid();
        let mut p = SamplePath::zeros(grid, self.obs_dim);
        let mut acc = vec![0.0; self.obs_dim];
        for k in 0..grid.steps() {
            for (a, &inc) in acc.iter_mut().zip(self.innovation_increment(k)) {
                *a += inc;
            }
            p.node_mut(k + 1).copy_from_slice(&acc);
        }
        p
    }
}

/// Runs the estimator recursion
/// `x+ = x + (A x + B1 u) dt + L (dy - C x dt)` with the tabulated gains,
/// starting from the mean of the initial law.
pub fn run_kalman_filter(
    model: &SystemModel,
    grid: &TimeGrid,
    gains: &EstimatorSolution,
    observation: &SamplePath,
    control: &SamplePath,
) -> Result<FilterRun> {
    model.shapes_ok()?;
    if gains.grid != *grid {
        return Err(Error::InvalidArgument {
            arg: "gains",
            reason: "estimator gains were synthesized on a different grid".into(),
        });
    }
    if observation.grid() != grid || control.grid() != grid {
        return Err(Error::InvalidArgument {
            arg: "observation/control",
            reason: "paths and filter use different grids".into(),
        });
    }
    if observation.dim() != model.obs_dim || control.dim() != model.control_dim {
        return Err(Error::DimensionMismatch {
            context: "filter inputs",
            expected: format!("y: {}, u: {}", model.obs_dim, model.control_dim),
            actual: format!("y: {}, u: {}", observation.dim(), control.dim()),
        });
    }

    let coeffs = GridCoeffs::new(model, grid);
    let dt = grid.dt();
    let n = model.state_dim;
    let p = model.obs_dim;
    let mut estimate = SamplePath::zeros(*grid, n);
    let mut innovation = vec![0.0; grid.steps() * p];

    let mut xh = model.initial.mean();
    estimate.node_mut(0).copy_from_slice(xh.as_slice());
    let mut xh_next = DVector::zeros(n);
    let mut scratch_n = DVector::zeros(n);
    let mut pred = DVector::zeros(p);
    let mut innov = DVector::zeros(p);

    for k in 0..grid.steps() {
        // Innovation increment: dy_k - C x dt.
        pred.gemv(1.0, &coeffs.c[k], &xh, 0.0);
        for i in 0..p {
            innov[i] = observation.node(k + 1)[i] - observation.node(k)[i] - pred[i] * dt;
        }
        for i in 0..p {
            innovation[k * p + i] = innov[i];
        }
        drift_gain_step(
            &mut xh_next,
            &xh,
            &coeffs.a[k],
            &coeffs.b1[k],
            &control.node_vector(k),
            dt,
            &gains.l[k],
            &DVectorView::from_slice(innov.as_slice(), p),
            &mut scratch_n,
        );
        if !xh_next.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalBlowup {
                node: k + 1,
                time: grid.node(k + 1),
                what: "state estimate".into(),
            });
        }
        estimate.node_mut(k + 1).copy_from_slice(xh_next.as_slice());
        std::mem::swap(&mut xh, &mut xh_next);
    }
    Ok(FilterRun {
        estimate,
        innovation,
        obs_dim: p,
    })
}
