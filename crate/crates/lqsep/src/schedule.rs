//! Time-varying matrix coefficients.
//!
//! A [`MatrixSchedule`] is a map `t -> matrix` that the integrators can
//! evaluate anywhere on the horizon (one-step methods sample half-nodes,
//! not just grid nodes). Three rule kinds cover everything the scenario
//! format admits: constants, matrix polynomials in `t`, and sampled
//! tables with linear interpolation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScheduleRule {
    Constant(DMatrix<f64>),
    /// Coefficients c_0, c_1, ... of c_0 + c_1 t + c_2 t^2 + ...
    Polynomial(Vec<DMatrix<f64>>),
    /// Knots (t_i, value_i) with t_i strictly increasing; evaluation
    /// interpolates linearly and clamps outside the knot range.
    Table(Vec<(f64, DMatrix<f64>)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSchedule {
    nrows: usize,
    ncols: usize,
    rule: ScheduleRule,
}

impl MatrixSchedule {
    pub fn constant(value: DMatrix<f64>) -> Self {
        Self {
            nrows: value.nrows(),
            ncols: value.ncols(),
            rule: ScheduleRule::Constant(value),
        }
    }

    /// Convenience for 1x1 schedules.
    pub fn scalar(value: f64) -> Self {
        Self::constant(DMatrix::from_element(1, 1, value))
    }

    pub fn polynomial(coeffs: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = coeffs.first().ok_or(Error::InvalidArgument {
            arg: "coeffs",
            reason: "polynomial needs at least one coefficient".into(),
        })?;
        let (nrows, ncols) = first.shape();
        for (i, c) in coeffs.iter().enumerate() {
            if c.shape() != (nrows, ncols) {
                return Err(Error::DimensionMismatch {
                    context: "polynomial schedule coefficients",
                    expected: format!("{nrows}x{ncols}"),
                    actual: format!("{}x{} at degree {i}", c.nrows(), c.ncols()),
                });
            }
        }
        Ok(Self {
            nrows,
            ncols,
            rule: ScheduleRule::Polynomial(coeffs),
        })
    }

    pub fn table(knots: Vec<(f64, DMatrix<f64>)>) -> Result<Self> {
        let first = knots.first().ok_or(Error::InvalidArgument {
            arg: "knots",
            reason: "table needs at least one knot".into(),
        })?;
        let (nrows, ncols) = first.1.shape();
        for w in knots.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidArgument {
                    arg: "knots",
                    reason: format!("knot times must strictly increase ({} then {})", w[0].0, w[1].0),
                });
            }
        }
        for (t, m) in &knots {
            if !t.is_finite() {
                return Err(Error::InvalidArgument {
                    arg: "knots",
                    reason: "non-finite knot time".into(),
                });
            }
            if m.shape() != (nrows, ncols) {
                return Err(Error::DimensionMismatch {
                    context: "table schedule knots",
                    expected: format!("{nrows}x{ncols}"),
                    actual: format!("{}x{} at t={t}", m.nrows(), m.ncols()),
                });
            }
        }
        Ok(Self {
            nrows,
            ncols,
            rule: ScheduleRule::Table(knots),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nrows, self.ncols)
    }

    pub fn rule(&self) -> &ScheduleRule {
        &self.rule
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        match &self.rule {
            ScheduleRule::Constant(m) => m.clone(),
            ScheduleRule::Polynomial(coeffs) => {
                // Horner in t.
                let mut acc = coeffs[coeffs.len() - 1].clone();
                for c in coeffs.iter().rev().skip(1) {
                    acc *= t;
                    acc += c;
                }
                acc
            }
            ScheduleRule::Table(knots) => {
                if t <= knots[0].0 {
                    return knots[0].1.clone();
                }
                let last = knots.len() - 1;
                if t >= knots[last].0 {
                    return knots[last].1.clone();
                }
                let i = knots.partition_point(|(ti, _)| *ti <= t) - 1;
                let (t0, ref m0) = knots[i];
                let (t1, ref m1) = knots[i + 1];
                let w = (t - t0) / (t1 - t0);
                m0 * (1.0 - w) + m1 * w
            }
        }
    }

    /// True when the schedule does not actually depend on `t`.
    pub fn is_constant(&self) -> bool {
        match &self.rule {
            ScheduleRule::Constant(_) => true,
            ScheduleRule::Polynomial(c) => c.len() == 1,
            ScheduleRule::Table(k) => k.len() == 1,
        }
    }

    /// Check finiteness at every node of `grid` (and at half-nodes, which
    /// one-step integrators sample).
    pub fn validate_on(&self, grid: &TimeGrid, name: &'static str) -> Result<()> {
        let dt = grid.dt();
        for k in 0..=grid.steps() {
            let t = grid.node(k);
            for &t in &[t, (t + 0.5 * dt).min(grid.horizon())] {
                let m = self.eval(t);
                if m.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NumericalBlowup {
                        node: k,
                        time: t,
                        what: format!("schedule {name} is non-finite"),
                    });
                }
            }
        }
        Ok(())
    }
}
