//! Nonlinear filtering for a hidden change point.
//!
//! Scalar setup: the disturbance v jumps from 0 to +1 or -1 (equiprobable
//! signs) at a time drawn uniformly on the horizon, the plant integrates
//! the control on top of it, x = v + int u, and x is observed in white
//! noise of intensity sigma. The conditional law of v given the
//! observations is finite-dimensional: it is carried by the posterior
//! mean rho together with the reweighted no-change probability
//! phi = P(no change yet) / (2 (T - t)), which evolve as
//!
//! d rho = sigma^{-2} (1 - rho^2 - 2 (T-t) phi) (dy - xhat dt)
//! d phi = -sigma^{-2} phi rho (dy - xhat dt)
//!
//! with rho(0) = 0 and phi(0) = 1/(2T); phi has no drift term. The
//! estimate xhat = rho + int u is maintained algebraically (computed as
//! the sum, never integrated separately), so the identity
//! xhat - rho = int u holds exactly in floating point.
//!
//! [`change_point_posterior_quadrature`] computes the same posterior by
//! direct Bayes quadrature over the change time and sign in log domain
//! with O(1) work per node, and serves as the oracle for the recursion.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::path::SamplePath;

/// Online state of the change-point filter.
#[derive(Debug, Clone)]
pub struct ChangePointFilter {
    sigma_sq_inv: f64,
    horizon: f64,
    rho: f64,
    phi: f64,
    /// Running integral of the control.
    control_integral: f64,
    clamp_events: usize,
}

impl ChangePointFilter {
    pub fn new(sigma: f64, horizon: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidArgument {
                arg: "sigma",
                reason: format!("observation noise intensity must be positive, got {sigma}"),
            });
        }
        Ok(ChangePointFilter {
            sigma_sq_inv: 1.0 / (sigma * sigma),
            horizon,
            rho: 0.0,
            phi: 1.0 / (2.0 * horizon),
            control_integral: 0.0,
            clamp_events: 0,
        })
    }

    /// Posterior mean of the disturbance v(t).
    pub fn posterior_mean(&self) -> f64 {
        self.rho
    }

    /// Reweighted no-change probability; positive while the recursion is
    /// healthy.
    pub fn no_change_weight(&self) -> f64 {
        self.phi
    }

    /// Conditional mean of the state: rho plus the control integral,
    /// computed as that sum.
    pub fn estimate(&self) -> f64 {
        self.rho + self.control_integral
    }

    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    /// Advances the filter over one step: `dy` is the observation
    /// increment, `u` the control held on the step, `t` the left node.
    pub fn step(&mut self, node: usize, t: f64, dt: f64, dy: f64, u: f64) -> Result<()> {
        let innovation = dy - self.estimate() * dt;
        let gain = self.sigma_sq_inv
            * (1.0 - self.rho * self.rho - 2.0 * (self.horizon - t) * self.phi);
        let phi_next = self.phi - self.sigma_sq_inv * self.phi * self.rho * innovation;
        let mut rho_next = self.rho + gain * innovation;
        if !(rho_next.is_finite() && phi_next.is_finite()) {
            return Err(Error::NumericalBlowup {
                node: node + 1,
                time: t + dt,
                what: "change-point posterior".into(),
            });
        }
        if phi_next <= 0.0 {
            return Err(Error::NumericalBlowup {
                node: node + 1,
                time: t + dt,
                what: format!("no-change weight left the positive cone ({phi_next:.3e})"),
            });
        }
        if rho_next.abs() > 1.0 {
            rho_next = rho_next.clamp(-1.0, 1.0);
            self.clamp_events += 1;
        }
        self.rho = rho_next;
        self.phi = phi_next;
        self.control_integral += u * dt;
        Ok(())
    }
}

/// Batch filtering record.
#[derive(Debug, Clone)]
pub struct ChangePointRun {
    /// Posterior mean of v at every node.
    pub posterior_mean: SamplePath,
    /// Conditional state mean rho + int u at every node.
    pub estimate: SamplePath,
    /// Reweighted no-change probability at every node.
    pub no_change_weight: SamplePath,
    pub clamp_events: usize,
}

/// Runs the recursion over a recorded observation and control path.
pub fn run_change_point_filter(
    grid: &TimeGrid,
    sigma: f64,
    observation: &SamplePath,
    control: &SamplePath,
) -> Result<ChangePointRun> {
    if observation.dim() != 1 || control.dim() != 1 {
        return Err(Error::InvalidArgument {
            arg: "observation/control",
            reason: "the change-point filter is scalar".into(),
        });
    }
    if observation.grid() != grid || control.grid() != grid {
        return Err(Error::InvalidArgument {
            arg: "observation/control",
            reason: "paths and filter use different grids".into(),
        });
    }
    let mut filter = ChangePointFilter::new(sigma, grid.horizon())?;
    let mut posterior_mean = SamplePath::zeros(*grid, 1);
    let mut estimate = SamplePath::zeros(*grid, 1);
    let mut no_change_weight = SamplePath::zeros(*grid, 1);
    no_change_weight.node_mut(0)[0] = filter.no_change_weight();
    let dt = grid.dt();
    for k in 0..grid.steps() {
        let dy = observation.node(k + 1)[0] - observation.node(k)[0];
        filter.step(k, grid.node(k), dt, dy, control.node(k)[0])?;
        posterior_mean.node_mut(k + 1)[0] = filter.posterior_mean();
        estimate.node_mut(k + 1)[0] = filter.estimate();
        no_change_weight.node_mut(k + 1)[0] = filter.no_change_weight();
    }
    Ok(ChangePointRun {
        posterior_mean,
        estimate,
        no_change_weight,
        clamp_events: filter.clamp_events(),
    })
}

/// Posterior computed by direct Bayes quadrature.
#[derive(Debug, Clone)]
pub struct QuadraturePosterior {
    /// Posterior mean of v at every node.
    pub posterior_mean: SamplePath,
    /// log of the positive-sign evidence integral at every node.
    pub log_evidence_pos: Vec<f64>,
    /// log of the negative-sign evidence integral at every node.
    pub log_evidence_neg: Vec<f64>,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Bayes posterior of the change variable from the uncontrolled
/// observation path y0 (dy0 = v dt + sigma dw). For a sign s in {+1,-1}
/// and change time tau = s_j, the log likelihood against the no-signal
/// reference is sigma^{-2} (s (y0(t) - y0(s_j)) - (t - s_j)/2); the
/// evidence integrals over tau are accumulated with trapezoid quadrature
/// in log domain, one update per node, so the whole path costs O(N).
pub fn change_point_posterior_quadrature(
    grid: &TimeGrid,
    sigma: f64,
    y0: &SamplePath,
) -> Result<QuadraturePosterior> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidArgument {
            arg: "sigma",
            reason: format!("observation noise intensity must be positive, got {sigma}"),
        });
    }
    if y0.dim() != 1 || y0.grid() != grid {
        return Err(Error::InvalidArgument {
            arg: "y0",
            reason: "quadrature posterior expects a scalar path on the same grid".into(),
        });
    }
    let n = grid.steps();
    let dt = grid.dt();
    let horizon = grid.horizon();
    let s2i = 1.0 / (sigma * sigma);
    let mut posterior_mean = SamplePath::zeros(*grid, 1);
    let mut log_pos = Vec::with_capacity(n + 1);
    let mut log_neg = Vec::with_capacity(n + 1);
    log_pos.push(f64::NEG_INFINITY);
    log_neg.push(f64::NEG_INFINITY);

    // Running log of int_0^{t_k} exp(g(s)) ds for g_pos = (s/2 - y0)/s^2
    // and g_neg = (s/2 + y0)/s^2.
    let mut log_int_pos = f64::NEG_INFINITY;
    let mut log_int_neg = f64::NEG_INFINITY;
    let g_pos = |k: usize| (grid.node(k) / 2.0 - y0.node(k)[0]) * s2i;
    let g_neg = |k: usize| (grid.node(k) / 2.0 + y0.node(k)[0]) * s2i;

    for k in 1..=n {
        let half_log_dt = (dt / 2.0).ln();
        log_int_pos = log_add_exp(
            log_int_pos,
            half_log_dt + log_add_exp(g_pos(k - 1), g_pos(k)),
        );
        log_int_neg = log_add_exp(
            log_int_neg,
            half_log_dt + log_add_exp(g_neg(k - 1), g_neg(k)),
        );
        let t = grid.node(k);
        let y = y0.node(k)[0];
        let l_pos = (y - t / 2.0) * s2i + log_int_pos;
        let l_neg = (-y - t / 2.0) * s2i + log_int_neg;
        log_pos.push(l_pos);
        log_neg.push(l_neg);

        // rho = (S+ - S-) / (S+ + S- + 2 (T - t)), evaluated with all
        // three terms rescaled by the common log denominator.
        let l_prior = if t < horizon {
            (2.0 * (horizon - t)).ln()
        } else {
            f64::NEG_INFINITY
        };
        let l_den = log_add_exp(log_add_exp(l_pos, l_neg), l_prior);
        let rho = (l_pos - l_den).exp() - (l_neg - l_den).exp();
        posterior_mean.node_mut(k)[0] = rho;
    }
    Ok(QuadraturePosterior {
        posterior_mean,
        log_evidence_pos: log_pos,
        log_evidence_neg: log_neg,
    })
}

/// Strips the control out of a recorded observation: dy0 = dy - U dt with
/// U the left-point running integral of u, accumulated in the same order
/// the filter uses.
pub fn uncontrolled_observation(
    grid: &TimeGrid,
    observation: &SamplePath,
    control: &SamplePath,
) -> SamplePath {
    let mut y0 = SamplePath::zeros(*grid, 1);
    let dt = grid.dt();
    let mut u_int = 0.0;
    let mut acc = 0.0;
    for k in 0..grid.steps() {
        let dy = observation.node(k + 1)[0] - observation.node(k)[0];
        acc += dy - u_int * dt;
        y0.node_mut(k + 1)[0] = acc;
        u_int += control.node(k)[0] * dt;
    }
    y0
}
