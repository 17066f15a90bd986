//! Fixed-step fourth-order Runge-Kutta over matrix-valued states.
//!
//! The right-hand side is sampled at step midpoints, so time-varying
//! coefficients must be evaluable between grid nodes; schedule validation
//! checks half-nodes for exactly this reason.

use nalgebra::DMatrix;

pub(crate) fn rk4_step<F>(f: &mut F, t: f64, y: &DMatrix<f64>, h: f64) -> DMatrix<f64>
where
    F: FnMut(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}
