//! State-space propagation: transition matrices by Runge-Kutta quadrature
//! and sample-path evolution by left-point Euler stepping.
//!
//! The stepping helpers pin an exact floating-point operation order. Both
//! the plant and the state estimator step through the same code, so
//! recursions that agree algebraically (for example the estimator run on
//! a noiseless plant with a point-mass initial law) agree bitwise.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::integrate::rk4_step;
use crate::model::SystemModel;
use crate::noise::NoisePath;
use crate::path::SamplePath;
use crate::schedule::MatrixSchedule;

/// Coefficient schedules evaluated once at every left node; simulation
/// loops index these instead of re-evaluating schedules per path.
pub(crate) struct GridCoeffs {
    pub a: Vec<DMatrix<f64>>,
    pub b1: Vec<DMatrix<f64>>,
    pub b2: Vec<DMatrix<f64>>,
    pub c: Vec<DMatrix<f64>>,
    pub d: Vec<DMatrix<f64>>,
}

impl GridCoeffs {
    pub fn new(model: &SystemModel, grid: &TimeGrid) -> GridCoeffs {
        let eval = |s: &MatrixSchedule| -> Vec<DMatrix<f64>> {
            (0..grid.steps()).map(|k| s.eval(grid.node(k))).collect()
        };
        GridCoeffs {
            a: eval(&model.a),
            b1: eval(&model.b1),
            b2: eval(&model.b2),
            c: eval(&model.c),
            d: eval(&model.d),
        }
    }
}

/// next = cur + (a cur + b u) dt + gain incr, in exactly this order:
/// scratch = a cur; scratch += b u; next = cur + dt scratch; next += gain incr.
pub(crate) fn drift_gain_step(
    next: &mut DVector<f64>,
    cur: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    u: &DVectorView<'_, f64>,
    dt: f64,
    gain: &DMatrix<f64>,
    incr: &DVectorView<'_, f64>,
    scratch: &mut DVector<f64>,
) {
    scratch.gemv(1.0, a, cur, 0.0);
    scratch.gemv(1.0, b, u, 1.0);
    next.copy_from(cur);
    next.axpy(dt, scratch, 1.0);
    next.gemv(1.0, gain, incr, 1.0);
}

/// next = cur + (c x) dt + d incr, same ordering discipline as
/// [`drift_gain_step`].
pub(crate) fn obs_step(
    next: &mut DVector<f64>,
    cur: &DVector<f64>,
    c: &DMatrix<f64>,
    x: &DVector<f64>,
    dt: f64,
    d: &DMatrix<f64>,
    incr: &DVectorView<'_, f64>,
    scratch: &mut DVector<f64>,
) {
    scratch.gemv(1.0, c, x, 0.0);
    next.copy_from(cur);
    next.axpy(dt, scratch, 1.0);
    next.gemv(1.0, d, incr, 1.0);
}

/// Flow matrix of dx = A(t) x dt from node `from` to node `to` (one RK4
/// step per grid step). `from == to` gives the identity.
pub fn transition_matrix(
    model: &SystemModel,
    grid: &TimeGrid,
    from: usize,
    to: usize,
) -> Result<DMatrix<f64>> {
    model.shapes_ok()?;
    if to > grid.steps() || from > to {
        return Err(Error::InvalidArgument {
            arg: "from/to",
            reason: format!(
                "need from <= to <= {}, got from {from}, to {to}",
                grid.steps()
            ),
        });
    }
    let n = model.state_dim;
    let mut phi = DMatrix::identity(n, n);
    let mut f = |t: f64, y: &DMatrix<f64>| model.a.eval(t) * y;
    for k in from..to {
        phi = rk4_step(&mut f, grid.node(k), &phi, grid.dt());
        if !phi.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalBlowup {
                node: k + 1,
                time: grid.node(k + 1),
                what: "transition matrix".into(),
            });
        }
    }
    Ok(phi)
}

#[derive(Debug, Clone)]
pub struct OpenLoopPaths {
    pub state: SamplePath,
    pub observation: SamplePath,
}

/// Left-point Euler propagation of state and observation under a given
/// control path. Control is read at left nodes; its final-node value is
/// never used. The observation starts at zero.
pub fn simulate_open_loop(
    model: &SystemModel,
    grid: &TimeGrid,
    noise: &NoisePath,
    control: &SamplePath,
) -> Result<OpenLoopPaths> {
    model.validate(grid)?;
    check_sim_inputs(model, grid, noise, Some(control))?;
    let coeffs = GridCoeffs::new(model, grid);
    let x0 = draw_initial_state(model, noise);
    propagate(&coeffs, grid, noise, &x0, |k| control.node_vector(k))
}

pub(crate) fn check_sim_inputs(
    model: &SystemModel,
    grid: &TimeGrid,
    noise: &NoisePath,
    control: Option<&SamplePath>,
) -> Result<()> {
    if noise.grid() != grid {
        return Err(Error::InvalidArgument {
            arg: "noise",
            reason: "noise path and simulation use different grids".into(),
        });
    }
    if noise.dim() != model.noise_dim {
        return Err(Error::DimensionMismatch {
            context: "noise path",
            expected: format!("{} components", model.noise_dim),
            actual: format!("{} components", noise.dim()),
        });
    }
    if let Some(u) = control {
        if u.grid() != grid {
            return Err(Error::InvalidArgument {
                arg: "control",
                reason: "control path and simulation use different grids".into(),
            });
        }
        if u.dim() != model.control_dim {
            return Err(Error::DimensionMismatch {
                context: "control path",
                expected: format!("{} components", model.control_dim),
                actual: format!("{} components", u.dim()),
            });
        }
    }
    Ok(())
}

pub(crate) fn draw_initial_state(model: &SystemModel, noise: &NoisePath) -> DVector<f64> {
    let mut rng = noise.companion_rng(0);
    model.initial.sample(&mut rng)
}

/// Core stepping loop shared by open- and closed-loop drivers; `control`
/// yields the left-node input for each step.
pub(crate) fn propagate<'a>(
    coeffs: &GridCoeffs,
    grid: &TimeGrid,
    noise: &NoisePath,
    x0: &DVector<f64>,
    mut control: impl FnMut(usize) -> DVectorView<'a, f64>,
) -> Result<OpenLoopPaths> {
    let n_state = x0.len();
    let n_obs = coeffs.c[0].nrows();
    let dt = grid.dt();
    let mut state = SamplePath::zeros(*grid, n_state);
    let mut observation = SamplePath::zeros(*grid, n_obs);
    state.node_mut(0).copy_from_slice(x0.as_slice());

    let mut x = x0.clone();
    let mut x_next = DVector::zeros(n_state);
    let mut y = DVector::zeros(n_obs);
    let mut y_next = DVector::zeros(n_obs);
    let mut scratch_n = DVector::zeros(n_state);
    let mut scratch_p = DVector::zeros(n_obs);

    for k in 0..grid.steps() {
        let u = control(k);
        let dw = DVectorView::from_slice(noise.increment(k), noise.dim());
        drift_gain_step(
            &mut x_next,
            &x,
            &coeffs.a[k],
            &coeffs.b1[k],
            &u,
            dt,
            &coeffs.b2[k],
            &dw,
            &mut scratch_n,
        );
        obs_step(
            &mut y_next,
            &y,
            &coeffs.c[k],
            &x,
            dt,
            &coeffs.d[k],
            &dw,
            &mut scratch_p,
        );
        if !(x_next.iter().all(|v| v.is_finite()) && y_next.iter().all(|v| v.is_finite())) {
            return Err(Error::NumericalBlowup {
                node: k + 1,
                time: grid.node(k + 1),
                what: "state propagation".into(),
            });
        }
        state.node_mut(k + 1).copy_from_slice(x_next.as_slice());
        observation.node_mut(k + 1).copy_from_slice(y_next.as_slice());
        std::mem::swap(&mut x, &mut x_next);
        std::mem::swap(&mut y, &mut y_next);
    }
    Ok(OpenLoopPaths {
        state,
        observation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::scalar_model;
    use crate::noise::{sample_noise, NoiseSpec};

    /// Dense matrix exponential by scaling and squaring with a Taylor
    /// tail; reference oracle, accuracy near machine precision for the
    /// norms used here.
    fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        let norm = a.amax();
        let s = if norm > 0.5 {
            (norm / 0.5).log2().ceil() as u32
        } else {
            0
        };
        let b = a / 2f64.powi(s as i32);
        let n = a.nrows();
        let mut term = DMatrix::identity(n, n);
        let mut sum = DMatrix::identity(n, n);
        for k in 1..=24 {
            term = &term * &b / k as f64;
            sum += &term;
        }
        let mut result = sum;
        for _ in 0..s {
            result = &result * &result;
        }
        result
    }

    fn model_with_a(a: MatrixSchedule) -> SystemModel {
        let n = a.shape().0;
        let mut m = scalar_model();
        m.state_dim = n;
        m.a = a;
        m.b1 = MatrixSchedule::constant(DMatrix::zeros(n, 1));
        m.b2 = MatrixSchedule::constant(DMatrix::zeros(n, 2));
        m.c = MatrixSchedule::constant(DMatrix::zeros(1, n));
        m.initial = crate::model::InitialState::Deterministic(DVector::zeros(n));
        m
    }

    #[test]
    fn transition_matrix_matches_matrix_exponential() {
        let a = DMatrix::from_row_slice(2, 2, &[0.3, 1.0, -1.0, -0.2]);
        let model = model_with_a(MatrixSchedule::constant(a.clone()));
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let phi = transition_matrix(&model, &grid, 0, grid.steps()).unwrap();
        let exact = expm(&a);
        let err = (&phi - &exact).amax();
        assert!(err < 1e-9, "RK4 flow vs exponential: {err}");
    }

    #[test]
    fn transition_matrix_satisfies_composition() {
        // Time-varying drift: A(t) = A0 + A1 t.
        let a0 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let a1 = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, -0.1]);
        let model = model_with_a(MatrixSchedule::polynomial(vec![a0, a1]).unwrap());
        let grid = TimeGrid::new(2.0, 200).unwrap();
        let full = transition_matrix(&model, &grid, 0, 200).unwrap();
        let late = transition_matrix(&model, &grid, 120, 200).unwrap();
        let early = transition_matrix(&model, &grid, 0, 120).unwrap();
        let err = (&full - late * early).amax();
        assert!(err < 1e-8, "composition defect {err}");
        let id = transition_matrix(&model, &grid, 77, 77).unwrap();
        assert_eq!(id, DMatrix::identity(2, 2));
    }

    #[test]
    fn transition_matrix_rejects_reversed_interval() {
        let model = scalar_model();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        assert!(transition_matrix(&model, &grid, 5, 3).is_err());
        assert!(transition_matrix(&model, &grid, 0, 11).is_err());
    }

    #[test]
    fn noiseless_decay_tracks_exponential() {
        let mut m = scalar_model();
        m.a = MatrixSchedule::scalar(-1.0);
        let grid = TimeGrid::new(1.0, 4000).unwrap();
        let noise = NoisePath::zeros(grid, 2, 0);
        let u = SamplePath::zeros(grid, 1);
        let out = simulate_open_loop(&m, &grid, &noise, &u).unwrap();
        let x_end = out.state.node(grid.steps())[0];
        assert!(
            (x_end - (-1.0_f64).exp()).abs() < 5e-4,
            "Euler endpoint {x_end}"
        );
        // Observation integrates x: y(T) = 1 - e^{-1} for C = 1.
        let y_end = out.observation.node(grid.steps())[0];
        assert!((y_end - (1.0 - (-1.0_f64).exp())).abs() < 5e-4);
    }

    #[test]
    fn response_is_affine_in_control() {
        let m = scalar_model();
        let grid = TimeGrid::new(1.0, 300).unwrap();
        let noise = sample_noise(&NoiseSpec::Wiener { dim: 2 }, &grid, 17);
        let u1 = SamplePath::from_fn(grid, 1, |_, t| DVector::from_element(1, (3.0 * t).sin()));
        let u2 = SamplePath::from_fn(grid, 1, |_, t| DVector::from_element(1, t * t - 0.5));
        let u12 = SamplePath::from_fn(grid, 1, |_, t| {
            DVector::from_element(1, (3.0 * t).sin() + (t * t - 0.5))
        });
        let zero = SamplePath::zeros(grid, 1);
        let x = |u: &SamplePath| simulate_open_loop(&m, &grid, &noise, u).unwrap().state;
        let (xa, xb, xab, x0) = (x(&u1), x(&u2), x(&u12), x(&zero));
        for k in 0..=grid.steps() {
            let lhs = xab.node(k)[0] + x0.node(k)[0];
            let rhs = xa.node(k)[0] + xb.node(k)[0];
            assert!((lhs - rhs).abs() < 1e-12, "node {k}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn doubling_control_doubles_response_bitwise_without_noise() {
        let mut m = scalar_model();
        m.initial = crate::model::InitialState::Deterministic(DVector::zeros(1));
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let noise = NoisePath::zeros(grid, 2, 0);
        let u = SamplePath::from_fn(grid, 1, |_, t| DVector::from_element(1, (5.0 * t).cos()));
        let u2 = SamplePath::from_fn(grid, 1, |_, t| {
            DVector::from_element(1, 2.0 * (5.0 * t).cos())
        });
        let once = simulate_open_loop(&m, &grid, &noise, &u).unwrap();
        let twice = simulate_open_loop(&m, &grid, &noise, &u2).unwrap();
        for k in 0..=grid.steps() {
            assert_eq!(2.0 * once.state.node(k)[0], twice.state.node(k)[0]);
            assert_eq!(2.0 * once.observation.node(k)[0], twice.observation.node(k)[0]);
        }
    }

    #[test]
    fn unstable_dynamics_report_blowup_node() {
        let mut m = scalar_model();
        m.a = MatrixSchedule::scalar(1e200);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let noise = NoisePath::zeros(grid, 2, 0);
        let u = SamplePath::zeros(grid, 1);
        match simulate_open_loop(&m, &grid, &noise, &u) {
            Err(Error::NumericalBlowup { node, .. }) => assert!(node >= 1),
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    #[test]
    fn gaussian_initial_state_is_seed_deterministic() {
        let mut m = scalar_model();
        m.initial = crate::model::InitialState::Gaussian {
            p0: DMatrix::from_element(1, 1, 4.0),
        };
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let u = SamplePath::zeros(grid, 1);
        let n1 = sample_noise(&NoiseSpec::Wiener { dim: 2 }, &grid, 5);
        let a = simulate_open_loop(&m, &grid, &n1, &u).unwrap();
        let b = simulate_open_loop(&m, &grid, &n1, &u).unwrap();
        assert_eq!(a.state.values(), b.state.values());
        // Different seed, different start.
        let n2 = sample_noise(&NoiseSpec::Wiener { dim: 2 }, &grid, 6);
        let c = simulate_open_loop(&m, &grid, &n2, &u).unwrap();
        assert_ne!(a.state.node(0), c.state.node(0));
    }
}
