//! Closed-loop simulation and the discrete loop algebra behind it.
//!
//! [`solve_closed_loop`] advances plant and observation one Euler step
//! at a time, asking the law for its input at every node through the
//! frontier-guarded [`LoopContext`](crate::law::LoopContext). Three
//! companions re-express the same loop without re-running it:
//!
//! - [`separated_law_kernel`] unrolls the estimator-plus-gain recursion
//!   of the separated law into an explicit affine functional of past
//!   observation increments (an offset plus a causal kernel), valid for
//!   the exact discrete recursion rather than any continuum limit;
//! - [`loop_increment_kernel`] writes one whole closed-loop pass as the
//!   triangular fixed-point equation dz = dz0 + Theta dz over stacked
//!   state/observation increments, whose resolvent
//!   ([`VolterraKernel::discrete_resolvent`]) reconstructs the loop from
//!   open-loop data, and whose Picard iteration
//!   ([`picard_fixed_point`]) demonstrates that the loop pins down one
//!   and only one trajectory per noise draw;
//! - [`causality_check`] verifies by bit comparison against a spliced
//!   noise record that a law never lets future randomness leak into
//!   earlier outputs.
//!
//! Per-path functions only re-check shapes; run
//! [`SystemModel::validate`] once up front when the model comes from
//! outside.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::law::{ControlLaw, LoopContext};
use crate::model::{CostSpec, SystemModel};
use crate::noise::{sample_noise, NoisePath, NoiseSpec};
use crate::path::SamplePath;
use crate::sim::{check_sim_inputs, draw_initial_state, drift_gain_step, obs_step, GridCoeffs};
use crate::synthesis::{EstimatorSolution, RegulatorSolution};
use crate::volterra::VolterraKernel;

#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub state: SamplePath,
    pub observation: SamplePath,
    /// Law output at every node; the final node's value is recorded but
    /// never enters the dynamics.
    pub control: SamplePath,
}

/// Left-point Euler loop: at each node the law sees everything up to and
/// including that node, its output is applied over the following step.
pub fn solve_closed_loop(
    model: &SystemModel,
    grid: &TimeGrid,
    noise: &NoisePath,
    law: &ControlLaw,
) -> Result<ClosedLoopRun> {
    model.shapes_ok()?;
    check_sim_inputs(model, grid, noise, None)?;
    let coeffs = GridCoeffs::new(model, grid);
    let mut engine = law.engine(model, grid)?;

    let n = model.state_dim;
    let p = model.obs_dim;
    let dt = grid.dt();
    let x0 = draw_initial_state(model, noise);

    let mut state = SamplePath::zeros(*grid, n);
    let mut observation = SamplePath::zeros(*grid, p);
    let mut control = SamplePath::zeros(*grid, model.control_dim);
    state.node_mut(0).copy_from_slice(x0.as_slice());

    let mut x = x0;
    let mut x_next = DVector::zeros(n);
    let mut y = DVector::zeros(p);
    let mut y_next = DVector::zeros(p);
    let mut u = DVector::zeros(model.control_dim);
    let mut scratch_n = DVector::zeros(n);
    let mut scratch_p = DVector::zeros(p);

    for k in 0..=grid.steps() {
        let ctx = LoopContext::new(k, &state, &observation);
        engine.control(&ctx, &mut u)?;
        control.node_mut(k).copy_from_slice(u.as_slice());
        if k == grid.steps() {
            break;
        }
        let dw = DVectorView::from_slice(noise.increment(k), noise.dim());
        drift_gain_step(
            &mut x_next,
            &x,
            &coeffs.a[k],
            &coeffs.b1[k],
            &DVectorView::from_slice(u.as_slice(), u.len()),
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
                what: "closed-loop propagation".into(),
            });
        }
        state.node_mut(k + 1).copy_from_slice(x_next.as_slice());
        observation.node_mut(k + 1).copy_from_slice(y_next.as_slice());
        std::mem::swap(&mut x, &mut x_next);
        std::mem::swap(&mut y, &mut y_next);
    }
    Ok(ClosedLoopRun {
        state,
        observation,
        control,
    })
}

/// Cost coefficients frozen on the grid so that per-path cost evaluation
/// over many paths does not re-evaluate schedules.
pub struct CostTable {
    grid: TimeGrid,
    q: Vec<DMatrix<f64>>,
    r: Vec<DMatrix<f64>>,
    s: DMatrix<f64>,
}

impl CostTable {
    pub fn new(
        cost: &CostSpec,
        grid: &TimeGrid,
        state_dim: usize,
        control_dim: usize,
    ) -> Result<Self> {
        cost.validate(grid, state_dim, control_dim)?;
        Ok(CostTable {
            grid: *grid,
            q: (0..grid.steps()).map(|k| cost.q.eval(grid.node(k))).collect(),
            r: (0..grid.steps()).map(|k| cost.r.eval(grid.node(k))).collect(),
            s: cost.s.clone(),
        })
    }

    /// Left-point quadrature of the running cost plus the terminal term:
    /// sum_k (x_k' Q_k x_k + u_k' R_k u_k) dt + x_N' S x_N.
    pub fn realized(&self, state: &SamplePath, control: &SamplePath) -> Result<f64> {
        if state.grid() != &self.grid || control.grid() != &self.grid {
            return Err(Error::InvalidArgument {
                arg: "state/control",
                reason: "paths and cost table use different grids".into(),
            });
        }
        let dt = self.grid.dt();
        let mut running = 0.0;
        for k in 0..self.grid.steps() {
            let x = state.node_vector(k);
            let u = control.node_vector(k);
            running += (quadratic(&self.q[k], &x) + quadratic(&self.r[k], &u)) * dt;
        }
        let x_end = state.node_vector(self.grid.steps());
        Ok(running + quadratic(&self.s, &x_end))
    }
}

fn quadratic(m: &DMatrix<f64>, v: &DVectorView<'_, f64>) -> f64 {
    (m * v).dot(v)
}

/// One-shot convenience wrapper over [`CostTable`].
pub fn realized_cost(
    cost: &CostSpec,
    grid: &TimeGrid,
    state: &SamplePath,
    control: &SamplePath,
) -> Result<f64> {
    CostTable::new(cost, grid, state.dim(), control.dim())?.realized(state, control)
}

/// Unrolls the separated law's internal recursion into offset plus
/// kernel form: with F_l = A_l + B1_l K_l - L_l C_l and
/// Psi(k, m) = (I + F_{k-1} dt) ... (I + F_m dt), the law's output is
/// exactly u_k = K_k Psi(k, 0) xh_0 + sum_{i<k} K_k Psi(k, i+1) L_i dy_i
/// where dy_i is the observation increment over step i. Returns the
/// offset path and the kernel; feeding them to
/// [`ControlLaw::KernelFeedback`] reproduces the separated loop up to
/// floating-point roundoff.
pub fn separated_law_kernel(
    model: &SystemModel,
    grid: &TimeGrid,
    regulator: &RegulatorSolution,
    estimator: &EstimatorSolution,
) -> Result<(SamplePath, VolterraKernel)> {
    model.shapes_ok()?;
    if regulator.grid != *grid || estimator.grid != *grid {
        return Err(Error::InvalidArgument {
            arg: "regulator/estimator",
            reason: "gain tables were synthesized on a different grid".into(),
        });
    }
    let coeffs = GridCoeffs::new(model, grid);
    let (m, p) = (model.control_dim, model.obs_dim);
    let dt = grid.dt();
    let steps = grid.steps();

    // I + F_l dt at every left node.
    let mut stepper = Vec::with_capacity(steps);
    for l in 0..steps {
        let mut f = &coeffs.a[l] + &coeffs.b1[l] * &regulator.k[l];
        f -= &estimator.l[l] * &coeffs.c[l];
        stepper.push(DMatrix::identity(model.state_dim, model.state_dim) + f * dt);
    }

    let mut offset = SamplePath::zeros(*grid, m);
    let mut phi = model.initial.mean();
    for k in 0..=steps {
        let u_bar = &regulator.k[k] * &phi;
        offset.node_mut(k).copy_from_slice(u_bar.as_slice());
        if k < steps {
            phi = &stepper[k] * phi;
        }
    }

    let mut kernel = VolterraKernel::zeros(*grid, m, p);
    for k in 1..=steps {
        // w walks K_k Psi(k, i+1) right-to-left across the row.
        let mut w = regulator.k[k].clone();
        for i in (0..k).rev() {
            kernel.set_block(k, i, &(&w * &estimator.l[i]));
            if i > 0 {
                w *= &stepper[i];
            }
        }
    }
    Ok((offset, kernel))
}

/// Increment-level loop kernel for a law in offset-plus-kernel form.
/// Stacking z = (x, y), the closed-loop increments obey
/// dz_k = dz0_k + sum_{i<k} Theta(k, i) dz_i where z0 is the open loop
/// under the offset alone and Theta(k, i) reads only the dy part:
/// Theta(k, i) = [[0, (A_k S(k, i) + B1_k M(k, i)) dt],
///                [0,  C_k S(k, i) dt]],
/// with the state response S(i+1, i) = 0,
/// S(k+1, i) = S(k, i) + (A_k S(k, i) + B1_k M(k, i)) dt. Rows at and
/// beyond the last step stay zero since no increment follows them.
pub fn loop_increment_kernel(
    model: &SystemModel,
    grid: &TimeGrid,
    feedback: &VolterraKernel,
) -> Result<VolterraKernel> {
    model.shapes_ok()?;
    let (n, m, p) = (model.state_dim, model.control_dim, model.obs_dim);
    if feedback.grid() != grid {
        return Err(Error::InvalidArgument {
            arg: "feedback",
            reason: "feedback kernel and loop use different grids".into(),
        });
    }
    if feedback.block_shape() != (m, p) {
        return Err(Error::DimensionMismatch {
            context: "feedback kernel",
            expected: format!("{m}x{p}"),
            actual: format!("{}x{}", feedback.block_shape().0, feedback.block_shape().1),
        });
    }
    let coeffs = GridCoeffs::new(model, grid);
    let dt = grid.dt();
    let d = n + p;
    let mut theta = VolterraKernel::zeros(*grid, d, d);
    let mut block = DMatrix::zeros(d, d);
    for i in 0..grid.steps() {
        let mut s = DMatrix::<f64>::zeros(n, p);
        for k in (i + 1)..grid.steps() {
            let top = (&coeffs.a[k] * &s + &coeffs.b1[k] * feedback.block(k, i)) * dt;
            let bottom = (&coeffs.c[k] * &s) * dt;
            block.fill(0.0);
            block.view_mut((0, n), (n, p)).copy_from(&top);
            block.view_mut((n, n), (p, p)).copy_from(&bottom);
            theta.set_block(k, i, &block);
            s += top;
        }
    }
    Ok(theta)
}

/// Stacked per-step increments of a simulated pair of paths, node-major
/// with state components before observation components; the final chunk
/// is zero padding so the layout matches kernel rows.
pub fn stacked_increments(state: &SamplePath, observation: &SamplePath) -> Vec<f64> {
    let grid = state.grid();
    let (n, p) = (state.dim(), observation.dim());
    let d = n + p;
    let mut z = vec![0.0; grid.num_nodes() * d];
    for k in 0..grid.steps() {
        let chunk = &mut z[k * d..(k + 1) * d];
        let (x_next, x_cur) = (state.node(k + 1), state.node(k));
        for i in 0..n {
            chunk[i] = x_next[i] - x_cur[i];
        }
        let (y_next, y_cur) = (observation.node(k + 1), observation.node(k));
        for i in 0..p {
            chunk[n + i] = y_next[i] - y_cur[i];
        }
    }
    z
}

/// Rebuilds closed-loop state and observation paths from open-loop ones:
/// dz_k = dz0_k + sum_{j<k} R(k, j) dz0_j with R the discrete resolvent
/// of the loop kernel, then cumulative sums from the open-loop initial
/// values.
pub fn reconstruct_closed_loop(
    resolvent: &VolterraKernel,
    base_state: &SamplePath,
    base_observation: &SamplePath,
) -> Result<(SamplePath, SamplePath)> {
    let grid = *base_state.grid();
    if base_observation.grid() != &grid || resolvent.grid() != &grid {
        return Err(Error::InvalidArgument {
            arg: "resolvent/base paths",
            reason: "inputs use different grids".into(),
        });
    }
    let (n, p) = (base_state.dim(), base_observation.dim());
    let d = n + p;
    if resolvent.block_shape() != (d, d) {
        return Err(Error::DimensionMismatch {
            context: "loop resolvent",
            expected: format!("{d}x{d}"),
            actual: format!("{}x{}", resolvent.block_shape().0, resolvent.block_shape().1),
        });
    }
    let z0 = stacked_increments(base_state, base_observation);
    let mut correction = vec![0.0; z0.len()];
    resolvent.apply_strict(&z0, &mut correction);

    let mut state = SamplePath::zeros(grid, n);
    let mut observation = SamplePath::zeros(grid, p);
    state.node_mut(0).copy_from_slice(base_state.node(0));
    observation.node_mut(0).copy_from_slice(base_observation.node(0));
    let mut x: Vec<f64> = base_state.node(0).to_vec();
    let mut y: Vec<f64> = base_observation.node(0).to_vec();
    for k in 0..grid.steps() {
        let chunk = k * d;
        for i in 0..n {
            x[i] += z0[chunk + i] + correction[chunk + i];
        }
        for i in 0..p {
            y[i] += z0[chunk + n + i] + correction[chunk + n + i];
        }
        state.node_mut(k + 1).copy_from_slice(&x);
        observation.node_mut(k + 1).copy_from_slice(&y);
    }
    Ok((state, observation))
}

/// Fixed-point sweep dz <- dz0 + Theta dz from an arbitrary start,
/// stopped when an entire sweep leaves every bit unchanged. Strict
/// causality of the kernel forces convergence to the unique solution in
/// at most one sweep per node plus the confirming sweep, whatever the
/// start; the sweep count is returned alongside the fixed point.
pub fn picard_fixed_point(
    theta: &VolterraKernel,
    base_increments: &[f64],
    start: &[f64],
    max_sweeps: usize,
) -> Result<(Vec<f64>, usize)> {
    let (r, c) = theta.block_shape();
    if r != c || base_increments.len() != start.len() {
        return Err(Error::InvalidArgument {
            arg: "theta/base/start",
            reason: "need square blocks and matching increment lengths".into(),
        });
    }
    let mut z = start.to_vec();
    let mut applied = vec![0.0; z.len()];
    for sweep in 1..=max_sweeps {
        theta.apply_strict(&z, &mut applied);
        for (a, b) in applied.iter_mut().zip(base_increments) {
            *a += b;
        }
        if applied == z {
            return Ok((z, sweep));
        }
        std::mem::swap(&mut z, &mut applied);
    }
    Err(Error::InvalidArgument {
        arg: "max_sweeps",
        reason: format!(
            "no fixed point within {max_sweeps} sweeps; the kernel is not strictly causal"
        ),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CausalityReport {
    pub paths: usize,
    pub cut_node: usize,
    /// Largest absolute difference over state, observation, and control
    /// on nodes up to the cut; anything but exactly zero fails.
    pub max_prefix_deviation: f64,
    /// Whether every resampled noise record actually differed after the
    /// cut, so the comparison is not vacuous.
    pub suffix_diverged: bool,
    pub pass: bool,
}

/// Splice test for causality: rerun the loop on a noise record whose
/// randomness strictly after `cut_node` is replaced by a fresh draw. A
/// causal law cannot see the replaced randomness before the cut, so
/// state, observation, and control must match bit for bit on
/// `[0, cut_node]`; any deviation means the law read the future.
pub fn causality_check(
    model: &SystemModel,
    grid: &TimeGrid,
    spec: &NoiseSpec,
    law: &ControlLaw,
    paths: usize,
    cut_node: usize,
    seed0: u64,
) -> Result<CausalityReport> {
    if paths == 0 {
        return Err(Error::InvalidArgument {
            arg: "paths",
            reason: "need at least one path".into(),
        });
    }
    if cut_node == 0 || cut_node >= grid.steps() {
        return Err(Error::InvalidArgument {
            arg: "cut_node",
            reason: format!("need 1 <= cut < {}, got {cut_node}", grid.steps()),
        });
    }
    let mut max_prefix = 0.0_f64;
    let mut suffix_diverged = true;
    for i in 0..paths as u64 {
        let noise = sample_noise(spec, grid, seed0.wrapping_add(i));
        let spliced = noise.resampled_after(
            spec,
            cut_node,
            seed0.wrapping_add(i).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5bf0_3635,
        );
        let run = solve_closed_loop(model, grid, &noise, law)?;
        let spliced_run = solve_closed_loop(model, grid, &spliced, law)?;

        for k in 0..=cut_node {
            max_prefix = max_prefix
                .max(slice_abs_diff(run.state.node(k), spliced_run.state.node(k)))
                .max(slice_abs_diff(
                    run.observation.node(k),
                    spliced_run.observation.node(k),
                ))
                .max(slice_abs_diff(run.control.node(k), spliced_run.control.node(k)));
        }
        let differs = (cut_node..grid.steps())
            .any(|s| noise.increment(s) != spliced.increment(s));
        suffix_diverged &= differs;
    }
    Ok(CausalityReport {
        paths,
        cut_node,
        max_prefix_deviation: max_prefix,
        suffix_diverged,
        pass: max_prefix == 0.0 && suffix_diverged,
    })
}

fn slice_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use nalgebra::{dmatrix, dvector};

    use crate::kalman::run_kalman_filter;
    use crate::law::CustomLaw;
    use crate::model::tests::scalar_model;
    use crate::model::InitialState;
    use crate::schedule::MatrixSchedule;
    use crate::synthesis::tests::unit_cost;
    use crate::synthesis::{solve_estimator, solve_regulator};

    fn wiener2() -> NoiseSpec {
        NoiseSpec::Wiener { dim: 2 }
    }

    /// Two-state model with one control and one observation channel so
    /// the kernel algebra is exercised on genuinely rectangular blocks.
    fn two_state_model() -> SystemModel {
        SystemModel {
            state_dim: 2,
            control_dim: 1,
            obs_dim: 1,
            noise_dim: 3,
            a: MatrixSchedule::constant(dmatrix![0.1, 1.0; 0.0, -0.3]),
            b1: MatrixSchedule::constant(dmatrix![0.0; 1.0]),
            b2: MatrixSchedule::constant(dmatrix![0.4, 0.0, 0.0; 0.0, 0.6, 0.0]),
            c: MatrixSchedule::constant(dmatrix![1.0, 0.0]),
            d: MatrixSchedule::constant(dmatrix![0.0, 0.0, 0.5]),
            initial: InitialState::Deterministic(dvector![1.0, -0.5]),
            require_independent_noise: true,
        }
    }

    #[test]
    fn zero_law_is_bitwise_the_open_loop() {
        let model = scalar_model();
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let noise = sample_noise(&wiener2(), &grid, 42);
        let run = solve_closed_loop(&model, &grid, &noise, &ControlLaw::Zero).unwrap();
        let open = crate::sim::simulate_open_loop(
            &model,
            &grid,
            &noise,
            &SamplePath::zeros(grid, 1),
        )
        .unwrap();
        assert_eq!(run.state, open.state);
        assert_eq!(run.observation, open.observation);
        assert!(run.control.node_vector(57).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_state_feedback_tracks_the_deterministic_flow() {
        // Kill the plant noise so x follows dx = (a + k) x dt exactly up
        // to Euler error; the observation stays noisy and is ignored.
        let mut model = scalar_model();
        model.b2 = MatrixSchedule::constant(dmatrix![0.0, 0.0]);
        let grid = TimeGrid::new(1.0, 4000).unwrap();
        let noise = sample_noise(&wiener2(), &grid, 7);
        let law = ControlLaw::StateFeedback {
            gain: MatrixSchedule::scalar(-2.5),
        };
        let run = solve_closed_loop(&model, &grid, &noise, &law).unwrap();
        let x_end = run.state.node(grid.steps())[0];
        assert!(
            (x_end - (-2.5_f64).exp()).abs() < 1e-3,
            "terminal state {x_end}"
        );
        // Control is the gain times the state, recorded at every node.
        let k = 1234;
        assert_eq!(run.control.node(k)[0], -2.5 * run.state.node(k)[0]);
    }

    #[test]
    fn separated_law_is_regulator_gain_on_the_posthoc_filter_estimate() {
        let model = scalar_model();
        let grid = TimeGrid::new(1.0, 300).unwrap();
        let regulator = solve_regulator(&model, &unit_cost(1, 1), &grid).unwrap();
        let estimator = solve_estimator(&model, &grid).unwrap();
        let law = ControlLaw::SeparatedLqg {
            regulator: regulator.clone(),
            estimator: estimator.clone(),
        };
        let noise = sample_noise(&wiener2(), &grid, 99);
        let run = solve_closed_loop(&model, &grid, &noise, &law).unwrap();

        // Rebuilding the estimate from the recorded record must land on
        // the exact same recursion, bit for bit, so the recorded control
        // is exactly gain times estimate.
        let filter =
            run_kalman_filter(&model, &grid, &estimator, &run.observation, &run.control).unwrap();
        for k in 0..=grid.steps() {
            let expect = regulator.k[k][(0, 0)] * filter.estimate.node(k)[0];
            assert_eq!(
                run.control.node(k)[0],
                expect,
                "node {k}: recorded control is not the gain times the filter estimate"
            );
        }
    }

    #[test]
    fn unrolled_kernel_reproduces_the_separated_loop() {
        for (model, steps, seed) in [
            (scalar_model(), 400, 3_u64),
            (two_state_model(), 250, 11_u64),
        ] {
            let grid = TimeGrid::new(1.0, steps).unwrap();
            let cost = unit_cost(model.state_dim, model.control_dim);
            let regulator = solve_regulator(&model, &cost, &grid).unwrap();
            let estimator = solve_estimator(&model, &grid).unwrap();
            let (offset, kernel) =
                separated_law_kernel(&model, &grid, &regulator, &estimator).unwrap();

            let spec = NoiseSpec::Wiener {
                dim: model.noise_dim,
            };
            let noise = sample_noise(&spec, &grid, seed);
            let separated = solve_closed_loop(
                &model,
                &grid,
                &noise,
                &ControlLaw::SeparatedLqg {
                    regulator,
                    estimator,
                },
            )
            .unwrap();
            let unrolled = solve_closed_loop(
                &model,
                &grid,
                &noise,
                &ControlLaw::KernelFeedback { offset, kernel },
            )
            .unwrap();

            let du = separated.control.max_abs_diff(&unrolled.control);
            let dx = separated.state.max_abs_diff(&unrolled.state);
            assert!(du < 1e-10, "control gap {du} (n = {})", model.state_dim);
            assert!(dx < 1e-10, "state gap {dx} (n = {})", model.state_dim);
        }
    }

    #[test]
    fn resolvent_reconstruction_matches_the_simulated_loop() {
        let model = two_state_model();
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let cost = unit_cost(2, 1);
        let regulator = solve_regulator(&model, &cost, &grid).unwrap();
        let estimator = solve_estimator(&model, &grid).unwrap();
        let (offset, kernel) =
            separated_law_kernel(&model, &grid, &regulator, &estimator).unwrap();
        let theta = loop_increment_kernel(&model, &grid, &kernel).unwrap();
        let rho = theta.discrete_resolvent().unwrap();

        let spec = NoiseSpec::Wiener { dim: 3 };
        let noise = sample_noise(&spec, &grid, 17);
        let base = crate::sim::simulate_open_loop(&model, &grid, &noise, &offset).unwrap();
        let (x_rec, y_rec) =
            reconstruct_closed_loop(&rho, &base.state, &base.observation).unwrap();

        let direct = solve_closed_loop(
            &model,
            &grid,
            &noise,
            &ControlLaw::SeparatedLqg {
                regulator,
                estimator,
            },
        )
        .unwrap();
        let dx = x_rec.max_abs_diff(&direct.state);
        let dy = y_rec.max_abs_diff(&direct.observation);
        assert!(dx < 1e-10, "state reconstruction gap {dx}");
        assert!(dy < 1e-10, "observation reconstruction gap {dy}");
    }

    #[test]
    fn picard_sweeps_land_on_one_fixed_point_from_any_start() {
        let model = scalar_model();
        let grid = TimeGrid::new(1.0, 60).unwrap();
        let regulator = solve_regulator(&model, &unit_cost(1, 1), &grid).unwrap();
        let estimator = solve_estimator(&model, &grid).unwrap();
        let (offset, kernel) =
            separated_law_kernel(&model, &grid, &regulator, &estimator).unwrap();
        let theta = loop_increment_kernel(&model, &grid, &kernel).unwrap();

        let noise = sample_noise(&wiener2(), &grid, 5);
        let base = crate::sim::simulate_open_loop(&model, &grid, &noise, &offset).unwrap();
        let z0 = stacked_increments(&base.state, &base.observation);

        let zeros = vec![0.0; z0.len()];
        let garbage: Vec<f64> = (0..z0.len()).map(|i| (i as f64 * 0.77).sin() * 40.0).collect();
        let budget = grid.num_nodes() + 1;
        let (fix_a, sweeps_a) = picard_fixed_point(&theta, &z0, &zeros, budget).unwrap();
        let (fix_b, sweeps_b) = picard_fixed_point(&theta, &z0, &garbage, budget).unwrap();
        assert_eq!(fix_a, fix_b, "fixed point depends on the start");
        assert!(sweeps_a <= budget && sweeps_b <= budget);

        // The fixed point is the simulated loop, up to roundoff.
        let direct = solve_closed_loop(
            &model,
            &grid,
            &noise,
            &ControlLaw::SeparatedLqg {
                regulator,
                estimator,
            },
        )
        .unwrap();
        let dz = stacked_increments(&direct.state, &direct.observation);
        let gap = fix_a
            .iter()
            .zip(&dz)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-10, "fixed point vs simulation {gap}");
    }

    #[test]
    fn causality_check_accepts_the_separated_law() {
        let model = scalar_model();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let regulator = solve_regulator(&model, &unit_cost(1, 1), &grid).unwrap();
        let estimator = solve_estimator(&model, &grid).unwrap();
        let law = ControlLaw::SeparatedLqg {
            regulator,
            estimator,
        };
        let report = causality_check(&model, &grid, &wiener2(), &law, 3, 20, 1000).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.max_prefix_deviation, 0.0);
        assert!(report.suffix_diverged);
    }

    #[test]
    fn anticipative_law_is_stopped_by_the_frontier_guard() {
        let model = scalar_model();
        let grid = TimeGrid::new(1.0, 30).unwrap();
        let noise = sample_noise(&wiener2(), &grid, 2);
        let peeker = ControlLaw::Custom(CustomLaw(Arc::new(|ctx: &LoopContext<'_>| {
            // Tries to trade on the next observation before it exists.
            let ahead = ctx.observation(ctx.node() + 1)?;
            Ok(dvector![ahead[0]])
        })));
        match solve_closed_loop(&model, &grid, &noise, &peeker) {
            Err(Error::CausalityViolation { .. }) => {}
            other => panic!("expected a causality violation, got {other:?}"),
        }
    }

    #[test]
    fn delayed_law_reads_aged_state_and_starts_at_zero() {
        let model = scalar_model();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let law = ControlLaw::Delayed {
            inner: Box::new(ControlLaw::StateFeedback {
                gain: MatrixSchedule::scalar(-1.5),
            }),
            delay: 0.03,
        };
        let noise = sample_noise(&wiener2(), &grid, 31);
        let run = solve_closed_loop(&model, &grid, &noise, &law).unwrap();
        for k in 0..3 {
            assert_eq!(run.control.node(k)[0], 0.0, "node {k} should be silent");
        }
        for k in 3..=grid.steps() {
            assert_eq!(
                run.control.node(k)[0],
                -1.5 * run.state.node(k - 3)[0],
                "node {k} should read the state three steps back"
            );
        }
    }

    #[test]
    fn realized_cost_matches_closed_form_on_a_deterministic_path() {
        // dx = 0.2 x dt with unit costs: J = int_0^1 e^{0.4 t} dt + e^{0.4}
        // plus zero control effort.
        let mut model = scalar_model();
        model.a = MatrixSchedule::scalar(0.2);
        model.b2 = MatrixSchedule::constant(dmatrix![0.0, 0.0]);
        let grid = TimeGrid::new(1.0, 4000).unwrap();
        let noise = sample_noise(&wiener2(), &grid, 1);
        let run = solve_closed_loop(&model, &grid, &noise, &ControlLaw::Zero).unwrap();
        let mut cost = unit_cost(1, 1);
        cost.s = dmatrix![2.0];
        let j = realized_cost(&cost, &grid, &run.state, &run.control).unwrap();
        let exact = ((0.4_f64).exp() - 1.0) / 0.4 + 2.0 * (0.4_f64).exp();
        assert!((j - exact).abs() < 2e-3, "cost {j} vs {exact}");

        let table = CostTable::new(&cost, &grid, 1, 1).unwrap();
        assert_eq!(j, table.realized(&run.state, &run.control).unwrap());
    }

    #[test]
    fn change_point_law_closes_the_loop() {
        // Scalar plant driven by a single random step plus controls; the
        // law must run the posterior filter without blowing up and push
        // the state back toward zero after the change.
        let model = SystemModel {
            state_dim: 1,
            control_dim: 1,
            obs_dim: 1,
            noise_dim: 2,
            a: MatrixSchedule::scalar(0.0),
            b1: MatrixSchedule::scalar(1.0),
            b2: MatrixSchedule::constant(dmatrix![1.0, 0.0]),
            c: MatrixSchedule::scalar(1.0),
            d: MatrixSchedule::constant(dmatrix![0.0, 1.0]),
            initial: InitialState::Deterministic(dvector![0.0]),
            require_independent_noise: true,
        };
        let grid = TimeGrid::new(1.0, 400).unwrap();
        let spec = NoiseSpec::Composite(vec![
            NoiseSpec::StepChange,
            NoiseSpec::Wiener { dim: 1 },
        ]);
        // Terminal-cost regulator gain k(t) = -1 / (1 + T - t) tabulated
        // on the nodes.
        let gain = MatrixSchedule::table(
            grid.nodes()
                .map(|t| (t, dmatrix![-1.0 / (2.0 - t)]))
                .collect(),
        )
        .unwrap();
        let law = ControlLaw::ChangePointLqg { sigma: 1.0, gain };
        let mut engaged = 0;
        for seed in 0..8 {
            let noise = sample_noise(&spec, &grid, seed);
            let run = solve_closed_loop(&model, &grid, &noise, &law).unwrap();
            assert!(run.control.is_finite() && run.state.is_finite());
            if run
                .control
                .node_vector(grid.steps())
                .iter()
                .any(|v| v.abs() > 1e-3)
            {
                engaged += 1;
            }
        }
        assert!(engaged >= 6, "law engaged on {engaged}/8 paths");
    }
}
