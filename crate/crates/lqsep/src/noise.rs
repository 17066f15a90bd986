//! Driving noise: martingale increment sampling with jump bookkeeping.
//!
//! A [`NoisePath`] holds per-step increments of the driving process `w`,
//! a log of individual jumps (node-snapped), and per-step increments of
//! the pathwise quadratic variation matrix `[w, w']`. Everything is
//! reproducible: the same `(spec, grid, seed)` triple yields bit-identical
//! paths regardless of how many threads the caller uses.
//!
//! Jump conventions: a jump that lands in `(t_k, t_{k+1}]` is attributed
//! to step `k` and becomes visible at node `k+1`, so node values are
//! post-jump (right-continuous) and the left limit at the jump node is
//! the previous node value plus any continuous drift over the step.
//!
//! Quadratic variation conventions per component block:
//! continuous blocks (Wiener, geometric) accumulate the realized outer
//! product of their increments; pure-jump blocks accumulate the squared
//! logged jump sizes at jump steps and nothing elsewhere (their
//! compensator is bounded variation and contributes no quadratic
//! variation). Cross-block entries are zero, so each step increment is
//! PSD and the running matrix is nondecreasing in the PSD order.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::path::SamplePath;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoiseSpec {
    /// Standard Brownian motion, `dim` independent components.
    Wiener { dim: usize },
    /// Unit jumps at Poisson times minus the compensator `rate * t`,
    /// one component per rate.
    CompensatedPoisson { rates: Vec<f64> },
    /// dw = sigma * w * dW with w(0) = 1; scalar, martingale by
    /// construction (zero drift).
    GbmMartingale { sigma: f64 },
    /// Single component that is 0 until a uniform random time and then
    /// sticks at +1 or -1 (equiprobable). The change time is snapped to
    /// the next grid node, so v(0) = 0 and |v(T)| = 1 on every draw.
    StepChange,
    /// Independent blocks stacked into one vector process.
    Composite(Vec<NoiseSpec>),
    /// Brownian motion plus `drift * t`. NOT a martingale; exists so the
    /// empirical check has something to reject.
    WienerWithDrift { dim: usize, drift: f64 },
    /// dw = mu * w * dt + sigma * w * dW. NOT a martingale unless mu = 0;
    /// kept separate from `GbmMartingale` so zero drift stays enforced
    /// there.
    GbmWithDrift { sigma: f64, mu: f64 },
}

impl NoiseSpec {
    pub fn dim(&self) -> usize {
        match self {
            NoiseSpec::Wiener { dim } | NoiseSpec::WienerWithDrift { dim, .. } => *dim,
            NoiseSpec::CompensatedPoisson { rates } => rates.len(),
            NoiseSpec::GbmMartingale { .. } | NoiseSpec::GbmWithDrift { .. } => 1,
            NoiseSpec::StepChange => 1,
            NoiseSpec::Composite(parts) => parts.iter().map(|p| p.dim()).sum(),
        }
    }

    pub fn is_martingale(&self) -> bool {
        match self {
            NoiseSpec::WienerWithDrift { drift, .. } => *drift == 0.0,
            NoiseSpec::GbmWithDrift { mu, .. } => *mu == 0.0,
            NoiseSpec::Composite(parts) => parts.iter().all(|p| p.is_martingale()),
            _ => true,
        }
    }

    /// Per-component classification, in component order: whether the
    /// component's quadratic variation comes from logged jumps (so the
    /// jump list and the variation array must agree exactly) or from
    /// realized products of continuous increments.
    pub fn component_kinds(&self) -> Vec<NoiseComponentKind> {
        match self {
            NoiseSpec::Wiener { dim } | NoiseSpec::WienerWithDrift { dim, .. } => {
                vec![NoiseComponentKind::Continuous; *dim]
            }
            NoiseSpec::GbmMartingale { .. } | NoiseSpec::GbmWithDrift { .. } => {
                vec![NoiseComponentKind::Continuous]
            }
            NoiseSpec::CompensatedPoisson { rates } => {
                vec![NoiseComponentKind::Jump; rates.len()]
            }
            NoiseSpec::StepChange => vec![NoiseComponentKind::Jump],
            NoiseSpec::Composite(parts) => {
                parts.iter().flat_map(|p| p.component_kinds()).collect()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseSpec::Wiener { dim } | NoiseSpec::WienerWithDrift { dim, .. } => {
                if *dim == 0 {
                    return Err(Error::InvalidArgument {
                        arg: "dim",
                        reason: "noise must have at least one component".into(),
                    });
                }
            }
            NoiseSpec::CompensatedPoisson { rates } => {
                if rates.is_empty() {
                    return Err(Error::InvalidArgument {
                        arg: "rates",
                        reason: "needs at least one rate".into(),
                    });
                }
                if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
                    return Err(Error::InvalidArgument {
                        arg: "rates",
                        reason: "rates must be positive and finite".into(),
                    });
                }
            }
            NoiseSpec::GbmMartingale { sigma } | NoiseSpec::GbmWithDrift { sigma, .. } => {
                if !(sigma.is_finite() && *sigma > 0.0) {
                    return Err(Error::InvalidArgument {
                        arg: "sigma",
                        reason: format!("must be positive and finite, got {sigma}"),
                    });
                }
            }
            NoiseSpec::StepChange => {}
            NoiseSpec::Composite(parts) => {
                if parts.is_empty() {
                    return Err(Error::InvalidArgument {
                        arg: "parts",
                        reason: "composite noise needs at least one block".into(),
                    });
                }
                for p in parts {
                    p.validate()?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseComponentKind {
    Continuous,
    Jump,
}

/// One logged jump: multiple unit jumps inside a single step produce
/// multiple entries with the same `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    /// Increment index; the jump is visible at node `step + 1`.
    pub step: usize,
    pub component: usize,
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    grid: TimeGrid,
    dim: usize,
    seed: u64,
    /// N * dim, step-major.
    increments: Vec<f64>,
    /// Sorted by step.
    jumps: Vec<JumpEvent>,
    /// N * dim * dim, step-major, row-major within a step; each step's
    /// matrix is symmetric PSD.
    qv_steps: Vec<f64>,
}

impl NoisePath {
    /// All-zero increments: the deterministic skeleton of the dynamics.
    /// The seed still feeds the companion stream (initial-state draws).
    pub fn zeros(grid: TimeGrid, dim: usize, seed: u64) -> NoisePath {
        let n = grid.steps();
        NoisePath {
            grid,
            dim,
            seed,
            increments: vec![0.0; n * dim],
            jumps: Vec::new(),
            qv_steps: vec![0.0; n * dim * dim],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn increment(&self, step: usize) -> &[f64] {
        &self.increments[step * self.dim..(step + 1) * self.dim]
    }

    pub fn jumps(&self) -> &[JumpEvent] {
        &self.jumps
    }

    /// Jumps attributed to a given step (visible at node `step + 1`).
    pub fn jumps_at_step(&self, step: usize) -> &[JumpEvent] {
        let lo = self.jumps.partition_point(|j| j.step < step);
        let hi = self.jumps.partition_point(|j| j.step <= step);
        &self.jumps[lo..hi]
    }

    /// Quadratic variation increment of step k as a dim x dim matrix.
    pub fn qv_step(&self, step: usize) -> DMatrix<f64> {
        let d = self.dim;
        DMatrix::from_row_slice(d, d, &self.qv_steps[step * d * d..(step + 1) * d * d])
    }

    /// One entry of the step-k quadratic variation increment, without
    /// materializing the matrix.
    pub fn qv_entry(&self, step: usize, i: usize, j: usize) -> f64 {
        self.qv_steps[step * self.dim * self.dim + i * self.dim + j]
    }

    /// Running quadratic variation at every node (node 0 is zero).
    pub fn qv_running(&self) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(self.grid.num_nodes());
        let mut acc = DMatrix::zeros(self.dim, self.dim);
        out.push(acc.clone());
        for k in 0..self.grid.steps() {
            acc += self.qv_step(k);
            out.push(acc.clone());
        }
        out
    }

    /// Node values of `w - w(0)` as a path: cumulative increments, zero at
    /// node 0. Geometric components start at 1 internally but consumers
    /// only ever integrate against increments, so the offset is private.
    pub fn cumulative(&self) -> SamplePath {
        let mut p = SamplePath::zeros(self.grid, self.dim);
        let mut acc = vec![0.0; self.dim];
        for k in 0..self.grid.steps() {
            for (a, &inc) in acc.iter_mut().zip(self.increment(k)) {
                *a += inc;
            }
            p.node_mut(k + 1).copy_from_slice(&acc);
        }
        p
    }

    /// Generator for draws that must be paired with this path (e.g. the
    /// initial state): same seed, separate stream, so adding consumers
    /// never perturbs the increments.
    pub fn companion_rng(&self, stream: u64) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(1));
        rng
    }

    /// Copy of `self` with all randomness strictly after `cut_node`
    /// replaced by a fresh draw. Node values, jumps, and quadratic
    /// variation on `[0, cut_node]` are bit-identical to `self`; the
    /// companion stream (initial state) is also unchanged.
    pub fn resampled_after(&self, spec: &NoiseSpec, cut_node: usize, new_seed: u64) -> NoisePath {
        let fresh = sample_noise(spec, &self.grid, new_seed);
        let d = self.dim;
        let mut increments = fresh.increments;
        increments[..cut_node * d].copy_from_slice(&self.increments[..cut_node * d]);
        let mut qv_steps = fresh.qv_steps;
        qv_steps[..cut_node * d * d].copy_from_slice(&self.qv_steps[..cut_node * d * d]);
        let mut jumps: Vec<JumpEvent> = self
            .jumps
            .iter()
            .filter(|j| j.step < cut_node)
            .chain(fresh.jumps.iter().filter(|j| j.step >= cut_node))
            .copied()
            .collect();
        jumps.sort_by_key(|j| j.step);
        NoisePath {
            grid: self.grid,
            dim: d,
            seed: self.seed,
            increments,
            jumps,
            qv_steps,
        }
    }

    /// The same randomness viewed on a grid `factor` times coarser:
    /// increments and quadratic variation are summed within each group
    /// of fine steps, jump events keep their sizes and move to the
    /// coarse step containing them. `factor` must divide the step count.
    ///
    /// Summing is the faithful aggregation for both fields. Increments
    /// of the underlying process add over subintervals, and realized
    /// quadratic variation is additive over partition refinements, so
    /// the coarse record still describes the identical realization,
    /// just binned wider. Refinement studies rely on this: run the same
    /// draw at two resolutions and compare per-path quantities.
    pub fn coarsened(&self, factor: usize) -> Result<NoisePath> {
        if factor == 0 || self.grid.steps() % factor != 0 {
            return Err(Error::InvalidArgument {
                arg: "factor",
                reason: format!(
                    "factor {factor} must divide the step count {}",
                    self.grid.steps()
                ),
            });
        }
        let grid = TimeGrid::new(self.grid.horizon(), self.grid.steps() / factor)?;
        let d = self.dim;
        let mut increments = vec![0.0; grid.steps() * d];
        let mut qv_steps = vec![0.0; grid.steps() * d * d];
        for fine in 0..self.grid.steps() {
            let coarse = fine / factor;
            for i in 0..d {
                increments[coarse * d + i] += self.increments[fine * d + i];
            }
            for i in 0..d * d {
                qv_steps[coarse * d * d + i] += self.qv_steps[fine * d * d + i];
            }
        }
        let jumps = self
            .jumps
            .iter()
            .map(|j| JumpEvent {
                step: j.step / factor,
                component: j.component,
                size: j.size,
            })
            .collect();
        Ok(NoisePath {
            grid,
            dim: d,
            seed: self.seed,
            increments,
            jumps,
            qv_steps,
        })
    }
}

/// Deterministic sampling: one ChaCha stream per seed, blocks of a
/// composite drawn in declaration order.
pub fn sample_noise(spec: &NoiseSpec, grid: &TimeGrid, seed: u64) -> NoisePath {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dim = spec.dim();
    let n = grid.steps();
    let mut path = NoisePath {
        grid: *grid,
        dim,
        seed,
        increments: vec![0.0; n * dim],
        jumps: Vec::new(),
        qv_steps: vec![0.0; n * dim * dim],
    };
    sample_block(spec, grid, &mut rng, &mut path, 0);
    path.jumps.sort_by_key(|j| j.step);
    path
}

fn sample_block(
    spec: &NoiseSpec,
    grid: &TimeGrid,
    rng: &mut ChaCha12Rng,
    path: &mut NoisePath,
    offset: usize,
) {
    let n = grid.steps();
    let dt = grid.dt();
    let dim = path.dim;
    let sqrt_dt = dt.sqrt();

    // Realized outer product of a block's continuous increments; diagonal
    // blocks only, so the step matrix stays PSD.
    let set_qv_outer = |path: &mut NoisePath, k: usize, lo: usize, width: usize| {
        let inc: Vec<f64> = path.increment(k)[lo..lo + width].to_vec();
        for i in 0..width {
            for j in 0..width {
                path.qv_steps[k * dim * dim + (lo + i) * dim + (lo + j)] = inc[i] * inc[j];
            }
        }
    };

    match spec {
        NoiseSpec::Wiener { dim: d } | NoiseSpec::WienerWithDrift { dim: d, .. } => {
            let drift = match spec {
                NoiseSpec::WienerWithDrift { drift, .. } => *drift,
                _ => 0.0,
            };
            for k in 0..n {
                for i in 0..*d {
                    let z: f64 = StandardNormal.sample(rng);
                    path.increments[k * dim + offset + i] = z * sqrt_dt + drift * dt;
                }
                set_qv_outer(path, k, offset, *d);
            }
        }
        NoiseSpec::CompensatedPoisson { rates } => {
            for (i, &rate) in rates.iter().enumerate() {
                if rate * dt > 0.1 {
                    log::warn!(
                        "compensated Poisson rate {rate} with dt {dt}: rate*dt = {:.3} > 0.1, \
                         jumps will cluster on single steps",
                        rate * dt
                    );
                }
                let dist = Poisson::new(rate * dt).expect("validated rate");
                for k in 0..n {
                    let count = dist.sample(rng) as u64;
                    path.increments[k * dim + offset + i] = count as f64 - rate * dt;
                    for _ in 0..count {
                        path.jumps.push(JumpEvent {
                            step: k,
                            component: offset + i,
                            size: 1.0,
                        });
                    }
                    // Unit jumps each contribute 1; the compensator is
                    // bounded variation and contributes nothing.
                    path.qv_steps[k * dim * dim + (offset + i) * dim + (offset + i)] = count as f64;
                }
            }
        }
        NoiseSpec::GbmMartingale { sigma } | NoiseSpec::GbmWithDrift { sigma, .. } => {
            let mu = match spec {
                NoiseSpec::GbmWithDrift { mu, .. } => *mu,
                _ => 0.0,
            };
            let mut w = 1.0;
            for k in 0..n {
                let z: f64 = StandardNormal.sample(rng);
                let inc = mu * w * dt + sigma * w * z * sqrt_dt;
                path.increments[k * dim + offset] = inc;
                path.qv_steps[k * dim * dim + offset * dim + offset] = inc * inc;
                w += inc;
            }
        }
        NoiseSpec::StepChange => {
            let tau: f64 = rng.random_range(0.0..grid.horizon());
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            // Snap to the next node: tau in [t_j, t_{j+1}) lands at node
            // j+1, i.e. step j. tau < T always, so the step index is < N.
            let step = ((tau / dt).floor() as usize).min(n - 1);
            path.increments[step * dim + offset] = sign;
            path.jumps.push(JumpEvent {
                step,
                component: offset,
                size: sign,
            });
            path.qv_steps[step * dim * dim + offset * dim + offset] = 1.0;
        }
        NoiseSpec::Composite(parts) => {
            let mut lo = offset;
            for p in parts {
                sample_block(p, grid, rng, path, lo);
                lo += p.dim();
            }
        }
    }
}

/// Outcome of the conditional-mean martingale test.
#[derive(Debug, Clone, Serialize)]
pub struct MartingaleCheck {
    /// Worst |conditional mean| / SE over all probes, components, bins.
    pub max_abs_ratio: f64,
    /// The worst cell: (probe node, component, bin, mean, se).
    pub cells: Vec<MartingaleCell>,
    pub paths: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MartingaleCell {
    pub probe_node: usize,
    pub component: usize,
    pub bin: usize,
    pub mean: f64,
    pub se: f64,
}

/// Estimates E[w(probe + window) - w(probe) | bin of w(probe)] for sign /
/// magnitude bins and flags any conditional mean larger than 3 SE. A true
/// martingale passes; a drift of order the window length fails.
pub fn empirical_martingale_check(
    spec: &NoiseSpec,
    grid: &TimeGrid,
    paths: usize,
    seed0: u64,
) -> Result<MartingaleCheck> {
    spec.validate()?;
    if paths < 1000 {
        return Err(Error::InvalidArgument {
            arg: "paths",
            reason: format!("need at least 1000 paths for binned conditional means, got {paths}"),
        });
    }
    let n = grid.steps();
    if n < 8 {
        return Err(Error::InvalidArgument {
            arg: "grid",
            reason: "need at least 8 steps".into(),
        });
    }
    let dim = spec.dim();
    let probes = [n / 4, n / 2];
    let window = n / 4;

    // Per path: (w at each probe, forward window increment at each probe).
    use rayon::prelude::*;
    let rows: Vec<Vec<(f64, f64)>> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let path = sample_noise(spec, grid, seed0.wrapping_add(i as u64));
            let mut row = Vec::with_capacity(probes.len() * dim);
            for &p in &probes {
                let mut w_at = vec![0.0; dim];
                for k in 0..p {
                    for c in 0..dim {
                        w_at[c] += path.increment(k)[c];
                    }
                }
                let mut fwd = vec![0.0; dim];
                for k in p..p + window {
                    for c in 0..dim {
                        fwd[c] += path.increment(k)[c];
                    }
                }
                for c in 0..dim {
                    row.push((w_at[c], fwd[c]));
                }
            }
            row
        })
        .collect();

    let mut cells = Vec::new();
    let mut max_ratio: f64 = 0.0;
    for (pi, &probe) in probes.iter().enumerate() {
        for c in 0..dim {
            let col: Vec<(f64, f64)> = rows.iter().map(|r| r[pi * dim + c]).collect();
            // Magnitude threshold: median |w| in this cell.
            let mut mags: Vec<f64> = col.iter().map(|(w, _)| w.abs()).collect();
            mags.sort_by(|a, b| a.total_cmp(b));
            let med = mags[mags.len() / 2];
            for bin in 0..4 {
                let members: Vec<f64> = col
                    .iter()
                    .filter(|(w, _)| {
                        let neg = *w < 0.0;
                        let big = w.abs() >= med;
                        match bin {
                            0 => neg && big,
                            1 => neg && !big,
                            2 => !neg && !big,
                            _ => !neg && big,
                        }
                    })
                    .map(|(_, f)| *f)
                    .collect();
                if members.len() < 50 {
                    continue; // degenerate bin (e.g. all-positive process)
                }
                let m = members.len() as f64;
                let mean = members.iter().sum::<f64>() / m;
                let var = members.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
                let se = (var / m).sqrt();
                if se > 0.0 {
                    let ratio = mean.abs() / se;
                    if ratio > max_ratio {
                        max_ratio = ratio;
                    }
                    cells.push(MartingaleCell {
                        probe_node: probe,
                        component: c,
                        bin,
                        mean,
                        se,
                    });
                }
            }
        }
    }
    Ok(MartingaleCheck {
        max_abs_ratio: max_ratio,
        pass: max_ratio <= 3.0,
        cells,
        paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn sampling_is_deterministic_in_seed() {
        let spec = NoiseSpec::Composite(vec![
            NoiseSpec::Wiener { dim: 2 },
            NoiseSpec::CompensatedPoisson { rates: vec![3.0] },
            NoiseSpec::GbmMartingale { sigma: 0.5 },
        ]);
        let g = grid(64);
        let a = sample_noise(&spec, &g, 42);
        let b = sample_noise(&spec, &g, 42);
        assert_eq!(a, b);
        let c = sample_noise(&spec, &g, 43);
        assert_ne!(a.increments, c.increments);
    }

    #[test]
    fn wiener_quadratic_variation_near_horizon() {
        let g = grid(4000);
        let path = sample_noise(&NoiseSpec::Wiener { dim: 1 }, &g, 9);
        let qv = path.qv_running();
        let total = qv[g.steps()][(0, 0)];
        // Var of the realized QV is 2*dt*T; allow five sigmas.
        let tol = 5.0 * (2.0 * g.dt()).sqrt();
        assert!((total - 1.0).abs() < tol, "QV(T) = {total}");
    }

    #[test]
    fn qv_steps_are_psd_and_running_qv_nondecreasing() {
        let spec = NoiseSpec::Composite(vec![
            NoiseSpec::Wiener { dim: 2 },
            NoiseSpec::CompensatedPoisson { rates: vec![5.0] },
        ]);
        let g = grid(200);
        let path = sample_noise(&spec, &g, 3);
        for k in 0..g.steps() {
            let m = path.qv_step(k);
            let min_eig = m.symmetric_eigen().eigenvalues.min();
            assert!(min_eig >= -1e-14, "step {k}: min eig {min_eig}");
        }
    }

    #[test]
    fn poisson_jump_log_matches_increments() {
        let g = grid(100);
        let rate = 4.0;
        let path = sample_noise(&NoiseSpec::CompensatedPoisson { rates: vec![rate] }, &g, 11);
        let dt = g.dt();
        let mut total_jumps = 0.0;
        for k in 0..g.steps() {
            let jumped: f64 = path.jumps_at_step(k).iter().map(|j| j.size).sum();
            let inc = path.increment(k)[0];
            assert!(
                (inc - (jumped - rate * dt)).abs() < 1e-15,
                "step {k}: increment {inc} vs jumps {jumped}"
            );
            // QV moves only by jumps.
            assert_eq!(path.qv_step(k)[(0, 0)], jumped);
            total_jumps += jumped;
        }
        assert!(total_jumps > 0.0);
    }

    #[test]
    fn step_change_is_zero_then_unit() {
        for seed in 0..50 {
            let g = grid(37);
            let path = sample_noise(&NoiseSpec::StepChange, &g, seed);
            let v = path.cumulative();
            assert_eq!(v.node(0)[0], 0.0);
            assert_eq!(v.node(g.steps())[0].abs(), 1.0);
            assert_eq!(path.jumps().len(), 1);
            let j = path.jumps()[0];
            // Flat before, flat after.
            for k in 0..=g.steps() {
                let expect = if k > j.step { j.size } else { 0.0 };
                assert_eq!(v.node(k)[0], expect);
            }
        }
    }

    #[test]
    fn gbm_martingale_increments_scale_with_level() {
        let g = grid(500);
        let path = sample_noise(&NoiseSpec::GbmMartingale { sigma: 0.3 }, &g, 5);
        // Reconstruct w and check each QV step is the squared increment.
        let mut w = 1.0;
        for k in 0..g.steps() {
            let inc = path.increment(k)[0];
            assert_eq!(path.qv_step(k)[(0, 0)], inc * inc);
            w += inc;
        }
        assert!(w.is_finite());
    }

    #[test]
    fn resample_after_cut_preserves_prefix_exactly() {
        let spec = NoiseSpec::Composite(vec![
            NoiseSpec::Wiener { dim: 1 },
            NoiseSpec::CompensatedPoisson { rates: vec![2.0] },
        ]);
        let g = grid(80);
        let a = sample_noise(&spec, &g, 21);
        let cut = 30;
        let b = a.resampled_after(&spec, cut, 9999);
        for k in 0..cut {
            assert_eq!(a.increment(k), b.increment(k));
            assert_eq!(a.jumps_at_step(k), b.jumps_at_step(k));
        }
        let differs = (cut..g.steps()).any(|k| a.increment(k) != b.increment(k));
        assert!(differs, "suffix should be resampled");
        assert_eq!(a.seed(), b.seed(), "companion stream must be preserved");
    }

    #[test]
    fn coarsened_rebins_the_same_draw() {
        let spec = NoiseSpec::Composite(vec![
            NoiseSpec::Wiener { dim: 2 },
            NoiseSpec::CompensatedPoisson { rates: vec![3.0] },
        ]);
        let g = grid(600);
        let fine = sample_noise(&spec, &g, 77);
        let coarse = fine.coarsened(10).unwrap();
        assert_eq!(coarse.grid().steps(), 60);
        assert_eq!(coarse.grid().horizon(), g.horizon());
        assert_eq!(coarse.seed(), fine.seed());
        // Cumulative values at shared nodes agree to rounding; each coarse
        // increment is the sum of ten fine ones.
        let vf = fine.cumulative();
        let vc = coarse.cumulative();
        for k in 0..=60 {
            for i in 0..3 {
                let diff = (vf.node(10 * k)[i] - vc.node(k)[i]).abs();
                assert!(diff < 1e-12, "node {k} comp {i}: gap {diff}");
            }
        }
        // Jump events survive with their sizes; QV is additive over bins.
        assert_eq!(fine.jumps().len(), coarse.jumps().len());
        let total: f64 = fine.jumps().iter().map(|j| j.size).sum();
        let total_c: f64 = coarse.jumps().iter().map(|j| j.size).sum();
        assert_eq!(total, total_c);
        for k in 0..60 {
            let jumped: f64 = coarse.jumps_at_step(k).iter().map(|j| j.size).sum();
            assert_eq!(coarse.qv_step(k)[(2, 2)], jumped);
        }
        let qf = fine.qv_running();
        let qc = coarse.qv_running();
        assert!((qf[600][(0, 0)] - qc[60][(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn coarsened_rejects_nondividing_factor() {
        let path = sample_noise(&NoiseSpec::Wiener { dim: 1 }, &grid(100), 1);
        assert!(path.coarsened(7).is_err());
        assert!(path.coarsened(0).is_err());
        assert!(path.coarsened(1).is_ok());
    }

    #[test]
    fn component_kinds_flatten_composites() {
        let spec = NoiseSpec::Composite(vec![
            NoiseSpec::Wiener { dim: 2 },
            NoiseSpec::Composite(vec![
                NoiseSpec::CompensatedPoisson { rates: vec![1.0, 2.0] },
                NoiseSpec::GbmMartingale { sigma: 0.1 },
            ]),
            NoiseSpec::StepChange,
        ]);
        use NoiseComponentKind::{Continuous, Jump};
        assert_eq!(
            spec.component_kinds(),
            vec![Continuous, Continuous, Jump, Jump, Continuous, Jump]
        );
        assert_eq!(spec.component_kinds().len(), spec.dim());
    }

    #[test]
    fn martingale_check_accepts_wiener_and_rejects_drift() {
        let g = grid(256);
        let ok = empirical_martingale_check(&NoiseSpec::Wiener { dim: 1 }, &g, 4000, 1).unwrap();
        assert!(ok.pass, "Wiener flagged: ratio {}", ok.max_abs_ratio);

        let bad = empirical_martingale_check(
            &NoiseSpec::WienerWithDrift { dim: 1, drift: 0.5 },
            &g,
            4000,
            1,
        )
        .unwrap();
        assert!(!bad.pass, "drift missed: ratio {}", bad.max_abs_ratio);
    }

    #[test]
    fn martingale_check_requires_enough_paths() {
        let g = grid(64);
        assert!(empirical_martingale_check(&NoiseSpec::Wiener { dim: 1 }, &g, 10, 0).is_err());
    }

    #[test]
    fn martingale_check_accepts_compensated_poisson_and_gbm() {
        let g = grid(128);
        let spec = NoiseSpec::CompensatedPoisson { rates: vec![2.0] };
        let r = empirical_martingale_check(&spec, &g, 3000, 7).unwrap();
        assert!(r.pass, "compensated Poisson flagged: {}", r.max_abs_ratio);

        let r = empirical_martingale_check(&NoiseSpec::GbmMartingale { sigma: 0.4 }, &g, 3000, 7).unwrap();
        assert!(r.pass, "GBM martingale flagged: {}", r.max_abs_ratio);
    }
}
