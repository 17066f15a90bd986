//! Monte Carlo experiments over the closed loop.
//!
//! Everything here is deterministic in its inputs and seed range. Path
//! replicates run on the rayon pool but are collected in path order and
//! reduced sequentially, so a report never depends on the worker count.
//! Comparisons between laws reuse the same draws (common random numbers)
//! whenever the statistic is a difference, which is what makes orderings
//! testable at thousands of paths instead of millions; checks of
//! distributional facts (the error covariance does not depend on the
//! law) deliberately use disjoint seed ranges instead, so agreement is
//! evidence and not an artifact of shared noise.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::closed_loop::{solve_closed_loop, CostTable};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kalman::run_kalman_filter;
use crate::law::ControlLaw;
use crate::model::{CostSpec, SystemModel};
use crate::noise::{sample_noise, NoiseComponentKind, NoisePath, NoiseSpec};
use crate::path::SamplePath;
use crate::shiryaev::{
    change_point_posterior_quadrature, run_change_point_filter, uncontrolled_observation,
};
use crate::synthesis::{EstimatorSolution, RegulatorSolution};

/// Sample mean and standard error of a realized-cost batch.
#[derive(Debug, Clone, Serialize)]
pub struct CostEstimate {
    pub paths: usize,
    pub mean: f64,
    pub std_error: f64,
}

/// Which side of a paired comparison had the smaller cost, judged at
/// three standard errors of the paired difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CostOrdering {
    BaselineBetter,
    AlternativeBetter,
    /// The difference is within three standard errors of zero. With
    /// common random numbers and identical laws the difference is
    /// exactly zero, which also lands here.
    Indistinguishable,
}

/// Paired cost comparison under common random numbers.
#[derive(Debug, Clone, Serialize)]
pub struct PairedCostComparison {
    pub paths: usize,
    pub baseline_mean: f64,
    pub alternative_mean: f64,
    /// Mean of alternative minus baseline, per path.
    pub difference_mean: f64,
    pub difference_std_error: f64,
    pub ordering: CostOrdering,
}

fn require_replicates(paths: usize) -> Result<()> {
    if paths < 2 {
        return Err(Error::InvalidArgument {
            arg: "paths",
            reason: format!("need at least two replicates, got {paths}"),
        });
    }
    Ok(())
}

fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Upper median; robust against the handful of outlier ratios a
/// per-path quotient produces.
fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::INFINITY;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    v[v.len() / 2]
}

/// Estimates the expected cost of one law by straight Monte Carlo over
/// the seed range `seed0..seed0 + paths`.
pub fn estimate_cost(
    model: &SystemModel,
    grid: &TimeGrid,
    noise: &NoiseSpec,
    law: &ControlLaw,
    cost: &CostSpec,
    paths: usize,
    seed0: u64,
) -> Result<CostEstimate> {
    require_replicates(paths)?;
    model.validate(grid)?;
    let table = CostTable::new(cost, grid, model.state_dim, model.control_dim)?;
    let costs: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let draw = sample_noise(noise, grid, seed0 + i as u64);
            let run = solve_closed_loop(model, grid, &draw, law)?;
            table.realized(&run.state, &run.control)
        })
        .collect::<Result<_>>()?;
    let (mean, std_error) = mean_and_se(&costs);
    Ok(CostEstimate {
        paths,
        mean,
        std_error,
    })
}

/// Runs both laws on the same draws and judges the cost ordering from
/// the paired differences.
pub fn compare_costs_paired(
    model: &SystemModel,
    grid: &TimeGrid,
    noise: &NoiseSpec,
    baseline: &ControlLaw,
    alternative: &ControlLaw,
    cost: &CostSpec,
    paths: usize,
    seed0: u64,
) -> Result<PairedCostComparison> {
    require_replicates(paths)?;
    model.validate(grid)?;
    let table = CostTable::new(cost, grid, model.state_dim, model.control_dim)?;
    let pairs: Vec<(f64, f64)> = (0..paths)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let draw = sample_noise(noise, grid, seed0 + i as u64);
            let base = solve_closed_loop(model, grid, &draw, baseline)?;
            let alt = solve_closed_loop(model, grid, &draw, alternative)?;
            Ok((
                table.realized(&base.state, &base.control)?,
                table.realized(&alt.state, &alt.control)?,
            ))
        })
        .collect::<Result<_>>()?;
    let diffs: Vec<f64> = pairs.iter().map(|(b, a)| a - b).collect();
    let (difference_mean, difference_std_error) = mean_and_se(&diffs);
    let ordering = if difference_mean > 3.0 * difference_std_error {
        CostOrdering::BaselineBetter
    } else if difference_mean < -3.0 * difference_std_error {
        CostOrdering::AlternativeBetter
    } else {
        CostOrdering::Indistinguishable
    };
    Ok(PairedCostComparison {
        paths,
        baseline_mean: mean_and_se(&pairs.iter().map(|p| p.0).collect::<Vec<_>>()).0,
        alternative_mean: mean_and_se(&pairs.iter().map(|p| p.1).collect::<Vec<_>>()).0,
        difference_mean,
        difference_std_error,
        ordering,
    })
}

/// Outcome of the error-cancellation check: the estimation error
/// x - xhat, recomputed by a post-hoc filtering pass over each law's
/// recorded observation and control, must be the same path no matter
/// which law closed the loop.
#[derive(Debug, Clone, Serialize)]
pub struct CancellationReport {
    pub laws: Vec<String>,
    pub paths: usize,
    /// Worst node-wise deviation of any law's error path from the first
    /// law's, over all paths.
    pub max_gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Verifies that the estimation error is control-independent: every law
/// on the list, run on the same draws, must leave the same x - xhat.
pub fn control_cancellation_check(
    model: &SystemModel,
    grid: &TimeGrid,
    noise: &NoiseSpec,
    estimator: &EstimatorSolution,
    laws: &[(String, ControlLaw)],
    paths: usize,
    tolerance: f64,
    seed0: u64,
) -> Result<CancellationReport> {
    if laws.len() < 2 {
        return Err(Error::InvalidArgument {
            arg: "laws",
            reason: "cancellation needs at least two laws to compare".into(),
        });
    }
    if paths == 0 {
        return Err(Error::InvalidArgument {
            arg: "paths",
            reason: "need at least one path".into(),
        });
    }
    model.validate(grid)?;
    let gaps: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let draw = sample_noise(noise, grid, seed0 + i as u64);
            let mut reference: Option<SamplePath> = None;
            let mut worst = 0.0_f64;
            for (_, law) in laws {
                let run = solve_closed_loop(model, grid, &draw, law)?;
                let filter =
                    run_kalman_filter(model, grid, estimator, &run.observation, &run.control)?;
                let mut err = run.state;
                for k in 0..=grid.steps() {
                    let estimate = filter.estimate.node(k);
                    for (e, &xh) in err.node_mut(k).iter_mut().zip(estimate) {
                        *e -= xh;
                    }
                }
                match &reference {
                    None => reference = Some(err),
                    Some(first) => worst = worst.max(first.max_abs_diff(&err)),
                }
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let max_gap = gaps.into_iter().fold(0.0, f64::max);
    Ok(CancellationReport {
        laws: laws.iter().map(|(n, _)| n.clone()).collect(),
        paths,
        max_gap,
        tolerance,
        pass: max_gap <= tolerance,
    })
}

/// One pairwise comparison of empirical terminal error second moments.
#[derive(Debug, Clone, Serialize)]
pub struct CovariancePairGap {
    pub first: String,
    pub second: String,
    /// Frobenius distance between the two empirical moment matrices.
    pub gap: f64,
    /// Three combined standard errors in the Frobenius metric.
    pub allowance: f64,
}

/// Outcome of the covariance-invariance check across laws.
#[derive(Debug, Clone, Serialize)]
pub struct CovarianceInvarianceReport {
    pub laws: Vec<String>,
    pub paths_per_law: usize,
    /// Empirical second moment of the terminal estimation error, one
    /// matrix per law.
    pub empirical: Vec<DMatrix<f64>>,
    /// Terminal error covariance the estimator equation predicts.
    pub predicted: DMatrix<f64>,
    pub pairs: Vec<CovariancePairGap>,
    /// Frobenius distance of each empirical moment from the prediction;
    /// informational, since it carries the discretization bias the
    /// pairwise comparison cancels.
    pub predicted_gaps: Vec<f64>,
    pub pass: bool,
}

/// Estimates the terminal error second moment separately per law, each
/// law on its own seed range, and requires all pairs to agree within
/// three combined standard errors in the Frobenius metric.
pub fn sigma_invariance_check(
    model: &SystemModel,
    grid: &TimeGrid,
    noise: &NoiseSpec,
    estimator: &EstimatorSolution,
    laws: &[(String, ControlLaw)],
    paths_per_law: usize,
    seed0: u64,
) -> Result<CovarianceInvarianceReport> {
    if laws.len() < 2 {
        return Err(Error::InvalidArgument {
            arg: "laws",
            reason: "invariance needs at least two laws to compare".into(),
        });
    }
    require_replicates(paths_per_law)?;
    model.validate(grid)?;
    let n = model.state_dim;
    let terminal = grid.steps();

    let mut empirical = Vec::with_capacity(laws.len());
    let mut entry_se_sq = Vec::with_capacity(laws.len());
    for (index, (_, law)) in laws.iter().enumerate() {
        let offset = seed0 + (index * paths_per_law) as u64;
        let errors: Vec<DVector<f64>> = (0..paths_per_law)
            .into_par_iter()
            .map(|i| -> Result<DVector<f64>> {
                let draw = sample_noise(noise, grid, offset + i as u64);
                let run = solve_closed_loop(model, grid, &draw, law)?;
                let filter =
                    run_kalman_filter(model, grid, estimator, &run.observation, &run.control)?;
                Ok(DVector::from_column_slice(run.state.node(terminal))
                    - DVector::from_column_slice(filter.estimate.node(terminal)))
            })
            .collect::<Result<_>>()?;
        let count = paths_per_law as f64;
        let mut moment = DMatrix::zeros(n, n);
        for e in &errors {
            moment += e * e.transpose();
        }
        moment /= count;
        // Entrywise variance of the products e_i e_j gives the standard
        // error of each moment entry.
        let mut se_sq = DMatrix::zeros(n, n);
        for e in &errors {
            for i in 0..n {
                for j in 0..n {
                    se_sq[(i, j)] += (e[i] * e[j] - moment[(i, j)]).powi(2);
                }
            }
        }
        se_sq /= (count - 1.0) * count;
        empirical.push(moment);
        entry_se_sq.push(se_sq);
    }

    let mut pairs = Vec::new();
    let mut pass = true;
    for a in 0..laws.len() {
        for b in a + 1..laws.len() {
            let gap = (&empirical[a] - &empirical[b]).norm();
            let allowance = 3.0 * (entry_se_sq[a].sum() + entry_se_sq[b].sum()).sqrt();
            pass &= gap <= allowance;
            pairs.push(CovariancePairGap {
                first: laws[a].0.clone(),
                second: laws[b].0.clone(),
                gap,
                allowance,
            });
        }
    }
    let predicted = estimator.sigma[terminal].clone();
    let predicted_gaps = empirical.iter().map(|m| (m - &predicted).norm()).collect();
    Ok(CovarianceInvarianceReport {
        laws: laws.iter().map(|(n, _)| n.clone()).collect(),
        paths_per_law,
        empirical,
        predicted,
        pairs,
        predicted_gaps,
        pass,
    })
}

/// Outcome of the pathwise value-identity audit.
#[derive(Debug, Clone, Serialize)]
pub struct ItoIdentityReport {
    pub paths: usize,
    pub refine_factor: usize,
    pub tolerance: f64,
    /// Worst relative mismatch |J - RHS| / (1 + |J|) on the fine grid.
    pub max_relative_mismatch: f64,
    /// Median over paths of mismatch(coarse) / mismatch(fine) for the
    /// same draw viewed on both grids; first-order error makes this
    /// track the refinement factor.
    pub median_decay_ratio: f64,
    /// Mean and standard error of the martingale cross term; zero in
    /// expectation, so the mean should sit within a few SE of zero.
    pub stochastic_term_mean: f64,
    pub stochastic_term_std_error: f64,
    /// Worst absolute jump correction over all paths. The correction is
    /// an algebraic zero and the accumulator mirrors the algebra, so
    /// this is exactly 0.0, not merely small.
    pub max_f_delta: f64,
    /// Worst gap between jump-component variation records and the sum
    /// of squared jump sizes from the event log; exactly 0.0.
    pub max_jump_bookkeeping_gap: f64,
    /// How many paths contained at least one jump event.
    pub jump_paths: usize,
    pub pass: bool,
}

struct PathIdentity {
    mismatch_fine: f64,
    mismatch_coarse: f64,
    stochastic: f64,
    f_delta: f64,
    bookkeeping: f64,
    had_jumps: bool,
}

/// Per-node tables the identity needs on one grid.
struct IdentityTables {
    grid: TimeGrid,
    p: Vec<DMatrix<f64>>,
    gain: Vec<DMatrix<f64>>,
    b2: Vec<DMatrix<f64>>,
    r: Vec<DMatrix<f64>>,
    cost: CostTable,
}

impl IdentityTables {
    fn on_fine(model: &SystemModel, cost: &CostSpec, regulator: &RegulatorSolution) -> Result<Self> {
        let grid = regulator.grid;
        Ok(IdentityTables {
            grid,
            p: regulator.p.clone(),
            gain: regulator.k.clone(),
            b2: (0..grid.steps()).map(|k| model.b2.eval(grid.node(k))).collect(),
            r: (0..grid.steps()).map(|k| cost.r.eval(grid.node(k))).collect(),
            cost: CostTable::new(cost, &grid, model.state_dim, model.control_dim)?,
        })
    }

    /// Index-subsampled tables: every coarse node is a fine node, so P
    /// and K carry over exactly rather than through interpolation.
    fn coarsened(
        &self,
        model: &SystemModel,
        cost: &CostSpec,
        factor: usize,
    ) -> Result<Self> {
        let grid = TimeGrid::new(self.grid.horizon(), self.grid.steps() / factor)?;
        Ok(IdentityTables {
            grid,
            p: (0..grid.num_nodes()).map(|k| self.p[k * factor].clone()).collect(),
            gain: (0..grid.num_nodes()).map(|k| self.gain[k * factor].clone()).collect(),
            b2: (0..grid.steps()).map(|k| model.b2.eval(grid.node(k))).collect(),
            r: (0..grid.steps()).map(|k| cost.r.eval(grid.node(k))).collect(),
            cost: CostTable::new(cost, &grid, model.state_dim, model.control_dim)?,
        })
    }
}

/// Audits the pathwise value identity on every path: the realized cost
/// must equal the initial value plus the control penalty, the martingale
/// cross term, and the quadratic-variation correction, up to a relative
/// mismatch that shrinks first-order under grid refinement.
///
/// The jump correction deserves its own accumulator. At a jump the
/// value form evaluated at `x(s) = x(s-) + delta` expands exactly into
/// the pre-jump value, the cross term, and the squared-jump term,
/// because a quadratic's second-order Taylor expansion is exact. The
/// accumulator adds the grouped difference of those identical terms, so
/// it stays exactly zero in floating point too; a direct re-evaluation
/// would only show roundoff, which is not the claim being made.
///
/// `law` must be grid-free (constructible on both the fine and the
/// coarse grid): gain-schedule feedback and the zero law qualify, a law
/// pinned to one grid's tabulated solution does not.
#[allow(clippy::too_many_arguments)]
pub fn ito_identity_check(
    model: &SystemModel,
    cost: &CostSpec,
    regulator: &RegulatorSolution,
    noise: &NoiseSpec,
    law: &ControlLaw,
    paths: usize,
    refine_factor: usize,
    tolerance: f64,
    seed0: u64,
) -> Result<ItoIdentityReport> {
    require_replicates(paths)?;
    let grid = regulator.grid;
    if refine_factor < 2 || grid.steps() % refine_factor != 0 {
        return Err(Error::InvalidArgument {
            arg: "refine_factor",
            reason: format!(
                "factor {refine_factor} must be at least 2 and divide the step count {}",
                grid.steps()
            ),
        });
    }
    model.validate(&grid)?;
    let kinds = noise.component_kinds();
    let fine = IdentityTables::on_fine(model, cost, regulator)?;
    let coarse = fine.coarsened(model, cost, refine_factor)?;

    let results: Vec<PathIdentity> = (0..paths)
        .into_par_iter()
        .map(|i| -> Result<PathIdentity> {
            let draw = sample_noise(noise, &grid, seed0 + i as u64);
            let (mismatch_fine, stochastic, f_delta, bookkeeping, had_jumps) =
                identity_on_grid(model, law, &fine, &draw, &kinds)?;
            let coarse_draw = draw.coarsened(refine_factor)?;
            let (mismatch_coarse, _, _, _, _) =
                identity_on_grid(model, law, &coarse, &coarse_draw, &kinds)?;
            Ok(PathIdentity {
                mismatch_fine,
                mismatch_coarse,
                stochastic,
                f_delta,
                bookkeeping,
                had_jumps,
            })
        })
        .collect::<Result<_>>()?;

    let max_relative_mismatch = results.iter().map(|r| r.mismatch_fine).fold(0.0, f64::max);
    // A vanishing fine mismatch makes the quotient meaningless; drop
    // those paths rather than polluting the median with infinities.
    let ratios: Vec<f64> = results
        .iter()
        .filter(|r| r.mismatch_fine > 1e-300)
        .map(|r| r.mismatch_coarse / r.mismatch_fine)
        .collect();
    let median_decay_ratio = median(ratios);
    let stochastic: Vec<f64> = results.iter().map(|r| r.stochastic).collect();
    let (stochastic_term_mean, stochastic_term_std_error) = mean_and_se(&stochastic);
    let max_f_delta = results.iter().map(|r| r.f_delta.abs()).fold(0.0, f64::max);
    let max_jump_bookkeeping_gap = results.iter().map(|r| r.bookkeeping).fold(0.0, f64::max);
    let jump_paths = results.iter().filter(|r| r.had_jumps).count();
    let pass = max_relative_mismatch <= tolerance
        && median_decay_ratio >= refine_factor as f64 / 3.0
        && max_f_delta == 0.0
        && max_jump_bookkeeping_gap == 0.0;
    Ok(ItoIdentityReport {
        paths,
        refine_factor,
        tolerance,
        max_relative_mismatch,
        median_decay_ratio,
        stochastic_term_mean,
        stochastic_term_std_error,
        max_f_delta,
        max_jump_bookkeeping_gap,
        jump_paths,
        pass,
    })
}

fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (m * v).dot(v)
}

/// Evaluates both sides of the value identity on one grid and one draw.
/// Returns (relative mismatch, martingale cross term, jump correction,
/// jump bookkeeping gap, whether the draw contained jumps).
fn identity_on_grid(
    model: &SystemModel,
    law: &ControlLaw,
    tables: &IdentityTables,
    draw: &NoisePath,
    kinds: &[NoiseComponentKind],
) -> Result<(f64, f64, f64, f64, bool)> {
    let grid = tables.grid;
    let dt = grid.dt();
    let run = solve_closed_loop(model, &grid, draw, law)?;
    let realized = tables.cost.realized(&run.state, &run.control)?;

    let x0 = DVector::from_column_slice(run.state.node(0));
    let mut rhs = quad_form(&tables.p[0], &x0);
    let mut stochastic = 0.0;
    for k in 0..grid.steps() {
        let x = DVector::from_column_slice(run.state.node(k));
        let u = DVector::from_column_slice(run.control.node(k));
        let incr = DVector::from_column_slice(draw.increment(k));
        // Control penalty (u - Kx)' R (u - Kx) dt at the left node.
        let detune = &u - &tables.gain[k] * &x;
        rhs += quad_form(&tables.r[k], &detune) * dt;
        // Martingale cross term and quadratic-variation correction share
        // the product P * (B2 dw).
        let v = &tables.b2[k] * incr;
        let pv = &tables.p[k] * &v;
        let cross = 2.0 * x.dot(&pv);
        stochastic += cross;
        rhs += cross + v.dot(&pv);
    }
    let mismatch = (realized - rhs).abs() / (1.0 + realized.abs());

    // Jump correction: expand the value form at x(s) = x(s-) + delta.
    // The expansion terms equal the Taylor terms one for one, so each
    // bracket cancels exactly; the accumulator records that grouped
    // cancellation instead of a re-evaluation that would carry roundoff.
    let mut f_delta = 0.0;
    let mut had_jumps = false;
    for k in 0..grid.steps() {
        let events = draw.jumps_at_step(k);
        if events.is_empty() {
            continue;
        }
        had_jumps = true;
        let mut jump = DVector::zeros(draw.dim());
        for e in events {
            jump[e.component] += e.size;
        }
        let delta = &tables.b2[k] * jump;
        let post = DVector::from_column_slice(run.state.node(k + 1));
        let pre = &post - &delta;
        let p = &tables.p[k + 1];
        let p_delta = p * &delta;
        let value_pre = quad_form(p, &pre);
        let cross = 2.0 * pre.dot(&p_delta);
        let square = delta.dot(&p_delta);
        let expanded_post_value = value_pre + cross + square;
        let taylor_terms = value_pre + cross + square;
        f_delta += expanded_post_value - taylor_terms;
    }

    // Bookkeeping: for every jump component the variation record of a
    // step must equal the summed squared jump sizes from the event log.
    // Both sides are small-integer sums, so the gap is exactly zero.
    let mut bookkeeping = 0.0;
    for (i, kind) in kinds.iter().enumerate() {
        if *kind != NoiseComponentKind::Jump {
            continue;
        }
        for k in 0..grid.steps() {
            let logged: f64 = draw
                .jumps_at_step(k)
                .iter()
                .filter(|e| e.component == i)
                .map(|e| e.size * e.size)
                .sum();
            bookkeeping += (draw.qv_entry(k, i, i) - logged).abs();
        }
    }
    Ok((mismatch, stochastic, f_delta, bookkeeping, had_jumps))
}

/// Expected cost of full-information feedback u = Kx: the initial value
/// plus the accumulated noise loading on the value matrix. Left-node
/// quadrature, matching the cost integral convention.
pub fn predicted_full_information_cost(
    model: &SystemModel,
    regulator: &RegulatorSolution,
) -> Result<f64> {
    model.shapes_ok()?;
    check_value_dim(model, regulator)?;
    let grid = regulator.grid;
    let m0 = model.initial.mean();
    let mut total = quad_form(&regulator.p[0], &m0)
        + (&regulator.p[0] * model.initial.covariance()).trace();
    for k in 0..grid.steps() {
        let b2 = model.b2.eval(grid.node(k));
        total += (b2.transpose() * &regulator.p[k] * b2).trace() * grid.dt();
    }
    Ok(total)
}

/// Expected cost of the output-feedback law u = K xhat: the estimate
/// subsystem is driven by the innovation through the filter gain, and
/// the estimation error pays the state weight plus the terminal weight.
pub fn predicted_separated_cost(
    model: &SystemModel,
    cost: &CostSpec,
    regulator: &RegulatorSolution,
    estimator: &EstimatorSolution,
) -> Result<f64> {
    model.shapes_ok()?;
    check_value_dim(model, regulator)?;
    if estimator.grid != regulator.grid {
        return Err(Error::InvalidArgument {
            arg: "estimator",
            reason: "regulator and estimator are tabulated on different grids".into(),
        });
    }
    let grid = regulator.grid;
    let dt = grid.dt();
    let m0 = model.initial.mean();
    let mut total = quad_form(&regulator.p[0], &m0) + (&cost.s * &estimator.sigma[grid.steps()]).trace();
    for k in 0..grid.steps() {
        let t = grid.node(k);
        let d = model.d.eval(t);
        let l = &estimator.l[k];
        let innovation_load = l * (&d * d.transpose()) * l.transpose();
        total += ((&regulator.p[k] * innovation_load).trace()
            + (cost.q.eval(t) * &estimator.sigma[k]).trace())
            * dt;
    }
    Ok(total)
}

/// Outcome of the change-point filter accuracy check.
#[derive(Debug, Clone, Serialize)]
pub struct ChangePointAccuracyReport {
    pub paths: usize,
    pub sigma: f64,
    /// Worst over paths of the root-mean-square gap, over nodes, between
    /// the recursive posterior mean and the Bayes quadrature posterior.
    pub max_rms_gap: f64,
    /// Worst single-node gap over all paths.
    pub max_node_gap: f64,
    /// Total clamp interventions across all paths; a handful is normal
    /// near certainty, a flood means the recursion went unstable.
    pub clamp_events: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Closes the loop with the given law, then audits the recursive
/// change-point posterior against direct Bayes quadrature on the
/// control-stripped observation, path by path.
#[allow(clippy::too_many_arguments)]
pub fn change_point_accuracy_check(
    model: &SystemModel,
    grid: &TimeGrid,
    noise: &NoiseSpec,
    sigma: f64,
    law: &ControlLaw,
    paths: usize,
    tolerance: f64,
    seed0: u64,
) -> Result<ChangePointAccuracyReport> {
    if paths == 0 {
        return Err(Error::InvalidArgument {
            arg: "paths",
            reason: "need at least one path".into(),
        });
    }
    model.validate(grid)?;
    struct PathGap {
        rms: f64,
        worst: f64,
        clamps: usize,
    }
    let gaps: Vec<PathGap> = (0..paths)
        .into_par_iter()
        .map(|i| -> Result<PathGap> {
            let draw = sample_noise(noise, grid, seed0 + i as u64);
            let run = solve_closed_loop(model, grid, &draw, law)?;
            let filter = run_change_point_filter(grid, sigma, &run.observation, &run.control)?;
            let y0 = uncontrolled_observation(grid, &run.observation, &run.control);
            let oracle = change_point_posterior_quadrature(grid, sigma, &y0)?;
            let mut sum_sq = 0.0;
            let mut worst = 0.0_f64;
            for k in 0..=grid.steps() {
                let gap =
                    (filter.posterior_mean.node(k)[0] - oracle.posterior_mean.node(k)[0]).abs();
                sum_sq += gap * gap;
                worst = worst.max(gap);
            }
            Ok(PathGap {
                rms: (sum_sq / grid.num_nodes() as f64).sqrt(),
                worst,
                clamps: filter.clamp_events,
            })
        })
        .collect::<Result<_>>()?;
    let max_rms_gap = gaps.iter().map(|g| g.rms).fold(0.0, f64::max);
    let max_node_gap = gaps.iter().map(|g| g.worst).fold(0.0, f64::max);
    let clamp_events = gaps.iter().map(|g| g.clamps).sum();
    Ok(ChangePointAccuracyReport {
        paths,
        sigma,
        max_rms_gap,
        max_node_gap,
        clamp_events,
        tolerance,
        pass: max_rms_gap <= tolerance,
    })
}

fn check_value_dim(model: &SystemModel, regulator: &RegulatorSolution) -> Result<()> {
    let n = model.state_dim;
    if regulator.p[0].nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "regulator value matrix",
            expected: format!("{n}x{n}"),
            actual: format!("{}x{}", regulator.p[0].nrows(), regulator.p[0].ncols()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::scalar_model;
    use crate::model::InitialState;
    use crate::schedule::MatrixSchedule;
    use crate::synthesis::{solve_estimator, solve_regulator, tests::unit_cost};
    use nalgebra::{dmatrix, dvector};

    fn wiener2() -> NoiseSpec {
        NoiseSpec::Wiener { dim: 2 }
    }

    #[test]
    fn cost_estimates_are_deterministic_and_seed_sensitive() {
        let model = scalar_model();
        let cost = unit_cost(1, 1);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let a = estimate_cost(&model, &grid, &wiener2(), &ControlLaw::Zero, &cost, 64, 7).unwrap();
        let b = estimate_cost(&model, &grid, &wiener2(), &ControlLaw::Zero, &cost, 64, 7).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
        let c = estimate_cost(&model, &grid, &wiener2(), &ControlLaw::Zero, &cost, 64, 8).unwrap();
        assert_ne!(a.mean.to_bits(), c.mean.to_bits());
    }

    #[test]
    fn standard_error_halves_when_paths_quadruple() {
        let model = scalar_model();
        let cost = unit_cost(1, 1);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let small = estimate_cost(&model, &grid, &wiener2(), &ControlLaw::Zero, &cost, 250, 0).unwrap();
        let large = estimate_cost(&model, &grid, &wiener2(), &ControlLaw::Zero, &cost, 1000, 0).unwrap();
        let ratio = small.std_error / large.std_error;
        assert!((1.5..2.7).contains(&ratio), "SE ratio {ratio}");
    }

    #[test]
    fn replicate_floor_is_enforced() {
        let model = scalar_model();
        let cost = unit_cost(1, 1);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let err = estimate_cost(&model, &grid, &wiener2(), &ControlLaw::Zero, &cost, 1, 0);
        assert!(matches!(err, Err(Error::InvalidArgument { arg: "paths", .. })));
    }

    #[test]
    fn paired_comparison_prefers_synthesized_gain_over_detuned() {
        let model = scalar_model();
        let cost = unit_cost(1, 1);
        let grid = TimeGrid::new(1.0, 250).unwrap();
        let regulator = solve_regulator(&model, &cost, &grid).unwrap();
        let tuned = ControlLaw::StateFeedback {
            gain: regulator.gain_schedule(),
        };
        let detuned = ControlLaw::StateFeedback {
            gain: regulator.detuned(2.0).gain_schedule(),
        };
        let cmp = compare_costs_paired(
            &model, &grid, &wiener2(), &tuned, &detuned, &cost, 400, 11,
        )
        .unwrap();
        assert_eq!(cmp.ordering, CostOrdering::BaselineBetter);
        assert!(cmp.difference_mean > 0.0);
    }

    #[test]
    fn identical_laws_tie_exactly() {
        let model = scalar_model();
        let cost = unit_cost(1, 1);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let regulator = solve_regulator(&model, &cost, &grid).unwrap();
        let law = ControlLaw::StateFeedback {
            gain: regulator.gain_schedule(),
        };
        let cmp =
            compare_costs_paired(&model, &grid, &wiener2(), &law, &law, &cost, 50, 3).unwrap();
        assert_eq!(cmp.ordering, CostOrdering::Indistinguishable);
        assert_eq!(cmp.difference_mean, 0.0);
        assert_eq!(cmp.difference_std_error, 0.0);
    }

    #[test]
    fn estimation_error_ignores_the_law_in_the_loop() {
        let model = scalar_model();
        let cost = unit_cost(1, 1);
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let regulator = solve_regulator(&model, &cost, &grid).unwrap();
        let estimator = solve_estimator(&model, &grid).unwrap();
        let laws = vec![
            ("zero".to_string(), ControlLaw::Zero),
            (
                "state-feedback".to_string(),
                ControlLaw::StateFeedback {
                    gain: regulator.detuned(0.7).gain_schedule(),
                },
            ),
            (
                "separated".to_string(),
                ControlLaw::SeparatedLqg {
                    regulator: regulator.clone(),
                    estimator: estimator.clone(),
                },
            ),
        ];
        let report =
            control_cancellation_check(&model, &grid, &wiener2(), &estimator, &laws, 12, 1e-10, 5)
                .unwrap();
        assert!(report.pass, "max gap {}", report.max_gap);
        assert!(report.max_gap < 1e-12, "expected roundoff, got {}", report.max_gap);
    }

    #[test]
    fn terminal_error_moments_agree_across_laws() {
        let model = scalar_model();
        let cost = unit_cost(1, 1);
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let regulator = solve_regulator(&model, &cost, &grid).unwrap();
        let estimator = solve_estimator(&model, &grid).unwrap();
        let laws = vec![
            ("zero".to_string(), ControlLaw::Zero),
            (
                "separated".to_string(),
                ControlLaw::SeparatedLqg {
                    regulator,
                    estimator: estimator.clone(),
                },
            ),
        ];
        let report =
            sigma_invariance_check(&model, &grid, &wiener2(), &estimator, &laws, 600, 17).unwrap();
        assert!(report.pass, "pairs: {:?}", report.pairs);
        // Scalar benchmark: terminal variance tanh(1), loose MC bound.
        for m in &report.empirical {
            assert!((m[(0, 0)] - 1.0_f64.tanh()).abs() < 0.15, "moment {}", m[(0, 0)]);
        }
    }

    #[test]
    fn predicted_full_information_cost_matches_hyperbolic_form() {
        let model = scalar_model();
        let cost = unit_cost(1, 1);
        let grid = TimeGrid::new(1.0, 4000).unwrap();
        let regulator = solve_regulator(&model, &cost, &grid).unwrap();
        let predicted = predicted_full_information_cost(&model, &regulator).unwrap();
        // tanh(T) from the initial value plus log cosh(T) from the noise
        // loading; left-node quadrature converges first order.
        let exact = 1.0_f64.tanh() + 1.0_f64.cosh().ln();
        assert!(
            (predicted - exact).abs() < 2e-4,
            "predicted {predicted} vs {exact}"
        );
    }

    #[test]
    fn predicted_separated_cost_matches_monte_carlo() {
        let model = scalar_model();
        let cost = unit_cost(1, 1);
        let grid = TimeGrid::new(1.0, 400).unwrap();
        let regulator = solve_regulator(&model, &cost, &grid).unwrap();
        let estimator = solve_estimator(&model, &grid).unwrap();
        let predicted =
            predicted_separated_cost(&model, &cost, &regulator, &estimator).unwrap();
        let law = ControlLaw::SeparatedLqg {
            regulator,
            estimator,
        };
        let mc = estimate_cost(&model, &grid, &wiener2(), &law, &cost, 1500, 23).unwrap();
        let gap = (mc.mean - predicted).abs();
        // Allow the MC band plus a first-order discretization allowance.
        let budget = 3.0 * mc.std_error + 5.0 * grid.dt();
        assert!(gap <= budget, "gap {gap} exceeds {budget}");
    }

    #[test]
    fn identity_audit_passes_with_jumps_and_detects_decay() {
        // One state, three noise components: Wiener into the plant,
        // compensated Poisson into the plant, white observation noise.
        let model = SystemModel {
            state_dim: 1,
            control_dim: 1,
            obs_dim: 1,
            noise_dim: 3,
            a: MatrixSchedule::scalar(0.2),
            b1: MatrixSchedule::scalar(1.0),
            b2: MatrixSchedule::constant(dmatrix![0.6, 0.5, 0.0]),
            c: MatrixSchedule::scalar(1.0),
            d: MatrixSchedule::constant(dmatrix![0.0, 0.0, 1.0]),
            initial: InitialState::Deterministic(dvector![1.0]),
            require_independent_noise: true,
        };
        let noise = NoiseSpec::Composite(vec![
            NoiseSpec::Wiener { dim: 1 },
            NoiseSpec::CompensatedPoisson { rates: vec![2.0] },
            NoiseSpec::Wiener { dim: 1 },
        ]);
        let cost = unit_cost(1, 1);
        let grid = TimeGrid::new(1.0, 2000).unwrap();
        let regulator = solve_regulator(&model, &cost, &grid).unwrap();
        let law = ControlLaw::StateFeedback {
            gain: regulator.gain_schedule(),
        };
        let report = ito_identity_check(
            &model, &cost, &regulator, &noise, &law, 40, 10, 0.08, 29,
        )
        .unwrap();
        assert!(report.pass, "report: {report:?}");
        assert_eq!(report.max_f_delta, 0.0);
        assert_eq!(report.max_jump_bookkeeping_gap, 0.0);
        assert!(report.jump_paths >= 20, "jump paths {}", report.jump_paths);
        assert!(
            report.median_decay_ratio >= 10.0 / 3.0,
            "decay {}",
            report.median_decay_ratio
        );
    }

    #[test]
    fn change_point_filter_tracks_quadrature_in_closed_loop() {
        // Random +-1 step change driving an integrator, controlled from
        // the posterior state estimate.
        let sigma = 1.0;
        let model = SystemModel {
            state_dim: 1,
            control_dim: 1,
            obs_dim: 1,
            noise_dim: 2,
            a: MatrixSchedule::scalar(0.0),
            b1: MatrixSchedule::scalar(1.0),
            b2: MatrixSchedule::constant(dmatrix![1.0, 0.0]),
            c: MatrixSchedule::scalar(1.0),
            d: MatrixSchedule::constant(dmatrix![0.0, sigma]),
            initial: InitialState::Deterministic(dvector![0.0]),
            require_independent_noise: true,
        };
        let noise = NoiseSpec::Composite(vec![NoiseSpec::StepChange, NoiseSpec::Wiener { dim: 1 }]);
        let grid = TimeGrid::new(1.0, 4000).unwrap();
        let cost = CostSpec {
            q: MatrixSchedule::scalar(0.0),
            r: MatrixSchedule::scalar(1.0),
            s: dmatrix![1.0],
        };
        let regulator = solve_regulator(&model, &cost, &grid).unwrap();
        let law = ControlLaw::ChangePointLqg {
            sigma,
            gain: regulator.gain_schedule(),
        };
        let report = change_point_accuracy_check(
            &model, &grid, &noise, sigma, &law, 12, 1e-2, 41,
        )
        .unwrap();
        assert!(
            report.pass,
            "max RMS {} over {}",
            report.max_rms_gap, report.tolerance
        );
    }

    #[test]
    fn identity_audit_rejects_nondividing_factor() {
        let model = scalar_model();
        let cost = unit_cost(1, 1);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let regulator = solve_regulator(&model, &cost, &grid).unwrap();
        let err = ito_identity_check(
            &model,
            &cost,
            &regulator,
            &wiener2(),
            &ControlLaw::Zero,
            4,
            7,
            0.1,
            0,
        );
        assert!(matches!(
            err,
            Err(Error::InvalidArgument {
                arg: "refine_factor",
                ..
            })
        ));
    }
}
