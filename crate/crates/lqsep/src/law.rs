//! Control laws and their per-path execution engines.
//!
//! A [`ControlLaw`] is a description; [`ControlLaw::engine`] validates it
//! against a model and grid and produces the stateful executor used by
//! the closed-loop solver. Engines read past data exclusively through a
//! [`LoopContext`], whose accessors refuse any index beyond the current
//! frontier, so a law that tries to look ahead fails with a causality
//! error instead of silently using future data.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::SystemModel;
use crate::path::SamplePath;
use crate::schedule::MatrixSchedule;
use crate::shiryaev::ChangePointFilter;
use crate::sim::{drift_gain_step, GridCoeffs};
use crate::synthesis::{EstimatorSolution, RegulatorSolution};
use crate::volterra::VolterraKernel;

/// Read-only window onto the loop data available at the current node.
pub struct LoopContext<'a> {
    node: usize,
    state: &'a SamplePath,
    observation: &'a SamplePath,
}

impl<'a> LoopContext<'a> {
    pub(crate) fn new(node: usize, state: &'a SamplePath, observation: &'a SamplePath) -> Self {
        LoopContext {
            node,
            state,
            observation,
        }
    }

    /// Current frontier node: data at indices <= node() is available.
    pub fn node(&self) -> usize {
        self.node
    }

    pub fn grid(&self) -> &TimeGrid {
        self.observation.grid()
    }

    pub fn time(&self) -> f64 {
        self.grid().node(self.node)
    }

    /// Observation record at a node up to the frontier.
    pub fn observation(&self, node: usize) -> Result<&[f64]> {
        self.guard(node)?;
        Ok(self.observation.node(node))
    }

    /// True state at a node up to the frontier; only full-information
    /// laws should use this.
    pub fn state(&self, node: usize) -> Result<&[f64]> {
        self.guard(node)?;
        Ok(self.state.node(node))
    }

    fn guard(&self, node: usize) -> Result<()> {
        if node > self.node {
            return Err(Error::CausalityViolation {
                what: format!(
                    "law asked for node {node} while the loop frontier is {}",
                    self.node
                ),
            });
        }
        Ok(())
    }

    /// Same data, earlier frontier; used to evaluate delayed laws.
    pub(crate) fn at_node(&self, node: usize) -> LoopContext<'a> {
        debug_assert!(node <= self.node);
        LoopContext {
            node,
            state: self.state,
            observation: self.observation,
        }
    }
}

/// Closure-backed law for tests and ad hoc experiments.
#[derive(Clone)]
pub struct CustomLaw(pub Arc<dyn Fn(&LoopContext<'_>) -> Result<DVector<f64>> + Send + Sync>);

impl std::fmt::Debug for CustomLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("CustomLaw(..)")
    }
}

#[derive(Debug, Clone)]
pub enum ControlLaw {
    /// u = 0.
    Zero,
    /// u = gain(t) x(t): reads the true state, so this is the
    /// full-information benchmark.
    StateFeedback { gain: MatrixSchedule },
    /// u_k = offset_k + sum_{j<k} F(t_k, t_j) (y_{j+1} - y_j): an affine
    /// causal functional of the observation record.
    KernelFeedback {
        offset: SamplePath,
        kernel: VolterraKernel,
    },
    /// Certainty-equivalence output feedback: the estimator recursion
    /// driven by the realized observations, fed through the regulator
    /// gains.
    SeparatedLqg {
        regulator: RegulatorSolution,
        estimator: EstimatorSolution,
    },
    /// Another law evaluated on data aged by at least `delay` (snapped up
    /// to whole steps); outputs zero until enough data exists.
    Delayed { inner: Box<ControlLaw>, delay: f64 },
    /// Scalar change-point setup: the nonlinear posterior-mean filter fed
    /// through a scalar gain schedule.
    ChangePointLqg { sigma: f64, gain: MatrixSchedule },
    /// Arbitrary context-reading law.
    Custom(CustomLaw),
}

impl ControlLaw {
    /// Validates the law against the model and grid and builds the
    /// per-path executor.
    pub(crate) fn engine(&self, model: &SystemModel, grid: &TimeGrid) -> Result<LawEngine> {
        let (n, m, p) = (model.state_dim, model.control_dim, model.obs_dim);
        match self {
            ControlLaw::Zero => Ok(LawEngine::Zero),
            ControlLaw::StateFeedback { gain } => {
                if gain.shape() != (m, n) {
                    return Err(Error::DimensionMismatch {
                        context: "state feedback gain",
                        expected: format!("{m}x{n}"),
                        actual: format!("{}x{}", gain.shape().0, gain.shape().1),
                    });
                }
                gain.validate_on(grid, "state feedback gain")?;
                let gains = (0..grid.num_nodes()).map(|k| gain.eval(grid.node(k))).collect();
                Ok(LawEngine::StateFeedback { gains })
            }
            ControlLaw::KernelFeedback { offset, kernel } => {
                if offset.grid() != grid || kernel.grid() != grid {
                    return Err(Error::InvalidArgument {
                        arg: "offset/kernel",
                        reason: "feedback tables and loop use different grids".into(),
                    });
                }
                if offset.dim() != m || kernel.block_shape() != (m, p) {
                    return Err(Error::DimensionMismatch {
                        context: "kernel feedback",
                        expected: format!("offset {m}, blocks {m}x{p}"),
                        actual: format!(
                            "offset {}, blocks {}x{}",
                            offset.dim(),
                            kernel.block_shape().0,
                            kernel.block_shape().1
                        ),
                    });
                }
                Ok(LawEngine::Kernel {
                    offset: offset.clone(),
                    kernel: kernel.clone(),
                })
            }
            ControlLaw::SeparatedLqg {
                regulator,
                estimator,
            } => {
                if regulator.grid != *grid || estimator.grid != *grid {
                    return Err(Error::InvalidArgument {
                        arg: "regulator/estimator",
                        reason: "gain tables were synthesized on a different grid".into(),
                    });
                }
                if regulator.k[0].shape() != (m, n) || estimator.l[0].shape() != (n, p) {
                    return Err(Error::DimensionMismatch {
                        context: "separated law gains",
                        expected: format!("K {m}x{n}, L {n}x{p}"),
                        actual: format!(
                            "K {}x{}, L {}x{}",
                            regulator.k[0].nrows(),
                            regulator.k[0].ncols(),
                            estimator.l[0].nrows(),
                            estimator.l[0].ncols()
                        ),
                    });
                }
                let coeffs = GridCoeffs::new(model, grid);
                Ok(LawEngine::Separated {
                    a: coeffs.a,
                    b1: coeffs.b1,
                    c: coeffs.c,
                    k_gain: regulator.k.clone(),
                    l_gain: estimator.l.clone(),
                    xh: model.initial.mean(),
                    u_prev: DVector::zeros(m),
                    scratch_n: DVector::zeros(n),
                    pred: DVector::zeros(p),
                    innov: DVector::zeros(p),
                    xh_next: DVector::zeros(n),
                })
            }
            ControlLaw::Delayed { inner, delay } => {
                if !(delay.is_finite() && *delay > 0.0) {
                    return Err(Error::InvalidArgument {
                        arg: "delay",
                        reason: format!("must be positive and finite, got {delay}"),
                    });
                }
                let lag = (delay / grid.dt()).ceil() as usize;
                let lag = lag.max(1);
                Ok(LawEngine::Delayed {
                    inner: Box::new(inner.engine(model, grid)?),
                    lag,
                })
            }
            ControlLaw::ChangePointLqg { sigma, gain } => {
                if n != 1 || m != 1 || p != 1 {
                    return Err(Error::InvalidArgument {
                        arg: "model",
                        reason: "the change-point law applies to scalar loops only".into(),
                    });
                }
                if gain.shape() != (1, 1) {
                    return Err(Error::DimensionMismatch {
                        context: "change-point gain",
                        expected: "1x1".into(),
                        actual: format!("{}x{}", gain.shape().0, gain.shape().1),
                    });
                }
                gain.validate_on(grid, "change-point gain")?;
                let gains = (0..grid.num_nodes())
                    .map(|k| gain.eval(grid.node(k))[(0, 0)])
                    .collect();
                Ok(LawEngine::ChangePoint {
                    filter: ChangePointFilter::new(*sigma, grid.horizon())?,
                    gains,
                    u_prev: 0.0,
                })
            }
            ControlLaw::Custom(custom) => Ok(LawEngine::Custom {
                f: custom.0.clone(),
                control_dim: m,
            }),
        }
    }
}

/// Stateful per-path executor. `control` is called once per node in
/// increasing order; engines with internal recursions (estimators)
/// consume the newest observation increment on each call.
pub(crate) enum LawEngine {
    Zero,
    StateFeedback {
        gains: Vec<DMatrix<f64>>,
    },
    Kernel {
        offset: SamplePath,
        kernel: VolterraKernel,
    },
    Separated {
        a: Vec<DMatrix<f64>>,
        b1: Vec<DMatrix<f64>>,
        c: Vec<DMatrix<f64>>,
        k_gain: Vec<DMatrix<f64>>,
        l_gain: Vec<DMatrix<f64>>,
        xh: DVector<f64>,
        u_prev: DVector<f64>,
        scratch_n: DVector<f64>,
        pred: DVector<f64>,
        innov: DVector<f64>,
        xh_next: DVector<f64>,
    },
    Delayed {
        inner: Box<LawEngine>,
        lag: usize,
    },
    ChangePoint {
        filter: ChangePointFilter,
        gains: Vec<f64>,
        u_prev: f64,
    },
    Custom {
        f: Arc<dyn Fn(&LoopContext<'_>) -> Result<DVector<f64>> + Send + Sync>,
        control_dim: usize,
    },
}

impl LawEngine {
    pub(crate) fn control(&mut self, ctx: &LoopContext<'_>, out: &mut DVector<f64>) -> Result<()> {
        let k = ctx.node();
        match self {
            LawEngine::Zero => {
                out.fill(0.0);
            }
            LawEngine::StateFeedback { gains } => {
                let x = ctx.state(k)?;
                out.gemv(
                    1.0,
                    &gains[k],
                    &DVectorView::from_slice(x, x.len()),
                    0.0,
                );
            }
            LawEngine::Kernel { offset, kernel } => {
                out.copy_from_slice(offset.node(k));
                let p = kernel.block_shape().1;
                let mut dy = DVector::zeros(p);
                for j in 0..k {
                    let next = ctx.observation(j + 1)?;
                    let prev = ctx.observation(j)?;
                    for i in 0..p {
                        dy[i] = next[i] - prev[i];
                    }
                    out.gemv(1.0, &kernel.block(k, j), &dy, 1.0);
                }
            }
            LawEngine::Separated {
                a,
                b1,
                c,
                k_gain,
                l_gain,
                xh,
                u_prev,
                scratch_n,
                pred,
                innov,
                xh_next,
            } => {
                if k > 0 {
                    // Fold in the newest observation increment with the
                    // control this engine emitted on the previous node.
                    let dt = ctx.grid().dt();
                    let j = k - 1;
                    pred.gemv(1.0, &c[j], xh, 0.0);
                    let y_next = ctx.observation(k)?;
                    let y_prev = ctx.observation(j)?;
                    for i in 0..pred.len() {
                        innov[i] = y_next[i] - y_prev[i] - pred[i] * dt;
                    }
                    drift_gain_step(
                        xh_next,
                        xh,
                        &a[j],
                        &b1[j],
                        &DVectorView::from_slice(u_prev.as_slice(), u_prev.len()),
                        dt,
                        &l_gain[j],
                        &DVectorView::from_slice(innov.as_slice(), innov.len()),
                        scratch_n,
                    );
                    std::mem::swap(xh, xh_next);
                }
                out.gemv(1.0, &k_gain[k], xh, 0.0);
                u_prev.copy_from(out);
            }
            LawEngine::Delayed { inner, lag } => {
                if k < *lag {
                    out.fill(0.0);
                } else {
                    inner.control(&ctx.at_node(k - *lag), out)?;
                }
            }
            LawEngine::ChangePoint {
                filter,
                gains,
                u_prev,
            } => {
                if k > 0 {
                    let j = k - 1;
                    let dy = ctx.observation(k)?[0] - ctx.observation(j)?[0];
                    filter.step(j, ctx.grid().node(j), ctx.grid().dt(), dy, *u_prev)?;
                }
                out[0] = gains[k] * filter.estimate();
                *u_prev = out[0];
            }
            LawEngine::Custom { f, control_dim } => {
                let u = f(ctx)?;
                if u.len() != *control_dim {
                    return Err(Error::DimensionMismatch {
                        context: "custom law output",
                        expected: format!("{control_dim} components"),
                        actual: format!("{} components", u.len()),
                    });
                }
                out.copy_from(&u);
            }
        }
        Ok(())
    }
}
