//! Linear system and quadratic cost descriptions.
//!
//! The plant is
//!
//! ```text
//!     dx = A(t) x dt + B1(t) u dt + B2(t) dw
//!     dy = C(t) x dt + D(t) dw,          y(0) = 0
//! ```
//!
//! with `w` a q-dimensional martingale. The observation noise must be
//! nondegenerate: `D D'` has to be invertible at every node. The cost is
//!
//! ```text
//!     J(u) = E{ integral of x'Qx + u'Ru dt  +  x(T)' S x(T) }.
//! ```

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::schedule::MatrixSchedule;

/// Law of x(0). The Gaussian variant is zero-mean; a nonzero-mean Gaussian
/// can be expressed by shifting the deterministic part into the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialState {
    Deterministic(DVector<f64>),
    /// Zero mean, covariance `p0` (symmetric PSD).
    Gaussian { p0: DMatrix<f64> },
}

impl InitialState {
    pub fn dim(&self) -> usize {
        match self {
            InitialState::Deterministic(v) => v.len(),
            InitialState::Gaussian { p0 } => p0.nrows(),
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        match self {
            InitialState::Deterministic(v) => v.clone(),
            InitialState::Gaussian { p0 } => DVector::zeros(p0.nrows()),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match self {
            InitialState::Deterministic(v) => DMatrix::zeros(v.len(), v.len()),
            InitialState::Gaussian { p0 } => p0.clone(),
        }
    }

    /// Draw x(0). Deterministic laws ignore the generator; Gaussian laws
    /// map a standard normal vector through a symmetric square root of p0,
    /// which also covers singular covariances.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            InitialState::Deterministic(v) => v.clone(),
            InitialState::Gaussian { p0 } => {
                let n = p0.nrows();
                let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
                psd_sqrt(p0) * z
            }
        }
    }
}

/// Symmetric PSD square root via the spectral decomposition; eigenvalues
/// below zero (roundoff) are clamped.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub state_dim: usize,
    pub control_dim: usize,
    pub obs_dim: usize,
    pub noise_dim: usize,
    pub a: MatrixSchedule,
    pub b1: MatrixSchedule,
    pub b2: MatrixSchedule,
    pub c: MatrixSchedule,
    pub d: MatrixSchedule,
    pub initial: InitialState,
    /// When set, validation additionally requires B2(t) D(t)' = 0 at every
    /// node (plant and observation noises driven by independent blocks).
    pub require_independent_noise: bool,
}

/// Facts established by [`SystemModel::validate`], kept for reporting.
#[derive(Debug, Clone, Serialize)]
pub struct ModelDiagnostics {
    /// Worst conditioning of D D' over the grid.
    pub max_ddt_condition: f64,
}

const DDT_CONDITION_LIMIT: f64 = 1e12;

impl SystemModel {
    pub fn shapes_ok(&self) -> Result<()> {
        let (n, m, p, q) = (
            self.state_dim,
            self.control_dim,
            self.obs_dim,
            self.noise_dim,
        );
        let checks: [(&'static str, (usize, usize), (usize, usize)); 5] = [
            ("A", self.a.shape(), (n, n)),
            ("B1", self.b1.shape(), (n, m)),
            ("B2", self.b2.shape(), (n, q)),
            ("C", self.c.shape(), (p, n)),
            ("D", self.d.shape(), (p, q)),
        ];
        for (name, actual, expected) in checks {
            if actual != expected {
                return Err(Error::DimensionMismatch {
                    context: "system model schedule",
                    expected: format!("{name}: {}x{}", expected.0, expected.1),
                    actual: format!("{name}: {}x{}", actual.0, actual.1),
                });
            }
        }
        if self.initial.dim() != n {
            return Err(Error::DimensionMismatch {
                context: "initial state law",
                expected: format!("dim {n}"),
                actual: format!("dim {}", self.initial.dim()),
            });
        }
        Ok(())
    }

    /// Full validation on a grid: shapes, finiteness, D D' invertibility
    /// (worst condition number reported), initial covariance symmetry/PSD,
    /// and the independent-noise flag when set.
    pub fn validate(&self, grid: &TimeGrid) -> Result<ModelDiagnostics> {
        self.shapes_ok()?;
        self.a.validate_on(grid, "A")?;
        self.b1.validate_on(grid, "B1")?;
        self.b2.validate_on(grid, "B2")?;
        self.c.validate_on(grid, "C")?;
        self.d.validate_on(grid, "D")?;

        if let InitialState::Gaussian { p0 } = &self.initial {
            check_symmetric_psd(p0, "initial covariance", 0)?;
        }

        let mut max_cond: f64 = 1.0;
        for k in 0..=grid.steps() {
            let t = grid.node(k);
            let d = self.d.eval(t);
            let ddt = &d * d.transpose();
            let eig = ddt.symmetric_eigen().eigenvalues;
            let lo = eig.min();
            let hi = eig.max();
            if !(lo > 0.0) || hi / lo > DDT_CONDITION_LIMIT {
                return Err(Error::SynthesisFailure {
                    node: k,
                    what: format!(
                        "D D' is singular or ill-conditioned (eigenvalues in [{lo:.3e}, {hi:.3e}])"
                    ),
                });
            }
            max_cond = max_cond.max(hi / lo);

            if self.require_independent_noise {
                let b2 = self.b2.eval(t);
                let cross = &b2 * d.transpose();
                if cross.abs().max() > 1e-12 {
                    return Err(Error::InvalidArgument {
                        arg: "require_independent_noise",
                        reason: format!(
                            "B2 D' is nonzero at node {k} (max entry {:.3e})",
                            cross.abs().max()
                        ),
                    });
                }
            }
        }
        Ok(ModelDiagnostics {
            max_ddt_condition: max_cond,
        })
    }
}

/// Quadratic cost weights. `q` and `s` must be symmetric PSD, `r`
/// symmetric positive definite at every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub q: MatrixSchedule,
    pub r: MatrixSchedule,
    pub s: DMatrix<f64>,
}

/// Facts established by [`CostSpec::validate`].
#[derive(Debug, Clone, Serialize)]
pub struct CostDiagnostics {
    /// Smallest eigenvalue of R over the grid; must stay positive.
    pub min_r_eigenvalue: f64,
}

impl CostSpec {
    pub fn validate(&self, grid: &TimeGrid, state_dim: usize, control_dim: usize) -> Result<CostDiagnostics> {
        if self.q.shape() != (state_dim, state_dim) {
            return Err(Error::DimensionMismatch {
                context: "cost weight Q",
                expected: format!("{state_dim}x{state_dim}"),
                actual: format!("{}x{}", self.q.shape().0, self.q.shape().1),
            });
        }
        if self.r.shape() != (control_dim, control_dim) {
            return Err(Error::DimensionMismatch {
                context: "cost weight R",
                expected: format!("{control_dim}x{control_dim}"),
                actual: format!("{}x{}", self.r.shape().0, self.r.shape().1),
            });
        }
        if self.s.shape() != (state_dim, state_dim) {
            return Err(Error::DimensionMismatch {
                context: "terminal weight S",
                expected: format!("{state_dim}x{state_dim}"),
                actual: format!("{}x{}", self.s.nrows(), self.s.ncols()),
            });
        }
        check_symmetric_psd(&self.s, "terminal weight S", 0)?;

        let mut min_r = f64::INFINITY;
        for k in 0..=grid.steps() {
            let t = grid.node(k);
            check_symmetric_psd(&self.q.eval(t), "cost weight Q", k)?;
            let r = self.r.eval(t);
            let lo = check_symmetric(&r, "cost weight R", k)?;
            if lo <= 0.0 {
                return Err(Error::SynthesisFailure {
                    node: k,
                    what: format!("R is not positive definite (smallest eigenvalue {lo:.3e})"),
                });
            }
            min_r = min_r.min(lo);
        }
        Ok(CostDiagnostics {
            min_r_eigenvalue: min_r,
        })
    }
}

fn check_symmetric(m: &DMatrix<f64>, what: &str, node: usize) -> Result<f64> {
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-10 * (1.0 + m.abs().max()) {
        return Err(Error::SynthesisFailure {
            node,
            what: format!("{what} is not symmetric (asymmetry {asym:.3e})"),
        });
    }
    Ok(m.clone().symmetric_eigen().eigenvalues.min())
}

/// Symmetry plus eigenvalue floor `-1e-10 * (1 + max|entry|)`.
pub(crate) fn check_symmetric_psd(m: &DMatrix<f64>, what: &str, node: usize) -> Result<()> {
    let lo = check_symmetric(m, what, node)?;
    if lo < -1e-10 * (1.0 + m.abs().max()) {
        return Err(Error::SynthesisFailure {
            node,
            what: format!("{what} is not PSD (smallest eigenvalue {lo:.3e})"),
        });
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Workspace-wide scalar benchmark: integrator plant, state noise on
    /// the first component, unit observation noise on the second.
    pub(crate) fn scalar_model() -> SystemModel {
        SystemModel {
            state_dim: 1,
            control_dim: 1,
            obs_dim: 1,
            noise_dim: 2,
            a: MatrixSchedule::scalar(0.0),
            b1: MatrixSchedule::scalar(1.0),
            b2: MatrixSchedule::constant(dmatrix![1.0, 0.0]),
            c: MatrixSchedule::scalar(1.0),
            d: MatrixSchedule::constant(dmatrix![0.0, 1.0]),
            initial: InitialState::Deterministic(dvector![1.0]),
            require_independent_noise: true,
        }
    }

    #[test]
    fn scalar_benchmark_validates() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let diag = scalar_model().validate(&grid).unwrap();
        assert!((diag.max_ddt_condition - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_observation_noise_rejected() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let mut m = scalar_model();
        m.d = MatrixSchedule::constant(dmatrix![0.0, 0.0]);
        let err = m.validate(&grid).unwrap_err();
        assert!(matches!(err, Error::SynthesisFailure { .. }));
    }

    #[test]
    fn correlated_noise_flag_enforced() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let mut m = scalar_model();
        m.d = MatrixSchedule::constant(dmatrix![0.5, 1.0]);
        assert!(m.validate(&grid).is_err());
        m.require_independent_noise = false;
        assert!(m.validate(&grid).is_ok());
    }

    #[test]
    fn wrong_shapes_name_the_schedule() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let mut m = scalar_model();
        m.c = MatrixSchedule::constant(dmatrix![1.0, 0.0]);
        let err = m.validate(&grid).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("C"), "unexpected message: {msg}");
    }

    #[test]
    fn gaussian_draws_match_requested_covariance_in_law() {
        // Singular covariance: draws must stay in the span.
        let p0 = dmatrix![1.0, 1.0; 1.0, 1.0];
        let law = InitialState::Gaussian { p0 };
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x = law.sample(&mut rng);
            assert!((x[0] - x[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_validation_flags_indefinite_q() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let cost = CostSpec {
            q: MatrixSchedule::scalar(-1.0),
            r: MatrixSchedule::scalar(1.0),
            s: dmatrix![0.0],
        };
        assert!(cost.validate(&grid, 1, 1).is_err());
    }

    #[test]
    fn cost_validation_reports_min_r_eigenvalue() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let cost = CostSpec {
            q: MatrixSchedule::scalar(1.0),
            r: MatrixSchedule::polynomial(vec![dmatrix![2.0], dmatrix![1.0]]).unwrap(),
            s: dmatrix![0.0],
        };
        let diag = cost.validate(&grid, 1, 1).unwrap();
        assert!((diag.min_r_eigenvalue - 2.0).abs() < 1e-12);
    }
}
