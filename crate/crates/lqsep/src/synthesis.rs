//! Gain synthesis: the backward regulator equation and the forward
//! estimator covariance equation.
//!
//! Both matrix equations are integrated with fixed-step RK4 on the grid,
//! the iterate is re-symmetrized after every step, and a PSD floor of
//! `-1e-10 * (1 + max|entry|)` is enforced at every node; crossing it is
//! reported as a synthesis failure rather than silently projected away.

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::integrate::rk4_step;
use crate::model::{check_symmetric_psd, CostSpec, SystemModel};
use crate::schedule::MatrixSchedule;

/// Backward Riccati solution: value matrix and state-feedback gain at
/// every node.
#[derive(Debug, Clone)]
pub struct RegulatorSolution {
    pub grid: TimeGrid,
    /// Symmetric PSD value matrix P, node-major (index 0 is t = 0).
    pub p: Vec<DMatrix<f64>>,
    /// Feedback gain at every node; the optimal input is u = K x.
    pub k: Vec<DMatrix<f64>>,
}

impl RegulatorSolution {
    /// Value of the quadratic form x' P(t_k) x.
    pub fn value(&self, node: usize, x: &nalgebra::DVector<f64>) -> f64 {
        (x.transpose() * &self.p[node] * x)[(0, 0)]
    }

    /// The tabulated gain as a schedule, exact at every grid node, so a
    /// state-feedback law can carry the synthesized gains.
    pub fn gain_schedule(&self) -> MatrixSchedule {
        let knots = (0..self.grid.num_nodes())
            .map(|node| (self.grid.node(node), self.k[node].clone()))
            .collect();
        MatrixSchedule::table(knots).expect("gain table has a knot per node")
    }

    /// A copy with every gain scaled by `factor` and the value matrix
    /// left alone. Deliberately suboptimal: cost comparisons use these
    /// perturbed laws as the lose-to baseline.
    pub fn detuned(&self, factor: f64) -> RegulatorSolution {
        RegulatorSolution {
            grid: self.grid,
            p: self.p.clone(),
            k: self.k.iter().map(|k| k * factor).collect(),
        }
    }
}

/// Forward Riccati solution: error covariance and innovation gain at
/// every node.
#[derive(Debug, Clone)]
pub struct EstimatorSolution {
    pub grid: TimeGrid,
    /// Symmetric PSD error covariance, node-major.
    pub sigma: Vec<DMatrix<f64>>,
    /// Innovation gain at every node.
    pub l: Vec<DMatrix<f64>>,
}

fn chol_or_fail(m: DMatrix<f64>, what: &str, node: usize) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::SynthesisFailure {
        node,
        what: format!("{what} is not positive definite"),
    })
}

/// Integrates the regulator equation backward from the terminal weight
/// and tabulates P and K = -R^{-1} B1' P at every node.
pub fn solve_regulator(
    model: &SystemModel,
    cost: &CostSpec,
    grid: &TimeGrid,
) -> Result<RegulatorSolution> {
    model.shapes_ok()?;
    cost.validate(grid, model.state_dim, model.control_dim)?;
    let n_nodes = grid.num_nodes();
    let horizon = grid.horizon();
    let mut p_nodes = vec![DMatrix::zeros(0, 0); n_nodes];
    p_nodes[n_nodes - 1] = cost.s.clone();

    // March in reversed time tau = T - t so RK4 runs forward.
    let mut rhs = |tau: f64, p: &DMatrix<f64>| -> DMatrix<f64> {
        let t = horizon - tau;
        let a = model.a.eval(t);
        let b1 = model.b1.eval(t);
        let q = cost.q.eval(t);
        let r = cost.r.eval(t);
        let chol = Cholesky::new(r).expect("R positive definite on the grid");
        let quad = &b1 * chol.solve(&(b1.transpose() * p));
        a.transpose() * p + p * a - p * quad + q
    };
    let dt = grid.dt();
    let mut p = cost.s.clone();
    for j in 0..grid.steps() {
        p = rk4_step(&mut rhs, grid.node(j), &p, dt);
        p = (&p + p.transpose()) * 0.5;
        let node = grid.steps() - 1 - j;
        check_symmetric_psd(&p, "regulator value matrix", node)?;
        p_nodes[node] = p.clone();
    }

    let mut k_nodes = Vec::with_capacity(n_nodes);
    for node in 0..n_nodes {
        let t = grid.node(node);
        let b1 = model.b1.eval(t);
        let chol = chol_or_fail(cost.r.eval(t), "control weight", node)?;
        k_nodes.push(-chol.solve(&(b1.transpose() * &p_nodes[node])));
    }
    Ok(RegulatorSolution {
        grid: *grid,
        p: p_nodes,
        k: k_nodes,
    })
}

/// Integrates the estimator covariance forward from the initial state
/// covariance and tabulates Sigma and the innovation gain
/// L = (Sigma C' + B2 D') (D D')^{-1} at every node. Correlated state
/// and observation noise (B2 D' nonzero) is handled.
pub fn solve_estimator(model: &SystemModel, grid: &TimeGrid) -> Result<EstimatorSolution> {
    model.shapes_ok()?;
    let n_nodes = grid.num_nodes();
    let mut rhs = |t: f64, s: &DMatrix<f64>| -> DMatrix<f64> {
        let a = model.a.eval(t);
        let b2 = model.b2.eval(t);
        let c = model.c.eval(t);
        let d = model.d.eval(t);
        let cross = s * c.transpose() + &b2 * d.transpose();
        let chol = Cholesky::new(&d * d.transpose()).expect("DD' positive definite on the grid");
        &a * s + s * a.transpose() + &b2 * b2.transpose()
            - &cross * chol.solve(&cross.transpose())
    };

    let mut sigma_nodes = Vec::with_capacity(n_nodes);
    let mut s = model.initial.covariance();
    check_symmetric_psd(&s, "initial covariance", 0)?;
    sigma_nodes.push(s.clone());
    let dt = grid.dt();
    for j in 0..grid.steps() {
        s = rk4_step(&mut rhs, grid.node(j), &s, dt);
        s = (&s + s.transpose()) * 0.5;
        check_symmetric_psd(&s, "estimator covariance", j + 1)?;
        sigma_nodes.push(s.clone());
    }

    let mut l_nodes = Vec::with_capacity(n_nodes);
    for node in 0..n_nodes {
        let t = grid.node(node);
        let c = model.c.eval(t);
        let d = model.d.eval(t);
        let cross = &sigma_nodes[node] * c.transpose() + model.b2.eval(t) * d.transpose();
        let chol = chol_or_fail(&d * d.transpose(), "observation noise covariance", node)?;
        l_nodes.push(chol.solve(&cross.transpose()).transpose());
    }
    Ok(EstimatorSolution {
        grid: *grid,
        sigma: sigma_nodes,
        l: l_nodes,
    })
}
