//! Causal (Volterra) integral kernels on the grid and their resolvents.
//!
//! A kernel holds matrix blocks F(t_k, t_j) for j <= k. Two distinct
//! discrete objects are built from it:
//!
//! - [`VolterraKernel::resolvent`] collocates the resolvent equation
//!   R(t,s) = Q(t,s) + int_s^t R(t,tau) Q(tau,s) dtau with trapezoid
//!   quadrature; kernel values converge at second order in the step.
//! - [`VolterraKernel::induced_matrix`] assembles the dense
//!   block-triangular matrix of the induced operator
//!   (Q f)(t_k) = int_0^{t_k} Q(t_k, s) f(s) ds, and
//!   [`resolvent_of_induced`] inverts I - Q there, which satisfies the
//!   algebraic identity (I + R)(I - Q) = I to roundoff by construction.
//!
//! The two routes approximate the same continuous object and agree to
//! quadrature order, but no single collocation satisfies both the
//! pointwise kernel values and the discrete operator identity to
//! roundoff at once; callers pick the route matching what they need to
//! be exact.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Lower-triangular (including diagonal) block kernel on grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct VolterraKernel {
    grid: TimeGrid,
    block_rows: usize,
    block_cols: usize,
    /// Blocks (k, j) for j <= k, packed row-by-row, each column-major.
    data: Vec<f64>,
}

fn block_index(k: usize, j: usize) -> usize {
    debug_assert!(j <= k);
    k * (k + 1) / 2 + j
}

impl VolterraKernel {
    pub fn zeros(grid: TimeGrid, block_rows: usize, block_cols: usize) -> Self {
        let nodes = grid.num_nodes();
        let blocks = nodes * (nodes + 1) / 2;
        VolterraKernel {
            grid,
            block_rows,
            block_cols,
            data: vec![0.0; blocks * block_rows * block_cols],
        }
    }

    /// Samples `f(t, s)` at all node pairs t_k >= s_j.
    pub fn from_fn(
        grid: TimeGrid,
        block_rows: usize,
        block_cols: usize,
        mut f: impl FnMut(f64, f64) -> DMatrix<f64>,
    ) -> Result<Self> {
        let mut kernel = VolterraKernel::zeros(grid, block_rows, block_cols);
        for k in 0..grid.num_nodes() {
            for j in 0..=k {
                let block = f(grid.node(k), grid.node(j));
                if block.shape() != (block_rows, block_cols) {
                    return Err(Error::DimensionMismatch {
                        context: "kernel sampler",
                        expected: format!("{block_rows}x{block_cols}"),
                        actual: format!("{}x{}", block.nrows(), block.ncols()),
                    });
                }
                kernel.set_block(k, j, &block);
            }
        }
        Ok(kernel)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn block_shape(&self) -> (usize, usize) {
        (self.block_rows, self.block_cols)
    }

    fn block_slice(&self, k: usize, j: usize) -> &[f64] {
        let sz = self.block_rows * self.block_cols;
        let off = block_index(k, j) * sz;
        &self.data[off..off + sz]
    }

    fn block_slice_mut(&mut self, k: usize, j: usize) -> &mut [f64] {
        let sz = self.block_rows * self.block_cols;
        let off = block_index(k, j) * sz;
        &mut self.data[off..off + sz]
    }

    /// Block F(t_k, t_j), j <= k.
    pub fn block(&self, k: usize, j: usize) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(self.block_slice(k, j), self.block_rows, self.block_cols)
    }

    pub fn set_block(&mut self, k: usize, j: usize, value: &DMatrix<f64>) {
        self.block_slice_mut(k, j).copy_from_slice(value.as_slice());
    }

    pub fn max_block_diff(&self, other: &VolterraKernel) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Solves the resolvent equation by trapezoid collocation, marching
    /// each row k from the diagonal downward in j:
    /// R_kj (I - dt/2 Q_jj) = Q_kj + sum_{tau=j+1..k} w_tau R_ktau Q_tauj.
    /// Requires square blocks. Kernel values are O(dt^2) accurate.
    pub fn resolvent(&self) -> Result<VolterraKernel> {
        let d = self.block_rows;
        if self.block_cols != d {
            return Err(Error::InvalidArgument {
                arg: "kernel",
                reason: "resolvent needs square blocks".into(),
            });
        }
        let dt = self.grid.dt();
        let nodes = self.grid.num_nodes();

        // Right factors (I - dt/2 Q_jj)^{-1}, one per node.
        let mut right = Vec::with_capacity(nodes);
        for j in 0..nodes {
            let m = DMatrix::identity(d, d) - self.block(j, j) * (dt / 2.0);
            let inv = m.try_inverse().ok_or_else(|| Error::SynthesisFailure {
                node: j,
                what: "resolvent collocation factor is singular".into(),
            })?;
            right.push(inv);
        }

        let mut r = VolterraKernel::zeros(self.grid, d, d);
        let sz = d * d;
        let mut acc = vec![0.0; sz];
        let mut row_buf = vec![0.0; sz];
        for k in 0..nodes {
            r.block_slice_mut(k, k).copy_from_slice(self.block_slice(k, k));
            for j in (0..k).rev() {
                acc.copy_from_slice(self.block_slice(k, j));
                for tau in (j + 1)..=k {
                    let w = if tau == k { dt / 2.0 } else { dt };
                    // acc += w * R_ktau * Q_tauj without allocating.
                    gemm_acc(&mut acc, w, r.block_slice(k, tau), self.block_slice(tau, j), d);
                }
                row_buf.fill(0.0);
                gemm_acc(&mut row_buf, 1.0, &acc, right[j].as_slice(), d);
                r.block_slice_mut(k, j).copy_from_slice(&row_buf);
            }
        }
        Ok(r)
    }

    /// Dense matrix of the induced causal operator with trapezoid
    /// weights: block row k holds w_j Q(t_k, t_j) for j <= k, where
    /// w_0 = w_k = dt/2 and interior weights are dt. Row zero is empty
    /// (the integral from 0 to 0).
    pub fn induced_matrix(&self) -> DMatrix<f64> {
        let nodes = self.grid.num_nodes();
        let (r, c) = (self.block_rows, self.block_cols);
        let dt = self.grid.dt();
        let mut m = DMatrix::zeros(nodes * r, nodes * c);
        for k in 1..nodes {
            for j in 0..=k {
                let w = if j == 0 || j == k { dt / 2.0 } else { dt };
                let block = self.block(k, j);
                for col in 0..c {
                    for row in 0..r {
                        m[(k * r + row, j * c + col)] = w * block[(row, col)];
                    }
                }
            }
        }
        m
    }

    /// One CSV row per block: `k,j,t_k,t_j` then entries in column-major
    /// order, shortest round-trip formatting.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "k,j,t_k,t_j")?;
        for col in 0..self.block_cols {
            for row in 0..self.block_rows {
                write!(out, ",v_{row}_{col}")?;
            }
        }
        writeln!(out)?;
        for k in 0..self.grid.num_nodes() {
            for j in 0..=k {
                write!(out, "{k},{j},{},{}", self.grid.node(k), self.grid.node(j))?;
                for v in self.block_slice(k, j) {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, file: &Path) -> Result<()> {
        let f = std::fs::File::create(file).map_err(|source| Error::Io {
            path: file.display().to_string(),
            source,
        })?;
        let mut buf = std::io::BufWriter::new(f);
        self.write_csv(&mut buf).map_err(|source| Error::Io {
            path: file.display().to_string(),
            source,
        })?;
        buf.flush().map_err(|source| Error::Io {
            path: file.display().to_string(),
            source,
        })
    }

    /// Exact resolvent of the strictly lower block matrix whose (k, j)
    /// entry is this kernel's block, diagonal ignored: the strictly lower
    /// part of (I - K)^{-1} - I, built by forward substitution from
    /// R_kj = K_kj + sum_{tau=j+1..k-1} K_ktau R_tauj. Unlike
    /// [`VolterraKernel::resolvent`] there is no quadrature here; blocks
    /// are taken literally, with any step weights already folded in.
    pub fn discrete_resolvent(&self) -> Result<VolterraKernel> {
        let d = self.block_rows;
        if self.block_cols != d {
            return Err(Error::InvalidArgument {
                arg: "kernel",
                reason: "discrete resolvent needs square blocks".into(),
            });
        }
        let nodes = self.grid.num_nodes();
        let mut r = VolterraKernel::zeros(self.grid, d, d);
        let sz = d * d;
        let mut acc = vec![0.0; sz];
        for k in 1..nodes {
            for j in (0..k).rev() {
                acc.copy_from_slice(self.block_slice(k, j));
                for tau in (j + 1)..k {
                    gemm_acc(&mut acc, 1.0, self.block_slice(k, tau), r.block_slice(tau, j), d);
                }
                r.block_slice_mut(k, j).copy_from_slice(&acc);
            }
        }
        Ok(r)
    }

    /// out_k = sum_{j<k} K(k, j) z_j over all nodes, blocks taken
    /// literally (no quadrature weights). `z` is node-major with
    /// `block_cols` entries per node, `out` likewise with `block_rows`;
    /// node zero of `out` is set to zero.
    pub fn apply_strict(&self, z: &[f64], out: &mut [f64]) {
        let nodes = self.grid.num_nodes();
        let (r, c) = (self.block_rows, self.block_cols);
        assert_eq!(z.len(), nodes * c, "input length");
        assert_eq!(out.len(), nodes * r, "output length");
        out.fill(0.0);
        for k in 1..nodes {
            let out_k = &mut out[k * r..(k + 1) * r];
            for j in 0..k {
                gemv_acc(out_k, self.block_slice(k, j), &z[j * c..(j + 1) * c], r, c);
            }
        }
    }
}

/// out += block * x for one r x c column-major block.
fn gemv_acc(out: &mut [f64], block: &[f64], x: &[f64], r: usize, c: usize) {
    for col in 0..c {
        let xv = x[col];
        if xv != 0.0 {
            let bcol = &block[col * r..(col + 1) * r];
            for row in 0..r {
                out[row] += bcol[row] * xv;
            }
        }
    }
}

/// out += alpha * a * b, all d x d column-major slices.
fn gemm_acc(out: &mut [f64], alpha: f64, a: &[f64], b: &[f64], d: usize) {
    for col in 0..d {
        for inner in 0..d {
            let bv = alpha * b[col * d + inner];
            if bv != 0.0 {
                let a_col = &a[inner * d..(inner + 1) * d];
                let out_col = &mut out[col * d..(col + 1) * d];
                for row in 0..d {
                    out_col[row] += a_col[row] * bv;
                }
            }
        }
    }
}

/// Resolvent of the induced operator by direct inversion:
/// R = (I - Q)^{-1} - I on the dense node space. The algebraic identity
/// (I + R)(I - Q) = I then holds to rounding error, which is the route to
/// use when the identity itself is under test.
pub fn resolvent_of_induced(q_induced: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = q_induced.nrows();
    let m = DMatrix::identity(n, n) - q_induced;
    let inv = m.try_inverse().ok_or_else(|| Error::SynthesisFailure {
        node: 0,
        what: "I - Q is singular on the node space".into(),
    })?;
    Ok(inv - DMatrix::identity(n, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn constant_kernel_resolvent_is_exponential() {
        // Q(t,s) = c has resolvent R(t,s) = c e^{c (t-s)}.
        let c = 0.7;
        let g = grid(500);
        let q = VolterraKernel::from_fn(g, 1, 1, |_, _| DMatrix::from_element(1, 1, c)).unwrap();
        let r = q.resolvent().unwrap();
        let mut worst = 0.0_f64;
        for k in 0..g.num_nodes() {
            for j in 0..=k {
                let exact = c * (c * (g.node(k) - g.node(j))).exp();
                worst = worst.max((r.block(k, j)[(0, 0)] - exact).abs());
            }
        }
        assert!(worst < 1e-6, "kernel error {worst}");
    }

    #[test]
    fn difference_kernel_resolvent_shifts_the_rate() {
        // Q(t,s) = c e^{a(t-s)} has resolvent R(t,s) = c e^{(a+c)(t-s)}.
        let (a, c) = (0.3, 0.5);
        let g = grid(500);
        let q = VolterraKernel::from_fn(g, 1, 1, |t, s| {
            DMatrix::from_element(1, 1, c * (a * (t - s)).exp())
        })
        .unwrap();
        let r = q.resolvent().unwrap();
        let mut worst = 0.0_f64;
        for k in (0..g.num_nodes()).step_by(13) {
            for j in (0..=k).step_by(7) {
                let exact = c * ((a + c) * (g.node(k) - g.node(j))).exp();
                worst = worst.max((r.block(k, j)[(0, 0)] - exact).abs());
            }
        }
        assert!(worst < 1e-6, "kernel error {worst}");
    }

    #[test]
    fn kernel_error_decays_at_second_order() {
        let c = 0.7;
        let err = |n: usize| {
            let g = grid(n);
            let q =
                VolterraKernel::from_fn(g, 1, 1, |_, _| DMatrix::from_element(1, 1, c)).unwrap();
            let r = q.resolvent().unwrap();
            let k = g.num_nodes() - 1;
            let exact = c * (c * g.node(k)).exp();
            (r.block(k, 0)[(0, 0)] - exact).abs()
        };
        let ratio = err(50) / err(100);
        assert!(ratio > 3.0 && ratio < 5.0, "order ratio {ratio}");
    }

    #[test]
    fn nilpotent_block_kernel_is_its_own_resolvent() {
        // Q(t,s) = [[0, c], [0, 0]] squares to zero, so R = Q exactly,
        // and the collocation reproduces that without quadrature error.
        let g = grid(60);
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 0.4, 0.0, 0.0]);
        let q = VolterraKernel::from_fn(g, 2, 2, |_, _| b.clone()).unwrap();
        let r = q.resolvent().unwrap();
        assert!(q.max_block_diff(&r) < 1e-15);
    }

    #[test]
    fn zero_kernel_has_zero_resolvent() {
        let g = grid(20);
        let q = VolterraKernel::zeros(g, 1, 1);
        let r = q.resolvent().unwrap();
        assert_eq!(r, q);
    }

    #[test]
    fn induced_inversion_satisfies_operator_identity_to_roundoff() {
        let c = 0.7;
        let g = grid(200);
        let q = VolterraKernel::from_fn(g, 1, 1, |_, _| DMatrix::from_element(1, 1, c)).unwrap();
        let qm = q.induced_matrix();
        let r = resolvent_of_induced(&qm).unwrap();
        let n = qm.nrows();
        let residual = (DMatrix::identity(n, n) + &r) * (DMatrix::identity(n, n) - &qm)
            - DMatrix::identity(n, n);
        let worst = residual.abs().max();
        assert!(worst < 1e-12, "identity residual {worst}");
    }

    #[test]
    fn neumann_series_reconstructs_induced_resolvent() {
        // Independent construction: sum Q^m converges to (I-Q)^{-1} - I.
        let c = 0.7;
        let g = grid(120);
        let q = VolterraKernel::from_fn(g, 1, 1, |_, _| DMatrix::from_element(1, 1, c)).unwrap();
        let qm = q.induced_matrix();
        let r = resolvent_of_induced(&qm).unwrap();
        let n = qm.nrows();
        let mut power = qm.clone();
        let mut sum = DMatrix::zeros(n, n);
        for _ in 0..60 {
            sum += &power;
            power = &power * &qm;
        }
        let diff = (sum - r).abs().max();
        assert!(diff < 1e-8, "series vs inversion {diff}");
    }

    #[test]
    fn collocated_and_induced_routes_agree_to_quadrature_order() {
        let c = 0.7;
        let g = grid(200);
        let dt = g.dt();
        let q = VolterraKernel::from_fn(g, 1, 1, |_, _| DMatrix::from_element(1, 1, c)).unwrap();
        let r_kernel = q.resolvent().unwrap();
        let r_op = resolvent_of_induced(&q.induced_matrix()).unwrap();
        for &(k, j) in &[(150usize, 50usize), (199, 1), (100, 50)] {
            let from_op = r_op[(k, j)] / dt; // interior trapezoid weight
            let from_kernel = r_kernel.block(k, j)[(0, 0)];
            assert!(
                (from_op - from_kernel).abs() < 0.02,
                "({k},{j}): {from_op} vs {from_kernel}"
            );
        }
    }

    #[test]
    fn csv_export_lists_every_block() {
        let g = grid(4);
        let q = VolterraKernel::from_fn(g, 1, 2, |t, s| {
            DMatrix::from_row_slice(1, 2, &[t, s])
        })
        .unwrap();
        let mut buf = Vec::new();
        q.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "k,j,t_k,t_j,v_0_0,v_0_1");
        assert_eq!(lines.len(), 1 + 5 * 6 / 2);
        // Block (2,1): t = 0.5, s = 0.25.
        assert!(lines.iter().any(|l| l.starts_with("2,1,0.5,0.25,0.5,0.25")));
    }

    /// Pseudo-random but reproducible strictly lower kernel for the
    /// discrete resolvent tests; diagonal blocks filled with garbage to
    /// confirm they are ignored.
    fn messy_kernel(g: TimeGrid, d: usize) -> VolterraKernel {
        VolterraKernel::from_fn(g, d, d, |t, s| {
            DMatrix::from_fn(d, d, |r, c| {
                if t == s {
                    1e6
                } else {
                    ((37.0 * t + 13.0 * s + 5.0 * r as f64 + 3.0 * c as f64).sin()) * 0.4
                }
            })
        })
        .unwrap()
    }

    #[test]
    fn discrete_resolvent_inverts_the_strict_matrix() {
        let g = grid(40);
        let d = 2;
        let q = messy_kernel(g, d);
        let r = q.discrete_resolvent().unwrap();
        // Assemble both as dense strictly lower matrices and check
        // (I + R)(I - Q) = I entrywise.
        let nodes = g.num_nodes();
        let dense = |kern: &VolterraKernel| {
            let mut m = DMatrix::zeros(nodes * d, nodes * d);
            for k in 1..nodes {
                for j in 0..k {
                    let b = kern.block(k, j);
                    for c in 0..d {
                        for rr in 0..d {
                            m[(k * d + rr, j * d + c)] = b[(rr, c)];
                        }
                    }
                }
            }
            m
        };
        let qm = dense(&q);
        let rm = dense(&r);
        let n = qm.nrows();
        let residual = (DMatrix::identity(n, n) + rm) * (DMatrix::identity(n, n) - qm)
            - DMatrix::identity(n, n);
        let worst = residual.abs().max();
        assert!(worst < 1e-12, "identity residual {worst}");
    }

    #[test]
    fn discrete_resolvent_matches_neumann_powers_on_single_band() {
        // A kernel supported on the first subdiagonal only: powers shift
        // the band, so R(k, j) is the ordered product of band blocks.
        let g = grid(12);
        let mut q = VolterraKernel::zeros(g, 1, 1);
        for k in 1..g.num_nodes() {
            q.set_block(k, k - 1, &DMatrix::from_element(1, 1, 0.5 + 0.1 * k as f64));
        }
        let r = q.discrete_resolvent().unwrap();
        for k in 1..g.num_nodes() {
            for j in 0..k {
                let product: f64 = (j + 1..=k).map(|l| 0.5 + 0.1 * l as f64).product();
                assert!(
                    (r.block(k, j)[(0, 0)] - product).abs() < 1e-12,
                    "block ({k},{j})"
                );
            }
        }
    }

    #[test]
    fn apply_strict_matches_dense_product() {
        let g = grid(15);
        let d = 2;
        let q = messy_kernel(g, d);
        let nodes = g.num_nodes();
        let z: Vec<f64> = (0..nodes * d).map(|i| ((i * i) as f64 * 0.01).cos()).collect();
        let mut out = vec![0.0; nodes * d];
        q.apply_strict(&z, &mut out);
        for k in 0..nodes {
            let mut expect = DVector::zeros(d);
            for j in 0..k {
                expect.gemv(
                    1.0,
                    &q.block(k, j),
                    &nalgebra::DVectorView::from_slice(&z[j * d..(j + 1) * d], d),
                    1.0,
                );
            }
            for r in 0..d {
                assert!(
                    (out[k * d + r] - expect[r]).abs() < 1e-13,
                    "node {k} component {r}"
                );
            }
        }
    }
}
