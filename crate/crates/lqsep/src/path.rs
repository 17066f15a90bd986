//! Vector-valued sample paths on a grid.
//!
//! Paths are right-continuous on the grid: the stored value at node k is
//! the post-jump value, and the left limit at node k is by convention the
//! value at node k-1. Storage is one flat row-major buffer, node-major,
//! which keeps per-step simulation loops allocation-free.

use nalgebra::{DVector, DVectorView};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    grid: TimeGrid,
    dim: usize,
    /// len = (N + 1) * dim, node-major.
    values: Vec<f64>,
}

impl SamplePath {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        let values = vec![0.0; grid.num_nodes() * dim];
        Self { grid, dim, values }
    }

    pub fn from_values(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_nodes() * dim {
            return Err(Error::DimensionMismatch {
                context: "sample path buffer",
                expected: format!("{} values", grid.num_nodes() * dim),
                actual: format!("{}", values.len()),
            });
        }
        Ok(Self { grid, dim, values })
    }

    /// Build from a closure giving the value at each node.
    pub fn from_fn(grid: TimeGrid, dim: usize, mut f: impl FnMut(usize, f64) -> DVector<f64>) -> Self {
        let mut path = Self::zeros(grid, dim);
        for k in 0..grid.num_nodes() {
            let v = f(k, grid.node(k));
            path.node_mut(k).copy_from_slice(v.as_slice());
        }
        path
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn node_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn node_vector(&self, k: usize) -> DVectorView<'_, f64> {
        DVectorView::from_slice(self.node(k), self.dim)
    }

    /// Left limit at node k: the node k-1 value, and the node 0 value at
    /// k = 0.
    pub fn left_limit(&self, k: usize) -> &[f64] {
        self.node(k.saturating_sub(1))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Largest absolute difference over all nodes and components.
    pub fn max_abs_diff(&self, other: &SamplePath) -> f64 {
        assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Write `t,<name>_0,...,<name>_{d-1}` rows. Values are printed with
    /// Rust's shortest round-trip formatting, so reading the file back
    /// reproduces the exact binary doubles.
    pub fn write_csv<W: Write>(&self, name: &str, mut out: W) -> std::io::Result<()> {
        write!(out, "t")?;
        for i in 0..self.dim {
            write!(out, ",{name}_{i}")?;
        }
        writeln!(out)?;
        for k in 0..self.grid.num_nodes() {
            write!(out, "{}", self.grid.node(k))?;
            for v in self.node(k) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, name: &str, file: &Path) -> Result<()> {
        let io_err = |source| Error::Io {
            path: file.display().to_string(),
            source,
        };
        let f = std::fs::File::create(file).map_err(io_err)?;
        self.write_csv(name, std::io::BufWriter::new(f)).map_err(io_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 4).unwrap()
    }

    #[test]
    fn left_limit_is_previous_node() {
        let p = SamplePath::from_fn(grid(), 1, |k, _| dvector![k as f64]);
        assert_eq!(p.left_limit(0), &[0.0]);
        assert_eq!(p.left_limit(3), &[2.0]);
    }

    #[test]
    fn buffer_length_is_checked() {
        assert!(SamplePath::from_values(grid(), 2, vec![0.0; 7]).is_err());
        assert!(SamplePath::from_values(grid(), 2, vec![0.0; 10]).is_ok());
    }

    #[test]
    fn csv_round_trips_exact_doubles() {
        let p = SamplePath::from_fn(grid(), 2, |k, t| dvector![t * 0.1 + k as f64, -t / 3.0]);
        let mut buf = Vec::new();
        p.write_csv("x", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x_0,x_1");
        for (k, line) in lines.enumerate() {
            let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            assert_eq!(cells[0], p.grid().node(k));
            assert_eq!(&cells[1..], p.node(k));
        }
    }
}
