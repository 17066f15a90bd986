//! Skorohod-style distance between sampled cadlag paths.
//!
//! True Skorohod distance minimizes, over continuous time warps, the
//! larger of the time distortion and the value mismatch. On sampled
//! paths we restrict the warp to monotone alignments of grid nodes and
//! solve the resulting bottleneck assignment by dynamic programming:
//! matching node i of one path to node j of the other costs
//! `max(|t_i - s_j|, ||a_i - b_j||_inf)`, an alignment walks the lattice
//! from (0,0) to (N,M) by steps (1,0), (0,1), (1,1), and its cost is the
//! worst matched pair. This upper-bounds the continuous-time distance and
//! agrees with it up to one grid step, which is what makes it useful for
//! comparing a path against its jump-shifted variants: a unit step moved
//! by one node scores one time step instead of the unit sup distance.

use crate::error::{Error, Result};
use crate::path::SamplePath;

pub fn skorohod_distance(a: &SamplePath, b: &SamplePath) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: "skorohod distance",
            expected: format!("{} components", a.dim()),
            actual: format!("{} components", b.dim()),
        });
    }
    let n = a.grid().num_nodes();
    let m = b.grid().num_nodes();
    let cost = |i: usize, j: usize| -> f64 {
        let dt = (a.grid().node(i) - b.grid().node(j)).abs();
        let dv = a
            .node(i)
            .iter()
            .zip(b.node(j))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0_f64, f64::max);
        dt.max(dv)
    };

    // Bottleneck DP over the alignment lattice, rolling one row.
    let mut prev = vec![0.0_f64; m];
    let mut cur = vec![0.0_f64; m];
    prev[0] = cost(0, 0);
    for j in 1..m {
        prev[j] = prev[j - 1].max(cost(0, j));
    }
    for i in 1..n {
        cur[0] = prev[0].max(cost(i, 0));
        for j in 1..m {
            let reachable = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = reachable.max(cost(i, j));
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}
