//! Finite-horizon linear-quadratic-Gaussian synthesis, filtering, and
//! closed-loop simulation on explicit sample paths.
//!
//! The crate works pathwise on a fixed uniform grid: driving noise is
//! sampled (or supplied) as per-step increments with jump bookkeeping,
//! dynamics and observations evolve by left-point Euler stepping, and the
//! deterministic synthesis pieces (transition matrices, both Riccati
//! equations) are integrated with fixed-step RK4. Every random quantity
//! is reproducible from a single `u64` seed, independently of thread
//! count.
//!
//! Layout:
//! - [`grid`], [`schedule`], [`model`]: time axis, time-varying
//!   coefficient matrices, plant and cost descriptions.
//! - [`noise`], [`path`], [`sim`]: increment sampling, sample-path
//!   storage, open-loop propagation.
//! - [`synthesis`], [`kalman`]: regulator and estimator gains, and the
//!   estimate recursion over recorded data.
//! - [`law`], [`closed_loop`]: control laws behind a causality guard,
//!   loop simulation, realized cost, and the triangular kernel algebra
//!   that re-derives a loop pass without re-running it.
//! - [`experiments`]: seeded Monte Carlo studies over the loop: cost
//!   estimation, paired law comparisons, error-cancellation and
//!   covariance-invariance checks, the pathwise value-identity audit.
//! - [`volterra`], [`skorohod`]: causal kernels with their resolvents,
//!   and a jump-tolerant path distance.
//! - [`shiryaev`]: the nonlinear posterior filter for a single random
//!   step change.
//! - [`scenario`]: plain-text scenario documents, presets, and the batch
//!   runner that executes experiment suites and writes reports.

pub mod closed_loop;
pub mod error;
pub mod experiments;
pub mod grid;
mod integrate;
pub mod kalman;
pub mod law;
pub mod model;
pub mod noise;
pub mod path;
pub mod scenario;
pub mod schedule;
pub mod shiryaev;
pub mod sim;
pub mod skorohod;
pub mod synthesis;
pub mod volterra;

pub use closed_loop::{solve_closed_loop, ClosedLoopRun};
pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use law::ControlLaw;
pub use model::{CostSpec, InitialState, SystemModel};
pub use path::SamplePath;
pub use scenario::{run_scenario, Scenario, ScenarioReport, Verdict};
pub use schedule::MatrixSchedule;
