//! Kinodynamic motion planning for a 3-D double integrator in voxel worlds.
//!
//! The pipeline has three stages:
//!
//! 1. [`kino_search`] — hybrid-state kinodynamic search that expands
//!    constant-input motion primitives over an occupancy grid, guided by a
//!    closed-form minimum-time heuristic and terminated early by an analytic
//!    expansion straight to the goal.
//! 2. [`traj_opt`] — gradient-based refinement of the interior control points
//!    of a cubic B-spline fitted to the searched path, trading off smoothness,
//!    clearance (queried from a Euclidean distance field) and soft dynamic
//!    limits.
//! 3. [`time_adjust`] — iterative non-uniform knot rescaling that squeezes
//!    infeasible velocity/acceleration control points back into limits
//!    without touching the control points themselves.
//!
//! [`replan`] wraps the pipeline in a receding-horizon mission simulator with
//! incremental sensing, and the `kinoplan` binary exposes world generation,
//! single-shot planning, statistics runs and mission simulation.

// `!(x > 0.0)` style comparisons reject NaN along with the out-of-range
// values, which is the point; indexed loops in the numeric kernels mirror
// the stencil math they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod bspline;
pub mod cli;
pub mod config;
pub mod distance_field;
pub mod kino_search;
pub mod replan;
pub mod time_adjust;
pub mod traj_opt;
pub mod voxel_map;

pub use bspline::BSplineTrajectory;
pub use distance_field::DistanceField;
pub use kino_search::{SearchConfig, SearchResult, State};
pub use voxel_map::{VoxelGrid, WorldSpec};

/// Crate-wide error type. Search failures keep their own enum
/// ([`kino_search::SearchFailure`]) because callers branch on the reason.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("world generation failed: {0}")]
    WorldGeneration(String),
    #[error("invalid spline: {0}")]
    InvalidSpline(String),
    #[error("spline fit failed: {0}")]
    Fit(String),
    #[error(transparent)]
    Search(#[from] kino_search::SearchFailure),
    #[error("config error: {0}")]
    Config(String),
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("map file: {0}")]
    MapFormat(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
