//! Crowd-sourced lane-level map fusion.
//!
//! Lane lines are uniform quadratic B-splines whose control points carry
//! Gaussian uncertainty. The library covers the full pipeline:
//!
//! * [`spline`] — the trajectory representation and uncertainty-aware
//!   interpolation;
//! * [`estimator`] — recursive single-drive lane estimation from noisy
//!   detections under a Poisson clutter model;
//! * [`se3`] / [`pose_graph`] — multi-drive alignment with odometry, GNSS,
//!   sign landmarks, and lane-registration loop closures;
//! * [`fusion`] — pairwise Bayesian fusion of overlapping lane lines in
//!   information form, including partial-overlap splitting and joining;
//! * [`map_fusion`] — greedy multi-lane fusion across whole drive maps with
//!   relative-error covariance inflation;
//! * [`sim`] — synthetic scenarios and drive simulation;
//! * [`metrics`] — absolute/relative accuracy evaluation;
//! * [`io`] — versioned JSON map exchange files, TOML scenario specs, and
//!   GeoJSON export.

pub mod error;
pub mod estimator;
pub mod fusion;
pub mod io;
pub mod map_fusion;
pub mod metrics;
pub mod pipeline;
pub mod pose_graph;
pub mod se3;
pub mod sim;
pub mod spline;

pub use error::{Error, Result};
