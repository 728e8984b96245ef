//! Offline multi-object tracking on tracklet graphs.
//!
//! The pipeline has three stages:
//!
//! 1. [`assoc`] chains per-frame detections into tracklets, optionally
//!    compensating camera motion with two-view epipolar geometry from
//!    [`geometry`].
//! 2. [`net`] scores the connectivity of every tracklet pair with a
//!    multi-scale time-domain convolutional network.
//! 3. [`cluster`] partitions the tracklet graph by greedy local search on
//!    a log-odds edge cost and emits gap-filled trajectories.
//!
//! [`metrics`] evaluates results (MOTA / IDF1), [`synth`] generates
//! deterministic synthetic sequences with ground truth, and [`io`] /
//! [`config`] handle MOTChallenge-style files and run configuration.

pub mod assign;
pub mod assoc;
pub mod cluster;
pub mod config;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod types;

pub use types::{AppearanceFeature, BoundingBox, Detection, FrameMeta, Tracklet};
