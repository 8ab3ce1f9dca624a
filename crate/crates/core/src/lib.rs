//! Temporal-consistency workbench for range-azimuth heatmap sequences.
//!
//! The crate is organised bottom-up:
//!
//! - [`heatmap`]: grids, poses, sequences, polar to Cartesian conversion
//! - [`simulator`]: synthetic worlds, trajectories, ideal rendering, degradation
//! - [`correlation`]: cross-correlation, separable softmax, displacement loss, scan matching
//! - [`fusion`]: proxy embeddings, temporal losses, windowed and convolutional fusion, trainer
//! - [`metrics`]: PSNR, Lucas-Kanade tracks, FVMD, peak distance, APE, occupancy IoU
//! - [`stats`]: Pearson, Spearman and Kendall correlation with p-values
//! - [`io`]: dataset container, reports and figure emitters
//! - [`pipeline`]: run configuration and the end-to-end stages used by the CLI

pub mod correlation;
pub mod error;
pub mod fusion;
pub mod heatmap;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
