//! RAE-MEPC: multivariate time-series anomaly detection with a
//! multi-resolution ensemble recurrent autoencoder and predictive coding.
//!
//! The pipeline: sliding windows over a standardized series feed an
//! encoder built from sub-encoders at several temporal resolutions; a
//! reconstruction decoder rebuilds the window coarse-to-fine, and an
//! auxiliary prediction decoder forecasts the window half a length ahead.
//! Training minimizes reconstruction error plus a smoothed-DTW shape loss
//! and the prediction error. Anomalies are scored by the Mahalanobis
//! distance of reconstruction residuals under a Gaussian fitted on
//! validation residuals.

pub mod error;

pub mod diffcore;

pub mod cli;
pub mod config;
pub mod data;
pub mod detector;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod synth;
pub mod trainer;

pub use error::{RaemepcError, Result};
