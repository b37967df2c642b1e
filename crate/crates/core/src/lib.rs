//! Weakly-supervised temporal action localization on precomputed segment
//! features.
//!
//! A model trained from video-level labels only produces per-segment class
//! activations; thresholding them yields timestamped detections, scored by
//! mAP at temporal IoU thresholds. The numeric core is generic over the
//! scalar type ([`numeric::Real`], implemented for `f32` and `f64`); the
//! aliases below fix it to one precision.

pub mod certify;
pub mod cli;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod localization;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod trainer;

pub use error::{Error, Result};

pub type MatrixF64 = numeric::Matrix<f64>;
pub type MatrixF32 = numeric::Matrix<f32>;
pub type ModelParamsF64 = model::ModelParams<f64>;
pub type ModelParamsF32 = model::ModelParams<f32>;
pub type ForwardCacheF64 = model::ForwardCache<f64>;
pub type LossReportF64 = losses::LossReport<f64>;
pub type AdamStateF64 = trainer::AdamState<f64>;
