//! Fitting quadric Gaussian surfels to posed images: configuration, data
//! loading, synthetic scenes, optimization, densification and metrics.

pub mod config;
pub mod dataset;
pub mod densify;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod optimizer;
pub mod render;
pub mod synth;
pub mod trainer;
