//! Selective classification toolkit.
//!
//! Trains small dense classifiers under cross-entropy, Deep Gamblers,
//! Self-Adaptive Training and SelectiveNet objectives (each optionally with
//! an entropy-minimization term), scores test samples with interchangeable
//! soft selection functions, calibrates a coverage threshold on held-out
//! data, and reports risk-coverage curves and score histograms.

pub mod calibration;
pub mod checkpoint;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod gradcheck;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod seed;
pub mod selection;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
