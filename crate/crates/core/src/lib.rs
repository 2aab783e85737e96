//! Geometry-aware Transformer for molecular energy and force prediction.

pub mod attention;
pub mod autodiff;
pub mod data_io;
pub mod error;
pub mod geometry;
pub mod model;
pub mod params;
pub mod training;

pub use error::{Error, Result};

/// Formats a float with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
