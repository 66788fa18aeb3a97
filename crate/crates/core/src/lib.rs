//! Received-signal-strength positioning with wall-mounted mirror arrays.
//!
//! The crate simulates optical power measurements from ceiling LEDs that
//! reach a photodetector through tilted mirror elements, estimates the
//! receiver position under a correct or a misspecified orientation model,
//! and computes the matching performance bounds.

pub mod bounds;
pub mod calculus;
pub mod channel;
pub mod config;
pub mod error;
pub mod estimation;
pub mod geometry;
pub mod montecarlo;
pub mod scene;

pub use error::{Error, Result};
