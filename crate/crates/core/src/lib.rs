//! Heuristic object masking detector.

pub mod compute;
pub mod data;
pub mod detector;
mod error;
pub mod exec;
pub mod fusion;
pub mod geometry;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod postprocess;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
