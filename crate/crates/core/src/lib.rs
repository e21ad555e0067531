//! Contribution-based slicing of feed-forward neural networks.

pub mod apps;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod model;
pub mod parallel;
pub mod profile;
pub mod slicer;
pub mod tensor;
pub mod testkit;

pub use error::{Error, Result};
