//! Pre-tuned new-classifier initialisation for class-incremental
//! segmentation on a synthetic pixel-embedding world.

pub mod app;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nest;
pub mod numerics;
pub mod report;
pub mod strategies;
pub mod synthdata;
pub mod trainer;
pub mod verify;

pub use error::{LabError, Result};
