//! Unsupervised multi-view stereo with a neural rendering consistency branch.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion_eval;
pub mod geometry;
pub mod imgproc;
pub mod losses;
pub mod renderer;
pub mod trainer;

pub use error::{Error, Result};
