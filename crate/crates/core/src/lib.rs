//! Self-distilled region proposal at desk scale.
//!
//! A synthetic teacher produces noisy response-to-image attention, the
//! pseudo-label pipeline turns it into sparse targets, a small transformer
//! student learns to predict RoI maps from token features, and the
//! post-processing stage converts predictions into token boxes.

pub mod error;
pub mod grid;
pub mod manifest;
pub mod noise;
pub mod pipeline;
pub mod postprocess;
pub mod pseudo_label;
pub mod rng;
pub mod student;
pub mod targets;
pub mod teacher;

pub use error::{Error, Result};
pub use grid::{read_grid, write_grid, DType, Grid, GridData};
pub use rng::RngStream;
