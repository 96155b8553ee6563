//! Gaze-regularized attention on a toy scale: gaze ingestion, fixation
//! heatmaps, flow-based occlusion checks, patch-level gaze distributions, a
//! small attention model with manual gradients, a pseudo-gaze predictor, a
//! synthetic planted-signal task and the train/eval pipeline around them.

pub mod container;
pub mod error;
pub mod flow;
pub mod gaze;
pub mod heatmap;
pub mod image;
pub mod linalg;
pub mod model;
pub mod patch;
pub mod pipeline;
pub mod pseudo;
pub mod synth;

pub use error::{Error, Result};
