//! Visual-saliency prediction toolkit.
//!
//! A float64 reference implementation of a CNN + transformer saliency model
//! at configurable toy scale: a minimal tensor kernel layer with analytic
//! gradients, the data model for fixation and density maps, the six standard
//! saliency metrics, the four-term combined training loss, and a seeded
//! training harness with k-fold splits and an ablation grid.

pub mod data;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use tensor::{Tape, Tensor};
