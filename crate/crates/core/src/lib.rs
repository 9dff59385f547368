//! Training framework for image, tabular, and mixed-modality models.
//!
//! The crate is organized bottom up: [`tensor`] holds the differentiable
//! array type, its operations, optimizers, and a finite-difference gradient
//! checker. Higher layers (data loading, model assembly, losses, metrics,
//! and the training loop) build on it.

pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod task;
pub mod train;
pub mod tensor;
