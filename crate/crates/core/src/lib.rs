//! Desk-scale task adaptation of a small ViT backbone under multiple
//! instance learning, trained with dual detached computation graphs, plus a
//! synthetic pathology pipeline and the verification harness around it.

pub mod ablate;
pub mod aggregator;
pub mod autograd;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod metrics;
pub mod optim;
pub mod probe;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
