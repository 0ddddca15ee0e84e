//! Proof-of-learning logs, proof-of-repudiation forging, and
//! membership-inference evaluation for small SGD-trained models.

pub mod attacks;
pub mod data;
pub mod error;
pub mod forge;
pub mod metrics;
pub mod model;
pub mod pol;
pub mod rng;

pub use data::{Dataset, ImageShape, MiniBatchSpec};
pub use error::{Error, Result};
pub use model::{Hyperparams, LrSchedule, ModelSpec, OptimizerState, ParamVector};
