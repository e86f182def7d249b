//! Self-supervised multi-label pretraining at desk scale: block-wise view
//! generation, an image-aware contrastive loss on top of a Siamese
//! objective, and a linear-probe evaluation harness.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`). The
//! aliases below fix the scalar for the common cases.

pub mod augment;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod rng;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};

pub type Tensor = numcore::Tensor<f64>;
pub type Graph = numcore::Graph<f64>;
pub type ModelState = model::ModelState<f64>;
pub type Trainer = train::Trainer<f64>;
pub type Checkpoint = train::Checkpoint<f64>;

pub type Tensor32 = numcore::Tensor<f32>;
pub type ModelState32 = model::ModelState<f32>;
pub type Trainer32 = train::Trainer<f32>;
pub type Checkpoint32 = train::Checkpoint<f32>;
