//! Benchmark toolkit for VQA models that must abstain on unanswerable questions.
//!
//! The numeric parts (model, detectors, pseudo-UQ mixing) are generic over
//! [`Scalar`]; the aliases below fix the usual `f32` instantiation.

pub mod clipsel;
pub mod corpus;
pub mod detectors;
pub mod error;
pub mod lexicon;
pub mod metrics;
pub mod model;
pub mod pseudo;
pub mod scalar;
pub mod seed;
pub mod text;
pub mod uqgen;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Features = corpus::ObjectFeatures<f32>;
pub type Example = pseudo::Example<f32>;
pub type Model = model::Model<f32>;
pub type ModelParams = model::ModelParams<f32>;
pub type Store = model::Store<f32>;
