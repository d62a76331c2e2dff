//! Style/content disentanglement for keystroke inference from typing video,
//! with a two-style trajectory simulator, feature extraction, training and
//! the text metrics used to score recovered sentences.
//!
//! The numeric core is generic over [`Scalar`]; training runs in `f32` and
//! gradient checks in `f64`. The aliases below name the concrete types.

pub mod binio;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod scalar;
pub mod tensor;

pub mod featex;
pub mod framefile;
pub mod keyboard;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod simulator;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
/// Trained disentanglement model.
pub type Model = nets::DisentangleModel<f32>;
/// Double-precision model for finite-difference checks.
pub type Model64 = nets::DisentangleModel<f64>;
pub type Extractor = featex::FeatureExtractor<f32>;
