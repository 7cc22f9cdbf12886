//! Densely-connected Siamese tracker with a self-attention exemplar model.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod conformance;
pub mod crop;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod layers;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod sequence;
pub mod synth;
pub mod tensor;
pub mod tracking;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
