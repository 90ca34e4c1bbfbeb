//! Finds maximally activating discrete text inputs ("neuron dreams") for neurons of
//! a two-path GRU caption model by gradient ascent over relaxed one-hot inputs, and
//! compares them against exhaustive corpus n-gram search.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix
//! the crate's default precision, `f64`.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod imaginet;
pub mod neurongroups;
pub mod optim;
pub mod scalar;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use imaginet::{Aggregation, Layer, ModelDims, NeuronTarget, Path};
pub use optim::{Method, WordMode};
pub use scalar::Scalar;
pub use vocab::Vocabulary;

/// Default precision.
pub type Real = f64;
pub type Matrix = tensor::Matrix<Real>;
pub type Tape<'w> = tensor::Tape<'w, Real>;
pub type ModelWeights = imaginet::ModelWeights<Real>;
pub type PathWeights = imaginet::PathWeights<Real>;
pub type GruParams = imaginet::GruParams<Real>;
