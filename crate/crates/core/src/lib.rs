//! Desk-scale laboratory for neuron-selective security tuning of a toy
//! transformer: gradient-based identification of security-critical neurons,
//! silhouette-gated clustering of those neurons, and cluster-tied selective
//! fine-tuning, evaluated on a synthetic secure/insecure code corpus with an
//! exact rule-based judge.

pub mod artifacts;
pub mod attribution;
pub mod clustering;
pub mod corpus;
pub mod error;
pub mod evalharness;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tiedtune;
pub mod tensor;

pub use error::{Error, Result};
