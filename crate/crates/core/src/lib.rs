//! Conditional score-based generative sampling on slow manifolds and
//! bifurcation surfaces of dynamical systems.

pub mod cli;
pub mod data;
pub mod error;
pub mod linalg;
pub mod manifold;
pub mod nn;
pub mod pipeline;
pub mod score_mcs;
pub mod score_nn;
pub mod sde;
pub mod systems;

pub use data::SampleSet;
pub use error::{Error, Result};
