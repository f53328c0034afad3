//! Symbolic coding of non-uniformly hyperbolic flows, built and checked on model suspensions.
//!
//! The crate follows one pipeline: a model flow, a proper section and its linear Poincaré
//! cocycle, Pesin frames and charts, an alphabet of double charts with its gpo graph,
//! admissible manifolds and shadowing, a Markov cover with its refinement, and finally the
//! topological Markov flow whose entropy is compared with the model.

pub mod charts;
pub mod gpo;
pub mod hyperbolicity;
pub mod linalg;
pub mod manifolds;
pub mod markov;
pub mod models;
pub mod sections;
pub mod symbolic;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("integration failure: {0}")]
    Integration(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("section error: {0}")]
    Section(String),
    #[error("horizon error: {0}")]
    Horizon(String),
    #[error("point rejected as not hyperbolic: {0}")]
    NonHyperbolic(String),
    #[error("reduction bound violated: {0}")]
    Reduction(String),
    #[error("graph transform error: {0}")]
    Transform(String),
    #[error("shadowing error: {0}")]
    Shadowing(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("window error: {0}")]
    Window(String),
    #[error("cover error: {0}")]
    Cover(String),
}

pub type Result<T> = std::result::Result<T, Error>;
