//! Site selection over an urban knowledge graph: graph construction,
//! embedding pre-training, relational encoding, path-attention decoding,
//! training, ranking metrics and explanation reports.
//!
//! Everything numeric is generic over [`numcore::Scalar`] (`f32` or `f64`);
//! the aliases below pin the `f64` instantiation used by the command line.

pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod explain;
pub mod model;
pub mod numcore;
pub mod pipeline;
pub mod pretrain;
pub mod synthcity;
pub mod trainer;
pub mod urbankg;

pub use error::{Error, Result};

pub type Real = f64;
pub type Tensor = numcore::Tensor<Real>;
pub type Model = model::KnowSite<Real>;
pub type Real32 = f32;
pub type Model32 = model::KnowSite<Real32>;
