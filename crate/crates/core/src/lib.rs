//! Latent driving reasoning with a hierarchical parallel trajectory planner,
//! trained and evaluated in a synthetic 2-D driving world.

pub mod backbone;
pub mod config;
pub mod bench;
pub mod error;
pub mod eval;
pub mod model;
pub mod planner;
pub mod reasoner;
pub mod sim;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{Error, Result};
