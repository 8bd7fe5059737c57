pub mod audit;
pub mod config;
pub mod context_layer;
pub mod data;
pub mod distill_layer;
pub mod entity_layer;
pub mod error;
pub mod eval;
pub mod heads;
pub mod kg;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{KredError, Result};
