//! Instruction-prompted vision encoding, multi-turn visual token pruning and
//! interleaved decoder training, at a scale small enough to verify every
//! gradient by finite differences.

pub mod bridge;
pub mod data;
pub mod decoder;
pub mod error;
pub mod instruct;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod params;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
