//! Dual-branch semi-supervised recognizer for handwritten mathematical
//! expressions: a shared convolutional encoder feeding two attention decoders
//! with dynamic counting, trained with weak-to-strong cross pseudo-supervision.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod counting;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod schedule;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
