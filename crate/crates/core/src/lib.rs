//! Text-aware pre-training (TAP) for scene-text VQA and captioning.

pub mod cli;
pub mod config;
pub mod coref;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod rng;
pub mod sample;
pub mod spatial;
pub mod tensor;
pub mod text;
pub mod training;
mod work;

pub use error::{Result, TapError};
