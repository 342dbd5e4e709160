//! Boundary captioning on sampled video frames.

pub mod config;
pub mod corpus;
mod error;
pub mod fusion;
pub mod generation;
pub mod gradcheck;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod serialization;
pub mod text;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
