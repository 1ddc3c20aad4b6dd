//! Multi-task matching network for thermal-infrared single-object tracking.

pub mod backbone;
pub mod cli;
pub mod dataio;
pub mod evalkit;
pub mod error;
pub mod fanet;
pub mod heads;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod tracker;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
