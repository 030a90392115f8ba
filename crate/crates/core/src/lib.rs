pub mod cli;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod lstm;
pub mod metrics;
pub mod models;
pub mod numkit;
pub mod params;
pub mod training;

pub use error::{Error, Result};
