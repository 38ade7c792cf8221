pub mod adaptation;
pub mod augment;
pub mod config;
pub mod autograd;
pub mod backbone;
pub mod data;
pub mod error;
pub mod inference;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod report;
pub mod s2match;

pub use error::{Error, Result};
