pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod retrieval;
pub mod tensor;
pub mod vqa;

pub use config::Config;
pub use error::{Error, Result};
pub use model::RepsNet;
