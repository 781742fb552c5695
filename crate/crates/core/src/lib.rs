//! Text-prompted zero-shot segmentation with contrastively tuned dual encoders.

pub mod crf;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod fixtures;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod resunet;
pub mod retrieval;
pub mod saliency;
pub mod warning;
pub mod weak;

pub use error::{Error, Result};
