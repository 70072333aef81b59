//! Low-rank adaptation of pretrained vision transformers for perceptual
//! prediction: image quality, memorability and evoked emotion.
pub mod backbone;
pub mod data;
pub mod error;
pub mod heads;
pub mod interpret;
pub mod metrics;
pub mod multi;
pub mod objectives;
pub mod trainer;
pub mod task;

pub use error::{Error, Result};
