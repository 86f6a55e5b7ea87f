//! Frequency-enhanced privacy-object detection at desk scale.

pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod freq;
pub mod gradsuite;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
