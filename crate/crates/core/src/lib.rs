//! Role-aware sentence encoder for intent classification and
//! out-of-distribution detection.

pub mod data;
pub mod detector;
pub mod encoder;
mod error;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod srl;
pub mod vocab;

pub use error::{Error, Result};
