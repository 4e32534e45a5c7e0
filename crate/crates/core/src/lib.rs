pub mod data;
pub mod encoder;
pub mod error;
pub mod grouping;
pub mod nn;
pub mod peft;
pub mod pipeline;
pub mod recsys;
pub mod seed;

pub use error::{Error, Result};
