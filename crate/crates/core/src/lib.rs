pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod perturb;
pub mod pipeline;

pub use error::{Error, Result};
