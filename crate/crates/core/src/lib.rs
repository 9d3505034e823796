pub mod calibrate;
pub mod data;
pub mod engine;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod mock_llm;
pub mod nn;
pub mod plfm;
pub mod residual;
pub mod spectral;
mod util;

pub use error::{Error, Result};
