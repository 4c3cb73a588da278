//! Decoding of code-modulated visual evoked potentials.

pub mod containers;
pub mod decoder;
pub mod error;
pub mod filter;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod seed;
pub mod stimulus;
pub mod synth;
pub mod tdca;
pub mod transfer;
pub mod trf;

pub use error::{Error, Result};
