pub mod aio_hmm;
pub mod anticipation;
pub mod dataio;
pub mod error;
pub mod features;
pub mod fusion;
pub mod lstm;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod sample;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
