pub mod audio;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod lm;
pub mod numeric;
pub mod resampler;
pub mod synth;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use numeric::{Tape, Tensor, Var};
