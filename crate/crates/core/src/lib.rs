pub mod backbone;
pub mod clip;
pub mod error;
pub mod harness;
pub mod lora;
pub mod numerics;
pub mod objective;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
