//! Block-wise masked diffusion token generation on a small transformer.

pub mod bench;
pub mod cli;
pub mod decode;
pub mod error;
pub mod masking;
pub mod ndcompute;
pub mod semantics;
pub mod synth;
pub mod talker;
pub mod train;

pub use error::{Error, Result};
