//! MoEMba: wavelet-modulated features, selective state-space experts and
//! sparse gating for multichannel sEMG gesture classification.

pub mod config;
pub mod error;
pub mod head;
pub mod model;
pub mod moe;
pub mod rng;
pub mod sigproc;
pub mod ssm;
pub mod tensor;
pub mod trainer;
pub mod wtfm;

pub use error::{Error, Result};
