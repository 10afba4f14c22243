//! Frequency-modulated visual restoration over nested token pyramids.

pub mod cli;
pub mod error;
pub mod flops;
pub mod fmt1;
pub mod fmvr;
pub mod gradcheck;
pub mod matryoshka;
pub mod mrl;
pub mod store;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use fmvr::{FmvrActivations, FmvrParams, Window};
pub use tensor::{ChannelVector, Tensor};
