//! Self-attentive factorized instance normalization (SAFIN) for arbitrary
//! style transfer, built on a small `f64` reverse-mode tensor engine and a
//! Haar-wavelet encoder-decoder.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod moments;
pub mod network;
pub mod rng;
pub mod stylization;
pub mod tape;
pub mod verify;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
