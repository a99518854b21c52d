//! Non-recurrent scene-text recognizer.
//!
//! A convolutional encoder produces a 2D feature map and a holistic vector;
//! an attention decoder (masked self-attention, 2D attention over the map,
//! point-wise feed-forward) reads characters out of it. Everything runs on a
//! small reverse-mode autodiff tape over 64-bit tensors.

pub mod bench;
pub mod bidir;
pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod image;
mod kernels;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tape::{NormMode, RunningStats, Tape, Var};
pub use tensor::Tensor;
