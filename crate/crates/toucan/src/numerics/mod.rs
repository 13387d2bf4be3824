//! Dense tensors, deterministic RNG, and reverse-mode autodiff.
//!
//! This is the numeric substrate for the whole crate: f64 throughout (f32
//! only at the checkpoint boundary), single-threaded, and bit-reproducible.

pub mod gradcheck;
pub mod kernels;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use rng::RngState;
pub use tape::{Gradients, Tape, TensorId, UpsampledKind, UpsampledPos};
pub use tensor::Tensor;
