//! Minimal reverse-mode automatic differentiation over `f32` tensors.

mod conv;
pub mod fft;
pub mod gradcheck;
mod norm;
pub mod optim;
mod tape;
mod tensor;

pub use norm::InstanceNormOut;
pub use optim::{adam_step, cosine_lr, Adam, AdamConfig, Moments};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::min_filter;
