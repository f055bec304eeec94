//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: a [`Tape`] records the ops of one
//! forward pass, [`Tape::backward`] walks it in reverse, and parameters live
//! in a [`ParamStore`] that is shared into tapes without copying. Images use
//! the NCHW layout throughout.
//!
//! Everything runs single threaded in a fixed order, so results are bitwise
//! reproducible for identical inputs.

pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Adam, AdamConfig};
pub use params::{Bind, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
