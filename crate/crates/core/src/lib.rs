//! Pure algorithmic core of a bidirectional-RWKV dual-tower contrastive
//! learner: dense tensors with reverse-mode gradients, token-shift and
//! decay operators, the bidirectional WKV kernel, image/text encoders,
//! the symmetric InfoNCE objective, the optimizer and schedule, and the
//! text/toy-data utilities used by the training pipeline.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, networking,
//! timing and the command line live in the `rwkv-clip` companion crate.

#![no_std]
// `!(x > 0.0)` is how the validators reject NaN along with non-positives
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod math;
pub mod model;
pub mod optim;
pub mod shift;
pub mod suite;
pub mod tensor;
pub mod wkv;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
