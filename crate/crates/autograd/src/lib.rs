//! Reverse-mode automatic differentiation over dynamic `f64` arrays.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s; calling
//! [`Tape::backward`] on a scalar result walks the recorded graph in
//! reverse and accumulates gradients for every leaf that requires them.
//! Tapes are cheap and short-lived: training loops build one per
//! optimization step, read the gradients, and drop it.
//!
//! The op set is the one the image models need: elementwise arithmetic,
//! reductions, matrix multiply, row/label gathers, log-softmax, 2-D
//! convolution (im2col), nearest-neighbor upsampling, reflect padding,
//! pooling, and the per-channel broadcasts batch normalization is built
//! from. Layer structs ([`nn`]) own their parameters as plain arrays and
//! bind them onto a tape through a [`nn::GraphCtx`] each step.

pub mod conv;
pub mod nn;
pub mod optim;
pub mod tape;

pub use nn::{GraphCtx, Mode, Module, Parameter};
pub use optim::Adam;
pub use tape::{Arr, Gradients, Tape, Var};
