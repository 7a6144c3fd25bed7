//! Core of the zeroddi zero-shot drug–drug interaction event (DDIE) classifier.
//!
//! The crate is `no_std` + `alloc`: it owns the numeric substrate (a small
//! reverse-mode autodiff tape over `f64` matrices), the drug pair encoder,
//! the semantic DDIE representation learner, the alignment and uniformity
//! losses, the Adam training loop, the zero-shot evaluation metrics, and the
//! in-memory dataset utilities (splits, resampling, synthetic generation).
//! File formats, checkpoints and the CLI live in the `zeroddi` crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
extern crate alloc;

pub mod brl;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod loss;
pub mod model;
pub mod nn;
pub mod tape;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
