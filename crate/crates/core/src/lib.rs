//! Answer-aware question generation with a feature-enriched pointer-generator
//! and a hierarchical bidirectional language-model auxiliary task.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numeric piece of
//! the system: a reverse-mode autodiff tape over dense `f64` tensors, corpus
//! encoding with extended copy vocabularies, the language-model layer, the
//! question-generation network, beam search, evaluation metrics, and the
//! training loop with checkpoint averaging. File IO and the command-line
//! front end live in the companion `qgen` crate.
//!
//! ```
//! use qgen_core::autograd::Tape;
//! use qgen_core::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(2.0));
//! let y = tape.leaf(Tensor::scalar(3.0));
//! let z = tape.mul(x, y);
//! let grads = tape.backward(z).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[3.0]);
//! assert_eq!(grads.get(y).unwrap(), &[2.0]);
//! ```
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autograd;
pub mod checks;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod lm;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod qg;
pub mod search;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::ParamSet;
pub use tensor::Tensor;
