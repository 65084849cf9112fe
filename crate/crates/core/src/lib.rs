//! Non-autoregressive speech translation with parallel AR rescoring.
//!
//! A shared speech encoder feeds a non-autoregressive decoder (CMLM or CTC)
//! that proposes several candidate translations at once, and a shallow
//! autoregressive decoder that scores all candidates in a single
//! teacher-forced pass to pick the best one.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autograd`]: dense `f64` arrays and reverse-mode
//!   differentiation.
//! - [`vocab`] and [`data`]: token tables, the synthetic corpus, batching.
//! - [`model`]: encoder, decoders and heads.
//! - [`losses`]: every training objective and their combinations.
//! - [`decode`]: Mask-Predict, CTC search, AR beam search and rescoring.
//! - [`train`]: Adam with the Noam schedule, the training loop,
//!   distillation and checkpoint averaging.
//! - [`eval`] and [`bench`]: BLEU, oracle selection and timing.
//! - [`config`]: the file/preset configuration shared by the CLI.

pub mod autograd;
pub mod bench;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Array;
