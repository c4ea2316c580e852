//! Three-stage domain-invariant transfer learning for multichannel clinical
//! time series whose source and target feature sets only partly overlap.
//!
//! A teacher model is trained on a large source dataset, a transition model
//! learns domain-invariant per-feature encoders through gradient reversal and
//! representation distillation, and a target model is initialised from the
//! transition encoders (private target features borrow the encoder of the
//! closest source feature under dynamic time warping) before fine-tuning.

pub mod adversarial;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod dtw;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipeline;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
