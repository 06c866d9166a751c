//! Distillation from a mixed-source domain for cross-domain few-shot action
//! recognition, operating on precomputed frame-feature sequences.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape.
//! - [`data`]: feature datasets, the binary feature file, synthetic domain
//!   shift generation, target splits and episode sampling.
//! - [`codec`]: temporal encoder, decoder and reconstruction loss.
//! - [`mixer`]: calibrated target centers and the cross-attention mixer.
//! - [`heads`]: classifier heads, alignment metric, losses, distillation
//!   and the moving-average teacher update.
//! - [`harness`]: configuration, checkpoints, metrics and the two-stage
//!   training and evaluation loops.

pub mod codec;
pub mod data;
pub mod error;
pub mod harness;
pub mod heads;
pub mod kvfile;
pub mod mixer;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
