//! Jailbreak path unlearning on a toy, fully instrumented causal LM.
//!
//! * [`lm`]: the model, its reverse-mode gradients, attribution hooks,
//!   masked updates and checkpoint format.
//! * [`corpus`]: the synthetic token world and base-model pretraining.
//! * [`buffer`]: the on-policy adversarial buffer.
//! * [`pathfinder`]: flow scores, masks and path diagnostics.
//! * [`rectifier`]: the rectification objective and training loop.
//! * [`harness`]: metrics, experiment variants and report files.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod buffer;
pub mod corpus;
mod error;
pub mod harness;
pub mod lm;
pub mod pathfinder;
pub mod rectifier;

pub use error::{JpuError, Result};
