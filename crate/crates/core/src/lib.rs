//! Differentiable causal block diagrams.

// `!(x > 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blocks;
pub mod cli;
pub mod compose;
pub mod contracts;
pub mod dynamics;
pub mod error;
pub mod nn;
pub mod optimize;
mod serde_ext;
pub mod tape;
pub mod tensor;
pub mod time;

pub use blocks::{BlockDef, SignalSpec};
pub use error::{Error, Result};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
pub use time::Time;
