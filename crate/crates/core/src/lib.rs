//! Pruning and block-wise reconstruction fine-tuning for small GPT-style
//! language models.

pub mod baselines;
pub mod data;
pub mod ebft;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod pruning;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
