//! Self-aware trajectory prediction.

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod predictor;
pub mod selfaware;

pub use error::{Error, Result};
