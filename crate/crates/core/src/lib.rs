//! Pre-LN, Post-LN and NormFormer transformer language models trained from
//! scratch on a reverse-mode tape, with gradient-norm and stability
//! diagnostics.

pub mod blocks;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
