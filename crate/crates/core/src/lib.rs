//! Kan-extension transformer variants and the tooling to compare their
//! information regimes: corpora, neighborhood systems, blocks, models,
//! training, block completion and leakage diagnostics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod blocks;
pub mod completion;
pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod error;
mod init;
pub mod models;
pub mod neighborhoods;
pub mod training;

pub use error::{KetError, Result};
