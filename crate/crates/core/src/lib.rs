//! Scheduling and kernel reference code for training video diffusion
//! transformers on mixed image/video data.
//!
//! The crate is `no_std` (it needs `alloc`) so the same arithmetic can be
//! embedded in a data loader, a launcher, or a simulator. IO, file formats
//! and the command line live in the `seqload-cli` crate.
//!
//! - [`shapes`]: media shape to latent sequence length, bucket catalogs.
//! - [`scheduler`]: dual-constraint and equal-token batch sizing.
//! - [`costfit`]: benchmark sweeps, `a + b·B·S^p` fitting, bottleneck analysis.
//! - [`sim`]: barrier-synchronized data-parallel step simulator and metrics.
//! - [`adaln`]: fused LayerNorm-Modulate forward/backward with tiled reductions.
#![no_std]
#![forbid(unsafe_code)]
// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod adaln;
pub mod costfit;
mod error;
pub mod scheduler;
pub mod shapes;
pub mod sim;
mod stats;

pub use error::{Error, Result};
pub use stats::pearson;
