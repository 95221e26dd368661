//! Patch-based conditional diffusion for shadow removal.
//!
//! A pair of UNets — a local patch denoiser and a global low-resolution
//! restorer — are trained jointly; at sampling time the global branch guides
//! per-patch noise fusion so overlapping patch estimates blend seam-free.
//! Everything is deterministic under a seed: randomness comes from explicit
//! counter-based RNG streams, never from the tensor backend.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod grid;
pub mod imaging;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
