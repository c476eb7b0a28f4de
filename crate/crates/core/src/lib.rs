//! Self-supervised temporal correspondence learning.
//!
//! A small convolutional encoder is trained to reconstruct a query frame
//! from a reference frame of the same video through a pixel affinity
//! matrix. Three ingredients shape the representation:
//!
//! * feature points from *other* videos join the softmax denominator, so
//!   intra-video matches must beat cross-video distractors
//!   ([`affinity::intra_inter_affinity`]);
//! * an explicit position map is injected after the first layer, and
//!   circularly shifted for other-video frames ([`position`]);
//! * every affinity row is pulled towards a compact two-Gaussian fit of
//!   itself ([`compactness`]), which is also used to filter affinities
//!   when propagating labels ([`propagation`]).
//!
//! Everything runs on a built-in reverse-mode differentiation tape
//! ([`diff`]) in double precision.

pub mod affinity;
pub mod checkpoint;
pub mod compactness;
pub mod config;
pub mod data;
pub mod diff;
pub mod encoder;
pub mod experiment;
pub mod error;
pub mod frame;
pub mod grid;
pub mod memory_bank;
pub mod metrics;
pub mod position;
pub mod propagation;
pub mod reconstruction;
pub mod train;

pub use error::{Error, Result};
pub use frame::{ColorSpace, Frame};

/// Worker cap from `LIIR_THREADS`, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("LIIR_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
