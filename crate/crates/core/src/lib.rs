//! Discrete-token target speaker extraction.
//!
//! Pipeline: waveforms ([`signal`]) → multi-layer features ([`frontend`]) →
//! per-layer k-means tokens ([`tokenizer`]) → token-to-token extraction
//! network ([`model`]) trained by [`trainer`] and scored by [`eval`].

mod binio;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod kmeans;
pub mod model;
pub mod signal;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
