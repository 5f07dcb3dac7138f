//! Batch command-line pipeline: synthesize data, fit codebooks, tokenize,
//! train, extract and evaluate.

pub mod cli;
pub mod commands;
pub mod config;
