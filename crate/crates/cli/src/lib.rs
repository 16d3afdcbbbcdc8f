//! Command-line pipeline for stress-testing neural operators.

pub mod config;
pub mod pipeline;
