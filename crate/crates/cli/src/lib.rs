//! Command-line pipeline around `tdd-core`: dataset synthesis, cached
//! per-video and per-split stages, and evaluation reports.

pub mod cache;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod synth;
