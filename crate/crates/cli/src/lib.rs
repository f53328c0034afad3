//! Configuration, staged pipeline, invariant suites and DOT export for the `symflow` binary.

pub mod config;
pub mod dot;
pub mod pipeline;
pub mod suites;

pub use config::PipelineConfig;
pub use pipeline::{run_pipeline, Bundle};
