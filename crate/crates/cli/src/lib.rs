//! Pipeline orchestration behind the `rigsfm` command: configuration,
//! the staged `solve`, and the translation ablation table.

pub mod ablate;
pub mod config;
pub mod pipeline;

pub use config::{PipelineConfig, Skippable};
pub use pipeline::{run_stages, solve, PipelineError, Run, StageRecord};
