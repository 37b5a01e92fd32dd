//! Command-line pipeline around `terasense-core`: configuration, artifact
//! formats, the staged pipeline, the search-space benchmark and plots.

pub mod bench;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod plot;
pub mod stages;

pub use config::PipelineConfig;
pub use error::{StageError, StageResult};
pub use pipeline::run_pipeline;
