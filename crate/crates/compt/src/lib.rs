//! File formats, command line and experiment presets for `compt-core`.
//!
//! Checkpoints and backbones are JSON documents, datasets are JSON lines with
//! a manifest, and every report is written both as JSON and as CSV.

pub mod cli;
pub mod data;
pub mod error;
pub mod files;
pub mod presets;
pub mod reports;

pub use compt_core;
pub use error::{Error, Result};
