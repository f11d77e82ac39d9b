//! File formats, experiment orchestration, and the `qgen` command line on
//! top of [`qgen_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod embeddings;
pub mod manifest;
pub mod trainlog;
pub mod vocab;

use std::path::PathBuf;

/// Location of the bundled toy corpus.
pub fn toy_data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}
