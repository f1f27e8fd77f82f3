//! File formats, audio features, synthetic data and the `skd` command line
//! around `skd-core`.

pub mod binio;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod error;
pub mod executor;
pub mod feature_file;
pub mod labels;
pub mod manifest;
pub mod report;
pub mod run_manifest;
pub mod stft;
pub mod synth;
pub mod wav;

pub use error::{Result, SkdError};
