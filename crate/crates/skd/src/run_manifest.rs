use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::binio::{read, write_atomic};
use crate::checkpoint::digest;
use crate::error::Result;

/// Record of one subcommand invocation, written next to its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: BTreeMap<String, String>,
    /// Input path to SHA-256 digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str) -> Self {
        Self {
            subcommand: subcommand.into(),
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            seed: None,
            wall_clock_secs: 0.0,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let d = digest(&read(path)?);
        self.inputs.insert(path.display().to_string(), d);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// `<out>.run.json`, or `run.json` inside an output directory.
    pub fn path_for(out: &Path) -> PathBuf {
        if out.is_dir() {
            out.join("run.json")
        } else {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".run.json");
            out.with_file_name(name)
        }
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = Self::path_for(out);
        let mut text = serde_json::to_string_pretty(self).expect("serializable manifest");
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
