use crate::Failure;
use rmmdf::config::RunConfig;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Record of a command invocation, written to `<out>/manifest.json` before
/// anything else.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub config_path: Option<PathBuf>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub version: &'static str,
    pub argv: Vec<String>,
    /// Flags that override the configuration, as given.
    pub overrides: serde_json::Map<String, serde_json::Value>,
    /// Fully resolved configuration, when the command builds a network.
    pub config: Option<RunConfig>,
}

impl RunManifest {
    pub fn new(command: &'static str, out_dir: &Path) -> Self {
        Self {
            command,
            config_path: None,
            preset: None,
            seed: None,
            out_dir: out_dir.to_path_buf(),
            version: env!("RMMDF_VERSION"),
            argv: std::env::args().collect(),
            overrides: serde_json::Map::new(),
            config: None,
        }
    }

    /// Creates `out_dir` and writes the manifest into it.
    pub fn write(&self) -> Result<(), Failure> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| Failure::usage(format!("cannot create {}: {e}", self.out_dir.display())))?;
        let path = self.out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
    }
}
