use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation and everything it wrote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub version: String,
    pub out_dir: PathBuf,
    pub wall_clock_seconds: f64,
    /// Paths relative to `out_dir`, in the order written.
    pub outputs: Vec<String>,
}

pub fn version() -> String {
    match option_env!("SMCVI_GIT_DESCRIBE") {
        Some(v) => v.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// Output directory that remembers which files were handed out.
#[derive(Debug)]
pub struct Outputs {
    pub dir: PathBuf,
    pub written: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Path for the output `name` (which may contain subdirectories).
    pub fn file(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.written.push(name.to_string());
        Ok(path)
    }
}
