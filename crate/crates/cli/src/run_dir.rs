use std::path::{Path, PathBuf};

use crate::error::Result;

/// `runs/<name>/{config, checkpoints, traces, report}`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(base: &Path, name: &str) -> Result<Self> {
        let root = base.join(name);
        for sub in ["config", "checkpoints", "traces", "report"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// The run directory a checkpoint lives in, if it follows the layout.
pub fn run_of_checkpoint(checkpoint: &Path) -> Option<PathBuf> {
    let parent = checkpoint.parent()?;
    (parent.file_name()? == "checkpoints").then(|| parent.parent().map(Path::to_path_buf))?
}
