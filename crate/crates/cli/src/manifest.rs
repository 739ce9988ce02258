//! Output directory layout and per-command run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;

/// Version string baked in at build time from `git describe`.
pub const VERSION: &str = env!("LDPM_VERSION");

/// Paths below a run's output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(stage)
    }

    pub fn reconstructions(&self) -> PathBuf {
        self.root.join("reconstructions")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }
}

/// Record of one command invocation. Passing the file back through
/// `--config` repeats the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Resolved configuration, after command-line overrides.
    pub config: PipelineConfig,
    /// SHA-256 over the dataset directory, when the command reads or writes one.
    pub dataset_hash: Option<String>,
    /// Parameter hash of every checkpoint read or written, by stage.
    pub checkpoints: BTreeMap<String, String>,
    /// How ablated components were realized.
    pub notes: Vec<String>,
    pub metrics: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: &PipelineConfig) -> Self {
        Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            seed: config.seed,
            config: config.clone(),
            dataset_hash: None,
            checkpoints: BTreeMap::new(),
            notes: Vec::new(),
            metrics: serde_json::Value::Null,
        }
    }

    pub fn write(&self, layout: &Layout) -> anyhow::Result<PathBuf> {
        let path = layout.manifest(&self.command);
        fs::create_dir_all(path.parent().expect("manifest path has a parent"))?;
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// SHA-256 over the relative paths and contents of every file below `dir`, in sorted order.
pub fn hash_dir(dir: &Path) -> anyhow::Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(dir.join(&rel))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root)?.to_path_buf());
        }
    }
    Ok(())
}
