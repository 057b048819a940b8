//! Run directories: every file a subcommand writes is recorded in
//! `manifest.json` next to it.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    files: Vec<ManifestEntry>,
}

pub struct RunDir {
    root: PathBuf,
    files: Vec<ManifestEntry>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Write `contents` to `rel` (a path inside the run directory).
    pub fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        let bytes = contents.as_ref();
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(ManifestEntry {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    pub fn write_json(&mut self, rel: &str, value: &impl Serialize) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(rel, s)
    }

    pub fn finish(mut self, command: &str) -> Result<()> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            command,
            files: std::mem::take(&mut self.files),
        };
        let mut s = serde_json::to_string_pretty(&manifest)?;
        s.push('\n');
        let path = self.root.join("manifest.json");
        std::fs::write(&path, s).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
