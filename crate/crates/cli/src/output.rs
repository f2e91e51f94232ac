//! Output directories are assembled in a sibling staging directory and moved
//! into place in one rename, so a failed run leaves nothing behind.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

use crate::CliError;

pub struct Staging {
    dir: TempDir,
    target: PathBuf,
    force: bool,
    files: Vec<String>,
}

fn refuse(target: &Path) -> CliError {
    CliError::Io(format!("output directory {} already exists; pass --force to replace it", target.display()))
}

impl Staging {
    pub fn new(target: &Path, force: bool) -> Result<Self, CliError> {
        if target.exists() && !force {
            return Err(refuse(target));
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&parent)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", parent.display())))?;
        let dir = tempfile::Builder::new().prefix(".svv-staging-").tempdir_in(&parent)?;
        Ok(Staging { dir, target: target.to_path_buf(), force, files: Vec::new() })
    }

    /// Creates `name` in the staging directory and records it for the manifest.
    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.path().join(name))?))
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let mut w = self.create(name)?;
        w.write_all(contents.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    /// Writes `manifest.json` (per-file SHA-256 plus run metadata) and moves
    /// the directory into place.
    pub fn commit(mut self, meta: serde_json::Value) -> Result<(), CliError> {
        let mut digests = BTreeMap::new();
        for name in &self.files {
            let bytes = std::fs::read(self.dir.path().join(name))?;
            digests.insert(name.clone(), hex::encode(Sha256::digest(&bytes)));
        }
        let manifest = serde_json::json!({ "run": meta, "files": digests });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        self.write("manifest.json", &(text + "\n"))?;
        if self.target.exists() {
            if !self.force {
                return Err(refuse(&self.target));
            }
            std::fs::remove_dir_all(&self.target)
                .map_err(|e| CliError::Io(format!("cannot replace {}: {e}", self.target.display())))?;
        }
        let staged = self.dir.keep();
        std::fs::rename(&staged, &self.target).map_err(|e| {
            let _ = std::fs::remove_dir_all(&staged);
            CliError::Io(format!("cannot move outputs to {}: {e}", self.target.display()))
        })
    }
}
