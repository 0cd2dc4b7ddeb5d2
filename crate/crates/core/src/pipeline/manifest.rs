use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::io::{file_digest, from_json_lines, to_json_lines, write_atomic};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const LOCK_FILE: &str = ".lock";

/// One manifest line. Paths are relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub stage: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config_digest: String,
    pub wall_clock_secs: f64,
    pub seed: u64,
}

/// An output directory held under its lock file for the lifetime of the value.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(root).map_err(|e| PipelineError::io(root, e))?;
        let lock = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {
                fs::write(&lock, std::process::id().to_string()).map_err(|e| PipelineError::io(&lock, e))?;
                Ok(Self { root: root.to_path_buf() })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(lock.display().to_string())),
            Err(e) => Err(PipelineError::io(&lock, e)),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> Result<Vec<ManifestEntry>, PipelineError> {
        let path = self.path(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        from_json_lines(&text).map_err(|e| PipelineError::Corrupt { path: MANIFEST_FILE.into(), reason: e.to_string() })
    }

    pub fn append(&self, entry: &ManifestEntry) -> Result<(), PipelineError> {
        let mut entries = self.manifest()?;
        entries.push(entry.clone());
        let path = self.path(MANIFEST_FILE);
        let bytes = to_json_lines(&entries).expect("manifest serializes");
        write_atomic(&path, &bytes).map_err(|e| PipelineError::io(&path, e))
    }

    /// Digest recorded for `rel` by the most recent stage that wrote it.
    pub fn recorded_digest(&self, rel: &str) -> Result<Option<String>, PipelineError> {
        Ok(self.manifest()?.iter().rev().find_map(|e| e.outputs.get(rel).cloned()))
    }

    /// Checks a predecessor artifact against the manifest and returns its digest.
    pub fn check_input(&self, rel: &str) -> Result<String, PipelineError> {
        let expected = self.recorded_digest(rel)?;
        let path = self.path(rel);
        if !path.exists() {
            return Err(PipelineError::MissingArtifact { path: rel.into(), expected });
        }
        let Some(expected) = expected else {
            return Err(PipelineError::MissingArtifact { path: rel.into(), expected: None });
        };
        let actual = file_digest(&path).map_err(|e| PipelineError::io(&path, e))?;
        if actual != expected {
            return Err(PipelineError::DigestMismatch { path: rel.into(), expected, actual });
        }
        Ok(actual)
    }

    /// Outputs of the latest run of `stage` whose path starts with `prefix`.
    pub fn latest_outputs(&self, stage: &str, prefix: &str) -> Result<Vec<String>, PipelineError> {
        let entries = self.manifest()?;
        Ok(entries
            .iter()
            .rev()
            .filter(|e| e.stage == stage)
            .flat_map(|e| e.outputs.keys())
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}
