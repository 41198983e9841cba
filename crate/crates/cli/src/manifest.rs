//! Run manifest: per-stage seed, config hash, and content hashes of every input
//! and output. A stage whose record still matches is skipped on rerun.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::PipelineError;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub seed: u64,
    pub config_hash: String,
    /// Input path (run-relative name or external path) to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to content hash.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Option<Manifest>, PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| PipelineError::Io(format!("corrupt {}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        let mut w = ArtifactWriter::new(dir);
        w.write(MANIFEST_FILE, text.as_bytes())?;
        w.commit()?;
        Ok(())
    }

    /// Output hashes of every stage, keyed `stage/file`.
    pub fn artifact_hashes(&self) -> BTreeMap<String, String> {
        self.stages
            .iter()
            .flat_map(|(s, r)| r.outputs.iter().map(move |(f, h)| (format!("{s}/{f}"), h.clone())))
            .collect()
    }
}

/// True when the recorded outputs still exist with their recorded hashes.
pub fn outputs_intact(dir: &Path, record: &StageRecord) -> bool {
    record.outputs.iter().all(|(name, h)| hash_file(&dir.join(name)).is_ok_and(|x| &x == h))
}

/// Writes each artifact as `<name>.partial`; `commit` renames them all into place.
/// Dropping the writer without committing leaves the `.partial` files behind.
pub struct ArtifactWriter {
    dir: PathBuf,
    written: Vec<(String, String)>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf(), written: Vec::new() }
    }

    pub fn partial_path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.partial"))
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let p = self.partial_path(name);
        std::fs::write(&p, bytes).map_err(|e| PipelineError::Io(format!("{}: {e}", p.display())))?;
        self.written.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    /// Lets `f` write the partial file itself.
    pub fn write_via<E: std::error::Error + Send + Sync + 'static>(
        &mut self,
        name: &str,
        f: impl FnOnce(&Path) -> Result<(), E>,
    ) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
        let p = self.partial_path(name);
        f(&p)?;
        let h = hash_file(&p)?;
        self.written.push((name.to_string(), h));
        Ok(())
    }

    pub fn commit(self) -> Result<BTreeMap<String, String>, PipelineError> {
        let mut out = BTreeMap::new();
        for (name, h) in self.written {
            let from = self.dir.join(format!("{name}.partial"));
            let to = self.dir.join(&name);
            std::fs::rename(&from, &to).map_err(|e| PipelineError::Io(format!("{}: {e}", to.display())))?;
            out.insert(name, h);
        }
        Ok(out)
    }
}
