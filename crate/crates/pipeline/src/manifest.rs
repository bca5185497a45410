//! Run manifest and per-stage content stamps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

pub const MANIFEST_FORMAT: &str = "turbgate-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STAMP_FILE: &str = "stamp.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the output directory when inside it.
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path, root: &Path) -> Result<Self> {
        let rel = path.strip_prefix(root).unwrap_or(path);
        Ok(Self {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: hash_file(path)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageOutcome {
    Completed,
    /// Inputs and outputs matched the stored stamp.
    UpToDate,
    /// Finished, with a degraded result described in the notes.
    Degraded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub subject: String,
    pub key: String,
    pub seed: u64,
    pub tool_version: String,
    pub wall_time_s: f64,
    pub outcome: StageOutcome,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Append-only log of every stage run in an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub entries: Vec<StageRecord>,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            entries: Vec::new(),
        }
    }
}

impl RunManifest {
    pub fn load_or_new(path: &Path) -> Result<Self> {
        match fs::read_to_string(path) {
            Ok(s) => {
                let m: RunManifest =
                    serde_json::from_str(&s).map_err(|e| PipelineError::io(path, e))?;
                if m.format != MANIFEST_FORMAT {
                    return Err(PipelineError::Data(format!(
                        "{}: unsupported manifest format {}",
                        path.display(),
                        m.format
                    )));
                }
                Ok(m)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(PipelineError::io(path, e)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| PipelineError::Internal(e.to_string()))?;
        write_atomic(path, s.as_bytes())
    }

    pub fn latest(&self, stage: &str, subject: &str) -> Option<&StageRecord> {
        self.entries
            .iter()
            .rev()
            .find(|r| r.stage == stage && r.subject == subject)
    }
}

/// Key and output hashes of the last completed run of a stage directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub key: String,
    pub outputs: Vec<FileRecord>,
}

impl Stamp {
    pub fn read(dir: &Path) -> Option<Self> {
        let s = fs::read_to_string(dir.join(STAMP_FILE)).ok()?;
        serde_json::from_str(&s).ok()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| PipelineError::Internal(e.to_string()))?;
        write_atomic(&dir.join(STAMP_FILE), s.as_bytes())
    }

    /// True when every recorded output still exists with the same hash.
    pub fn outputs_intact(&self, root: &Path) -> bool {
        self.outputs.iter().all(|f| {
            hash_file(&root.join(&f.path)).is_ok_and(|h| h == f.sha256)
        })
    }
}

/// Writes through a sibling temporary file so a crash never leaves a
/// truncated artifact under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

/// Content key of a stage: its parameters plus the hashes of its inputs.
pub fn stage_key<T: Serialize>(params: &T, inputs: &[FileRecord]) -> Result<String> {
    let p = serde_json::to_string(params).map_err(|e| PipelineError::Internal(e.to_string()))?;
    let mut h = Sha256::new();
    h.update(p.as_bytes());
    for f in inputs {
        h.update(f.path.as_bytes());
        h.update([0]);
        h.update(f.sha256.as_bytes());
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
