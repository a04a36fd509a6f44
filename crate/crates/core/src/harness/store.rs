use std::fs;
use std::path::{Component, Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, ModelCheckpoint};
use crate::trigger::{load_trigger_manifest, save_trigger_manifest, TriggerSet};
use crate::verification::VerificationReport;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: StageStatus,
    pub artifacts: Vec<ArtifactRecord>,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Append-only record of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            seed,
            stages: Vec::new(),
        }
    }

    /// Latest successful record of `stage`, if any.
    pub fn completed(&self, stage: &str) -> Option<&StageRecord> {
        self.stages
            .iter()
            .rev()
            .find(|r| r.stage == stage)
            .filter(|r| r.status == StageStatus::Ok)
    }

    pub fn artifact(&self, stage: &str, suffix: &str) -> Option<&str> {
        self.completed(stage)?
            .artifacts
            .iter()
            .find(|a| a.path.ends_with(suffix))
            .map(|a| a.path.as_str())
    }

    /// Latest successful hash of every artifact, keyed by path. Equal for
    /// reruns of the same config and seed.
    pub fn artifact_hashes(&self) -> std::collections::BTreeMap<String, String> {
        let mut out = std::collections::BTreeMap::new();
        for r in self.stages.iter().filter(|r| r.status == StageStatus::Ok) {
            for a in &r.artifacts {
                out.insert(a.path.clone(), a.sha256.clone());
            }
        }
        out
    }

    pub fn push(&mut self, record: StageRecord) {
        self.stages.push(record);
    }

    /// Checks that every artifact of every completed stage exists under
    /// `root` with the recorded hash.
    pub fn validate(&self, root: &Path) -> Result<()> {
        for r in self.stages.iter().filter(|r| r.status == StageStatus::Ok) {
            for a in &r.artifacts {
                let p = resolve(root, &a.path)?;
                let bytes = fs::read(&p).map_err(|e| Error::persistence(&p, e.to_string()))?;
                let h = sha256_hex(&bytes);
                if h != a.sha256 {
                    return Err(Error::persistence(
                        &p,
                        format!("hash mismatch for stage {}: expected {}, found {h}", r.stage, a.sha256),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::persistence(path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::persistence(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Joins a manifest-relative path onto `root`, refusing anything that could
/// escape it.
fn resolve(root: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    let plain = rel.split('/').all(|seg| !seg.is_empty() && seg != "." && seg != "..");
    if !plain || p.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(Error::Config(format!("artifact path `{rel}` must be relative and plain")));
    }
    Ok(root.join(p))
}

/// Run directory with typed artifact I/O. Every read is logged so tests can
/// check that stages never look outside the run directory.
#[derive(Debug)]
pub struct ArtifactStore {
    root: PathBuf,
    reads: Mutex<Vec<PathBuf>>,
}

impl ArtifactStore {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(ArtifactStore {
            root: root.to_path_buf(),
            reads: Mutex::new(Vec::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> Result<PathBuf> {
        resolve(&self.root, rel)
    }

    /// Every file read through this store so far.
    pub fn reads(&self) -> Vec<PathBuf> {
        self.reads.lock().unwrap().clone()
    }

    fn read_path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel)?;
        self.reads.lock().unwrap().push(p.clone());
        Ok(p)
    }

    fn write_path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel)?;
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(p)
    }

    fn record(&self, rel: &str, path: &Path) -> Result<ArtifactRecord> {
        let bytes = fs::read(path).map_err(|e| Error::persistence(path, e.to_string()))?;
        Ok(ArtifactRecord {
            path: rel.to_string(),
            sha256: sha256_hex(&bytes),
        })
    }

    pub fn write_bytes(&self, rel: &str, bytes: &[u8]) -> Result<ArtifactRecord> {
        let p = self.write_path(rel)?;
        fs::write(&p, bytes).map_err(|e| Error::persistence(&p, e.to_string()))?;
        Ok(ArtifactRecord {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        })
    }

    pub fn read_string(&self, rel: &str) -> Result<String> {
        let p = self.read_path(rel)?;
        fs::read_to_string(&p).map_err(|e| Error::persistence(&p, e.to_string()))
    }

    pub fn save_model(&self, rel: &str, model: &ModelCheckpoint) -> Result<ArtifactRecord> {
        let p = self.write_path(rel)?;
        save_checkpoint(model, &p)?;
        self.record(rel, &p)
    }

    pub fn load_model(&self, rel: &str) -> Result<ModelCheckpoint> {
        load_checkpoint(&self.read_path(rel)?)
    }

    pub fn save_dataset(&self, rel: &str, data: &Dataset) -> Result<ArtifactRecord> {
        let p = self.write_path(rel)?;
        save_dataset(data, &p)?;
        self.record(rel, &p)
    }

    pub fn load_dataset(&self, rel: &str) -> Result<Dataset> {
        load_dataset(&self.read_path(rel)?)
    }

    pub fn save_trigger(&self, rel: &str, set: &TriggerSet) -> Result<ArtifactRecord> {
        let p = self.write_path(rel)?;
        save_trigger_manifest(set, &p)?;
        self.record(rel, &p)
    }

    pub fn load_trigger(&self, rel: &str) -> Result<TriggerSet> {
        load_trigger_manifest(&self.read_path(rel)?)
    }

    pub fn save_report(&self, rel: &str, report: &VerificationReport) -> Result<ArtifactRecord> {
        self.write_bytes(rel, report.to_toml().as_bytes())
    }

    pub fn load_report(&self, rel: &str) -> Result<VerificationReport> {
        VerificationReport::load(&self.read_path(rel)?)
    }

    pub fn save_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<ArtifactRecord> {
        let text = serde_json::to_string_pretty(value).expect("artifact serializes");
        self.write_bytes(rel, text.as_bytes())
    }

    pub fn load_json<T: serde::de::DeserializeOwned>(&self, rel: &str) -> Result<T> {
        let p = self.read_path(rel)?;
        let text = fs::read_to_string(&p).map_err(|e| Error::persistence(&p, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::persistence(&p, e.to_string()))
    }
}
