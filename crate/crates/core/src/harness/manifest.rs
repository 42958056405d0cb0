use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One completed stage of one replicate. Paths are relative to the output
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    pub stage: String,
    pub files: Vec<PathBuf>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub command: String,
    pub files: Vec<PathBuf>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub stages: Vec<StageRecord>,
    pub reports: Vec<ReportRecord>,
}

impl RunManifest {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            stages: Vec::new(),
            reports: Vec::new(),
        }
    }

    pub fn path(root: &Path) -> PathBuf {
        root.join(MANIFEST_FILE)
    }

    /// `Ok(None)` when no manifest has been written yet.
    pub fn load(root: &Path) -> Result<Option<Self>> {
        let path = Self::path(root);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        serde_json::from_str(&text).map(Some).map_err(|e| Error::parse(&path, e))
    }

    /// Writes the manifest after checking that every listed file exists.
    pub fn save(&self, root: &Path) -> Result<()> {
        let listed = self
            .stages
            .iter()
            .flat_map(|s| &s.files)
            .chain(self.reports.iter().flat_map(|r| &r.files));
        for f in listed {
            ensure!(
                root.join(f).exists(),
                Data,
                "manifest lists {} but it does not exist",
                root.join(f).display()
            );
        }
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = Self::path(root);
        let tmp = root.join(format!("{MANIFEST_FILE}.tmp"));
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// SHA-256 of the serialized manifest.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("manifest serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stage(&self, seed: u64, stage: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.seed == seed && s.stage == stage)
    }

    /// Recorded and every file still on disk.
    pub fn is_complete(&self, root: &Path, seed: u64, stage: &str) -> bool {
        self.stage(seed, stage)
            .is_some_and(|s| s.files.iter().all(|f| root.join(f).exists()))
    }

    pub fn upsert_stage(&mut self, record: StageRecord) {
        self.stages.retain(|s| !(s.seed == record.seed && s.stage == record.stage));
        self.stages.push(record);
    }

    pub fn upsert_report(&mut self, record: ReportRecord) {
        self.reports.retain(|r| r.command != record.command);
        self.reports.push(record);
        self.reports.sort_by(|a, b| a.command.cmp(&b.command));
    }

    /// Orders stage records by seed, then by `stage_order`.
    pub fn sort_stages(&mut self, stage_order: &[&str]) {
        let rank = |s: &str| stage_order.iter().position(|x| *x == s).unwrap_or(usize::MAX);
        self.stages.sort_by_key(|s| (s.seed, rank(&s.stage)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_and_completion() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::write(root.join("a.txt"), "x").unwrap();
        let mut m = RunManifest::new("abc");
        m.upsert_stage(StageRecord {
            seed: 1,
            stage: "dataset".into(),
            files: vec!["a.txt".into()],
            wall_clock_s: 0.5,
        });
        m.save(root).unwrap();
        let back = RunManifest::load(root).unwrap().unwrap();
        assert_eq!(back, m);
        assert_eq!(back.digest(), m.digest());
        assert!(back.is_complete(root, 1, "dataset"));
        assert!(!back.is_complete(root, 2, "dataset"));
        std::fs::remove_file(root.join("a.txt")).unwrap();
        assert!(!back.is_complete(root, 1, "dataset"));
        assert!(matches!(back.save(root), Err(Error::Data(_))));
    }

    #[test]
    fn missing_manifest_is_none() {
        let dir = tempfile::tempdir().unwrap();
        assert!(RunManifest::load(dir.path()).unwrap().is_none());
    }
}
