//! Checkpoint directories: one snapshot per (table, shard) plus a manifest.
//!
//! The manifest is written last, so a directory with a manifest is complete.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::TableConfig;
use crate::error::{Error, Result};
use crate::store::snapshot::{read_header, write_file_atomic};

pub const MANIFEST_FILE: &str = "manifest";
pub const MANIFEST_VERSION: &str = "dynembed-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCheckpoint {
    pub name: String,
    pub config_digest: u64,
    pub stored_dim: u32,
    pub config: TableConfig,
    /// Snapshot file names relative to the checkpoint directory, index = shard.
    pub files: Vec<String>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: String,
    pub created_at_step: u64,
    pub n_workers: u32,
    pub tables: Vec<TableCheckpoint>,
}

pub fn snapshot_file_name(table: &str, shard: u32) -> String {
    format!("{table}.{shard}.snap")
}

impl CheckpointManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s).map_err(|e| Error::FormatError(format!("manifest: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::FormatError(format!(
                "unsupported manifest version `{}`",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        write_file_atomic(&path, self.to_json().as_bytes())?;
        Ok(path)
    }

    /// Reads the manifest of `dir`; a missing manifest means an incomplete checkpoint.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::PartialCheckpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks that every referenced snapshot exists and carries the table's digest.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for t in &self.tables {
            if t.config.digest() != t.config_digest {
                return Err(Error::DigestMismatch(format!(
                    "manifest entry `{}` does not match its own config",
                    t.name
                )));
            }
            for f in &t.files {
                let path = dir.join(f);
                if !path.is_file() {
                    return Err(Error::PartialCheckpoint(format!("missing snapshot {}", path.display())));
                }
                let header = read_header(&path)?;
                if header.config_digest != t.config_digest {
                    return Err(Error::DigestMismatch(format!(
                        "{}: digest {:016x}, manifest says {:016x}",
                        path.display(),
                        header.config_digest,
                        t.config_digest
                    )));
                }
                if header.stored_dim != t.stored_dim {
                    return Err(Error::DimensionMismatch {
                        expected: t.stored_dim as usize,
                        got: header.stored_dim as usize,
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::snapshot::encode_snapshot;

    fn manifest(cfg: &TableConfig) -> CheckpointManifest {
        CheckpointManifest {
            version: MANIFEST_VERSION.into(),
            created_at_step: 12,
            n_workers: 1,
            tables: vec![TableCheckpoint {
                name: cfg.name.clone(),
                config_digest: cfg.digest(),
                stored_dim: cfg.stored_dim() as u32,
                config: cfg.clone(),
                files: vec![snapshot_file_name(&cfg.name, 0)],
                counts: vec![0],
            }],
        }
    }

    #[test]
    fn json_round_trip_keeps_digest() {
        let cfg = TableConfig::new("emb", 5).with_bias(true);
        let m = manifest(&cfg);
        let back = CheckpointManifest::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.tables[0].config.digest(), cfg.digest());
    }

    #[test]
    fn verify_detects_missing_and_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TableConfig::new("emb", 2);
        let m = manifest(&cfg);
        assert!(matches!(m.verify(dir.path()), Err(Error::PartialCheckpoint(_))));
        let snap = dir.path().join(&m.tables[0].files[0]);
        std::fs::write(&snap, encode_snapshot(cfg.digest() ^ 1, 2, std::iter::empty())).unwrap();
        assert!(matches!(m.verify(dir.path()), Err(Error::DigestMismatch(_))));
        std::fs::write(&snap, encode_snapshot(cfg.digest(), 2, std::iter::empty())).unwrap();
        m.verify(dir.path()).unwrap();
        assert!(matches!(
            CheckpointManifest::read(dir.path()),
            Err(Error::PartialCheckpoint(_))
        ));
        m.write(dir.path()).unwrap();
        assert_eq!(CheckpointManifest::read(dir.path()).unwrap(), m);
    }
}
