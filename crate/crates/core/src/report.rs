//! Versioned JSON report envelope and content hashing.
//!
//! Reports carry no timestamps: re-running a pipeline with the same inputs
//! and parameters yields byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Where a report's numbers came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_hash: Option<String>,
    /// Dataset role (or name) → content hash.
    #[serde(default)]
    pub datasets: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(snapshot_hash: Option<&str>) -> Self {
        Self {
            snapshot_hash: snapshot_hash.map(str::to_string),
            datasets: BTreeMap::new(),
        }
    }

    pub fn with_dataset(mut self, name: &str, hash: impl Into<String>) -> Self {
        self.datasets.insert(name.to_string(), hash.into());
        self
    }
}

/// Common envelope for every JSON report written to disk or served.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub schema_version: u32,
    pub kind: String,
    pub provenance: Provenance,
    pub params: serde_json::Value,
    pub payload: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(kind: &str, provenance: Provenance, params: impl Serialize, payload: T) -> Result<Self> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            provenance,
            params: serde_json::to_value(params)?,
            payload,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}
