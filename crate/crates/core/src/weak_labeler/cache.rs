use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Affiliation, LabelerError};

/// Hex SHA-256 over the rendered prompt and the model identifier.
pub fn prompt_hash(prompt: &str, model_identifier: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(prompt.as_bytes());
    hasher.update([0u8]);
    hasher.update(model_identifier.as_bytes());
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub prompt_hash: String,
    pub model_identifier: String,
    pub raw_response: String,
    /// `None` when every attempt failed to parse.
    pub parsed_label: Option<Affiliation>,
    pub timestamp: DateTime<Utc>,
}

/// Append-only response cache. Later records for the same hash win on load.
#[derive(Debug, Default)]
pub struct AnnotationCache {
    path: Option<PathBuf>,
    entries: HashMap<String, CacheRecord>,
    writer: Option<BufWriter<File>>,
}

impl AnnotationCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, LabelerError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| LabelerError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io_err)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: CacheRecord =
                    serde_json::from_str(&line).map_err(|e| LabelerError::CorruptCache {
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                entries.insert(record.prompt_hash.clone(), record);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        Ok(Self {
            path: Some(path),
            entries,
            writer: Some(BufWriter::new(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, hash: &str) -> Option<&CacheRecord> {
        self.entries.get(hash)
    }

    pub fn insert(&mut self, record: CacheRecord) -> Result<(), LabelerError> {
        if let Some(writer) = self.writer.as_mut() {
            let io_err = |source| LabelerError::Io {
                path: self
                    .path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
                source,
            };
            let line = serde_json::to_string(&record).expect("cache record serialises");
            writer.write_all(line.as_bytes()).map_err(io_err)?;
            writer.write_all(b"\n").map_err(io_err)?;
            writer.flush().map_err(io_err)?;
        }
        self.entries.insert(record.prompt_hash.clone(), record);
        Ok(())
    }
}
