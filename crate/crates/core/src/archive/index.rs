use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{layout, Archive, ArchiveError};
use crate::docmodel::Timestamp;

/// One line of `index.json`. Field order is part of the format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: String,
    #[serde(rename = "type")]
    pub doc_type: String,
    pub sha1: Option<String>,
    pub sha256: Option<String>,
    pub size: u64,
    pub stored_at: Timestamp,
    pub datetime: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexFile {
    pub generated_at: Timestamp,
    pub task_status: BTreeMap<String, Timestamp>,
    pub entries: Vec<IndexEntry>,
}

impl IndexFile {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("index serializes");
        s.push('\n');
        s
    }
}

impl Archive {
    /// Builds the index from stored metadata. `generated_at` is the latest
    /// storage or task completion time, so an unchanged archive always
    /// produces the same bytes.
    pub fn build_index(&self, task_status: &BTreeMap<String, Timestamp>) -> IndexFile {
        let mut entries: Vec<(String, Timestamp, String, IndexEntry)> = self
            .entries()
            .into_iter()
            .map(|e| {
                let digest = e
                    .doctype
                    .and_then(|t| layout::primary_digest(t, &e.digests))
                    .unwrap_or_else(|| e.file_sha256.clone());
                let ie = IndexEntry {
                    path: e.path.clone(),
                    doc_type: e.type_name().to_string(),
                    sha1: e.digests.sha1_hex().map(str::to_string),
                    sha256: e.digests.sha256_as_hex(),
                    size: e.size_bytes,
                    stored_at: e.stored_at,
                    datetime: e.doc_datetime,
                };
                (ie.doc_type.clone(), e.doc_datetime, digest, ie)
            })
            .collect();
        entries.sort_by(|a, b| (&a.0, a.1, &a.2).cmp(&(&b.0, b.1, &b.2)));
        let latest_store = entries.iter().map(|e| e.3.stored_at).max();
        let latest_task = task_status.values().copied().max();
        let generated_at = latest_store.into_iter().chain(latest_task).max().unwrap_or(Timestamp::EPOCH);
        IndexFile {
            generated_at,
            task_status: task_status.clone(),
            entries: entries.into_iter().map(|e| e.3).collect(),
        }
    }

    /// Writes `index.json` atomically and returns its path.
    pub fn write_index(&self, task_status: &BTreeMap<String, Timestamp>) -> Result<PathBuf, ArchiveError> {
        let json = self.build_index(task_status).to_json();
        self.write_atomic("index.json", json.as_bytes())?;
        Ok(self.root.join("index.json"))
    }
}
