use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use super::{io_err, Archive, ArchiveError};
use crate::docmodel::{DocType, Timestamp};

pub const RECENT_RETENTION_SECS: i64 = 72 * 3600;

impl Archive {
    /// Writes one concatenated file per document type for everything
    /// stored since the previous snapshot, then prunes old recent files.
    pub fn recent_snapshot(&self, run_at: Timestamp) -> Result<Vec<PathBuf>, ArchiveError> {
        let pending: Vec<usize> = std::mem::take(&mut *self.recent.lock().unwrap());
        let mut by_type: BTreeMap<DocType, Vec<super::ArchiveEntry>> = BTreeMap::new();
        {
            let s = self.state.read().unwrap();
            for i in pending {
                let e = &s.entries[i];
                if let Some(t) = e.doctype {
                    by_type.entry(t).or_default().push(e.clone());
                }
            }
        }
        let mut written = Vec::new();
        for (t, entries) in by_type {
            let dir = self.root.join("recent").join(t.dir_name());
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            let path = dir.join(format!("{}-{}", run_at.file_stamp(), t.dir_name()));
            let mut out = Vec::new();
            for e in &entries {
                out.extend_from_slice(&self.read_verified(e)?);
            }
            let _g = self.gate.acquire();
            let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| io_err(&path, e))?;
            f.write_all(&out).map_err(|e| io_err(&path, e))?;
            tracing::info!(event = "recent", path = %path.display(), documents = entries.len(), "wrote recent file");
            written.push(path);
        }
        self.prune_recent(run_at)?;
        Ok(written)
    }

    /// Removes recent files whose run time is more than 72 hours before
    /// `now`.
    pub fn prune_recent(&self, now: Timestamp) -> Result<usize, ArchiveError> {
        let recent = self.root.join("recent");
        let mut removed = 0;
        for dir in fs::read_dir(&recent).map_err(|e| io_err(&recent, e))?.flatten() {
            if !dir.path().is_dir() {
                continue;
            }
            for f in fs::read_dir(dir.path()).map_err(|e| io_err(&dir.path(), e))?.flatten() {
                let name = f.file_name().to_string_lossy().into_owned();
                let stamp = name.get(..19).and_then(Timestamp::parse_file_stamp);
                if stamp.is_some_and(|s| now - s > RECENT_RETENTION_SECS) {
                    fs::remove_file(f.path()).map_err(|e| io_err(&f.path(), e))?;
                    removed += 1;
                }
            }
        }
        Ok(removed)
    }
}
