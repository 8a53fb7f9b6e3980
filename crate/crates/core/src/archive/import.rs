use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bytes::Bytes;
use serde::Serialize;

use super::{io_err, layout, Archive, ArchiveError};
use crate::docmodel::{RawDocument, Timestamp};
use crate::docparse;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ImportReport {
    pub files: usize,
    /// Documents found per type name, including already archived ones.
    pub documents: BTreeMap<String, usize>,
    pub newly_stored: usize,
    pub errors: Vec<(String, String)>,
}

impl ImportReport {
    pub fn total(&self) -> usize {
        self.documents.values().sum()
    }
}

fn walk(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(path)?.flatten().map(|e| e.path()).collect();
    children.sort();
    for c in children {
        walk(&c, out)?;
    }
    Ok(())
}

impl Archive {
    /// Imports a file or directory tree: CollecTor-style annotated files
    /// and tor data-directory files of concatenated descriptors.
    pub fn import_path(&self, path: &Path, now: Timestamp) -> Result<ImportReport, ArchiveError> {
        if !path.exists() {
            return Err(io_err(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let mut files = Vec::new();
        walk(path, &mut files).map_err(|e| io_err(path, e))?;
        let mut report = ImportReport::default();
        for file in files {
            report.files += 1;
            let bytes = {
                let _g = self.gate.acquire();
                fs::read(&file)
            };
            let bytes = match bytes {
                Ok(b) => b,
                Err(e) => {
                    report.errors.push((file.display().to_string(), e.to_string()));
                    continue;
                }
            };
            let source = file.display().to_string();
            for chunk in docparse::split_file(&bytes) {
                let body = Bytes::copy_from_slice(chunk.body);
                let result = match chunk.doctype.map(|t| RawDocument::new(t, body.clone(), source.clone(), now)) {
                    Some(Ok(raw)) => {
                        let before = self.len();
                        self.store(&raw).map(|e| (e.type_name(), self.len() > before))
                    }
                    _ => {
                        let before = self.len();
                        self.store_unrecognized(&body, &source, now).map(|_| (layout::UNRECOGNIZED_DIR, self.len() > before))
                    }
                };
                match result {
                    Ok((name, new)) => {
                        *report.documents.entry(name.to_string()).or_default() += 1;
                        report.newly_stored += usize::from(new);
                    }
                    Err(e) => report.errors.push((source.clone(), e.to_string())),
                }
            }
        }
        tracing::info!(event = "import", path = %path.display(), files = report.files, documents = report.total(), new = report.newly_stored, "import finished");
        Ok(report)
    }
}
