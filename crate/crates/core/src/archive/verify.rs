use std::collections::HashSet;

use serde::Serialize;

use super::Archive;
use crate::docmodel::{DocType, Timestamp};
use crate::docparse;
use crate::refchecker::ArchiveView;

pub const DEFAULT_MISSING_THRESHOLD: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegrityReport {
    pub checked: usize,
    pub corrupt: Vec<String>,
    /// Distinct documents referenced from archived consensuses and votes.
    pub referenced: usize,
    pub missing: usize,
    pub missing_sample: Vec<String>,
    pub missing_ratio: f64,
    pub threshold: f64,
    pub warn: bool,
}

impl IntegrityReport {
    pub fn is_clean(&self) -> bool {
        self.corrupt.is_empty() && !self.warn
    }
}

impl Archive {
    /// Rehashes every file whose document datetime falls in `window` (all
    /// files when `None`) and counts references from consensuses and votes
    /// in the window that have no archived target.
    pub fn verify_integrity(&self, window: Option<(Timestamp, Timestamp)>, threshold: f64) -> IntegrityReport {
        let in_window = |t: Timestamp| window.is_none_or(|(a, b)| a <= t && t <= b);
        let entries: Vec<_> = self.entries().into_iter().filter(|e| in_window(e.doc_datetime)).collect();
        let mut corrupt = Vec::new();
        let mut seen = HashSet::new();
        let mut referenced = 0;
        let mut missing = 0;
        let mut missing_sample = Vec::new();
        for e in &entries {
            let loaded = match e.doctype {
                Some(_) => self.load_entry(e).map(Some),
                None => self.read_verified(e).map(|_| None),
            };
            let raw = match loaded {
                Ok(r) => r,
                Err(err) => {
                    tracing::warn!(path = %e.path, error = %err, "integrity check failed");
                    corrupt.push(e.path.clone());
                    continue;
                }
            };
            let Some(raw) = raw.filter(|r| matches!(r.doctype, DocType::Vote) || r.doctype.is_consensus()) else {
                continue;
            };
            let Ok(doc) = docparse::parse(&raw) else { continue };
            for id in docparse::extract_references(&doc).ids {
                let Some(key) = id.digests.primary_key() else { continue };
                if !seen.insert((id.doctype, key)) {
                    continue;
                }
                referenced += 1;
                if !self.contains(id.doctype, &id.digests) {
                    missing += 1;
                    if missing_sample.len() < 20 {
                        missing_sample.push(id.to_string());
                    }
                }
            }
        }
        let missing_ratio = if referenced == 0 { 0.0 } else { missing as f64 / referenced as f64 };
        let warn = missing_ratio > threshold;
        if warn {
            tracing::warn!(missing, referenced, ratio = missing_ratio, threshold, "missing descriptors above threshold");
        }
        IntegrityReport {
            checked: entries.len(),
            corrupt,
            referenced,
            missing,
            missing_sample,
            missing_ratio,
            threshold,
            warn,
        }
    }
}
