//! Annotated, content-addressed on-disk archive.
//!
//! Layout under the root:
//!
//! ```text
//! archive/<type>/...        annotated documents (see `layout`)
//! archive/unrecognized/...  blobs that could not be typed, by SHA-256
//! meta/YYYY-MM.jsonl        per-month entry manifests
//! recent/<type>/...         concatenated per-run files, kept 72 hours
//! tmp/                      staging for atomic writes
//! index.json
//! ```

mod gate;
mod import;
mod index;
pub mod layout;
mod recent;
mod verify;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use bytes::Bytes;
use serde::{Deserialize, Serialize};

pub use gate::{FileGate, GateGuard};
pub use import::ImportReport;
pub use index::{IndexEntry, IndexFile};
pub use verify::{IntegrityReport, DEFAULT_MISSING_THRESHOLD};

use crate::docmodel::{DigestKey, DigestSet, DocType, DocumentIdentifier, RawDocument, Timestamp};
use crate::docparse::{self, DocError};
use crate::refchecker::ArchiveView;

pub const DEFAULT_MAX_OPEN_FILES: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("storage full writing {0}")]
    StorageFull(PathBuf),
    #[error("i/o error on {0}: {1}")]
    Io(PathBuf, #[source] io::Error),
    #[error("corrupt entry {0}")]
    CorruptEntry(String),
    #[error("document has no digest to address it by")]
    NoDigest,
    #[error(transparent)]
    Document(#[from] DocError),
}

fn io_err(path: &Path, e: io::Error) -> ArchiveError {
    if e.kind() == io::ErrorKind::StorageFull {
        ArchiveError::StorageFull(path.to_path_buf())
    } else {
        ArchiveError::Io(path.to_path_buf(), e)
    }
}

/// Metadata of one stored file. `doctype` is `None` for unrecognized blobs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub path: String,
    pub doctype: Option<DocType>,
    #[serde(default)]
    pub subject: String,
    pub digests: DigestSet,
    pub size_bytes: u64,
    pub stored_at: Timestamp,
    pub doc_datetime: Timestamp,
    /// SHA-256 of the whole file, annotation included.
    pub file_sha256: String,
}

impl ArchiveEntry {
    pub fn type_name(&self) -> &'static str {
        self.doctype.map_or(layout::UNRECOGNIZED_DIR, |t| t.annotation_name())
    }

    pub fn identifier(&self) -> Option<DocumentIdentifier> {
        self.doctype
            .map(|t| DocumentIdentifier::new(t, self.subject.clone(), self.doc_datetime, self.digests.clone()))
    }
}

#[derive(Default)]
struct State {
    entries: Vec<ArchiveEntry>,
    by_key: HashMap<(Option<DocType>, DigestKey), usize>,
    by_path: HashMap<String, usize>,
    by_period: BTreeMap<(DocType, Timestamp), Vec<usize>>,
}

impl State {
    fn find(&self, doctype: Option<DocType>, digests: &DigestSet) -> Option<usize> {
        digests.keys().iter().find_map(|k| self.by_key.get(&(doctype, *k)).copied())
    }

    fn insert(&mut self, entry: ArchiveEntry) -> usize {
        let idx = self.entries.len();
        for k in entry.digests.keys() {
            self.by_key.entry((entry.doctype, k)).or_insert(idx);
        }
        if let Some(t) = entry.doctype.filter(|t| t.is_period_document() || *t == DocType::TorperfResults) {
            self.by_period.entry((t, entry.doc_datetime)).or_default().push(idx);
        }
        self.by_path.insert(entry.path.clone(), idx);
        self.entries.push(entry);
        idx
    }
}

pub struct Archive {
    root: PathBuf,
    gate: FileGate,
    state: RwLock<State>,
    manifest_lock: Mutex<()>,
    recent: Mutex<Vec<usize>>,
    tmp_seq: AtomicU64,
}

impl std::fmt::Debug for Archive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Archive").field("root", &self.root).finish_non_exhaustive()
    }
}

impl Archive {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ArchiveError> {
        Self::open_with_limit(root, DEFAULT_MAX_OPEN_FILES)
    }

    /// Opens (creating if needed) an archive, reloading entry metadata
    /// from the manifests. Leftover staging files are discarded.
    pub fn open_with_limit(root: impl Into<PathBuf>, max_open_files: usize) -> Result<Self, ArchiveError> {
        let root = root.into();
        for d in ["archive", "meta", "recent", "tmp"] {
            let p = root.join(d);
            fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
        }
        let tmp = root.join("tmp");
        for f in fs::read_dir(&tmp).map_err(|e| io_err(&tmp, e))?.flatten() {
            let _ = fs::remove_file(f.path());
        }
        let mut state = State::default();
        let meta = root.join("meta");
        let mut manifests: Vec<PathBuf> = fs::read_dir(&meta)
            .map_err(|e| io_err(&meta, e))?
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        manifests.sort();
        for m in manifests {
            let text = fs::read_to_string(&m).map_err(|e| io_err(&m, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let Ok(entry) = serde_json::from_str::<ArchiveEntry>(line) else {
                    tracing::warn!(manifest = %m.display(), "skipping unreadable manifest line");
                    continue;
                };
                if state.by_path.contains_key(&entry.path) || !root.join(&entry.path).is_file() {
                    continue;
                }
                state.insert(entry);
            }
        }
        tracing::info!(root = %root.display(), entries = state.entries.len(), "archive opened");
        Ok(Archive {
            root,
            gate: FileGate::new(max_open_files),
            state: RwLock::new(state),
            manifest_lock: Mutex::new(()),
            recent: Mutex::new(Vec::new()),
            tmp_seq: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn gate(&self) -> &FileGate {
        &self.gate
    }

    pub fn len(&self) -> usize {
        self.state.read().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> Vec<ArchiveEntry> {
        self.state.read().unwrap().entries.clone()
    }

    pub fn entry_by_path(&self, path: &str) -> Option<ArchiveEntry> {
        let s = self.state.read().unwrap();
        s.by_path.get(path).map(|&i| s.entries[i].clone())
    }

    pub fn find(&self, doctype: DocType, digests: &DigestSet) -> Option<ArchiveEntry> {
        let s = self.state.read().unwrap();
        s.find(Some(doctype), digests).map(|i| s.entries[i].clone())
    }

    /// Count of stored documents per type name.
    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.state.read().unwrap().entries {
            *out.entry(e.type_name().to_string()).or_default() += 1;
        }
        out
    }

    fn write_atomic(&self, rel: &str, bytes: &[u8]) -> Result<(), ArchiveError> {
        let target = self.root.join(rel);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        let seq = self.tmp_seq.fetch_add(1, Ordering::Relaxed);
        let tmp = self.root.join("tmp").join(format!("{}-{seq}", std::process::id()));
        {
            let _g = self.gate.acquire();
            let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
            if let Err(e) = f.write_all(bytes) {
                drop(f);
                let _ = fs::remove_file(&tmp);
                return Err(io_err(&tmp, e));
            }
        }
        fs::rename(&tmp, &target).map_err(|e| {
            let _ = fs::remove_file(&tmp);
            io_err(&target, e)
        })
    }

    fn append_manifest(&self, entry: &ArchiveEntry) -> Result<(), ArchiveError> {
        let path = self.root.join("meta").join(format!("{}.jsonl", entry.doc_datetime.format("%Y-%m")));
        let mut line = serde_json::to_string(entry).expect("entry serializes");
        line.push('\n');
        let _lock = self.manifest_lock.lock().unwrap();
        let _g = self.gate.acquire();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| io_err(&path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| io_err(&path, e))
    }

    fn commit(&self, entry: ArchiveEntry, bytes: &[u8]) -> Result<ArchiveEntry, ArchiveError> {
        self.write_atomic(&entry.path, bytes)?;
        let mut state = self.state.write().unwrap();
        if let Some(i) = state.find(entry.doctype, &entry.digests) {
            return Ok(state.entries[i].clone());
        }
        self.append_manifest(&entry)?;
        let idx = state.insert(entry.clone());
        drop(state);
        self.recent.lock().unwrap().push(idx);
        tracing::info!(event = "store", path = %entry.path, r#type = entry.type_name(), size = entry.size_bytes, "archived");
        Ok(entry)
    }

    /// Stores a typed document with its annotation. Storing a digest that
    /// is already present returns the existing entry.
    pub fn store(&self, raw: &RawDocument) -> Result<ArchiveEntry, ArchiveError> {
        if let Some(e) = self.find(raw.doctype, &raw.digests) {
            return Ok(e);
        }
        let id = docparse::identify(raw);
        let mut path = layout::relative_path(raw.doctype, id.datetime, &raw.digests, &id.subject)
            .ok_or(ArchiveError::NoDigest)?;
        if raw.doctype == DocType::TorperfResults {
            let taken = self.state.read().unwrap().by_path.contains_key(&path);
            if taken {
                path = layout::torperf_alternate(&path, &raw.digests);
            }
        }
        let bytes = docparse::annotate(raw);
        let entry = ArchiveEntry {
            path,
            doctype: Some(raw.doctype),
            subject: id.subject,
            digests: raw.digests.clone(),
            size_bytes: bytes.len() as u64,
            stored_at: raw.retrieved_at,
            doc_datetime: id.datetime,
            file_sha256: docparse::full_sha256_hex(&bytes),
        };
        self.commit(entry, &bytes)
    }

    /// Stores bytes that could not be typed, verbatim, by SHA-256.
    pub fn store_unrecognized(&self, body: &[u8], source: &str, at: Timestamp) -> Result<ArchiveEntry, ArchiveError> {
        let sha = docparse::full_sha256_hex(body);
        let digests = DigestSet::empty().with_sha256_hex(&sha).expect("valid sha256");
        if let Some(i) = {
            let s = self.state.read().unwrap();
            s.find(None, &digests).map(|i| s.entries[i].clone())
        } {
            return Ok(i);
        }
        tracing::warn!(source, sha256 = %sha, "storing unrecognized bytes");
        let entry = ArchiveEntry {
            path: layout::unrecognized_path(at, &sha),
            doctype: None,
            subject: String::new(),
            digests,
            size_bytes: body.len() as u64,
            stored_at: at,
            doc_datetime: at,
            file_sha256: sha,
        };
        self.commit(entry, body)
    }

    /// Stores bytes believed to be of `doctype`, falling back to an
    /// unrecognized blob when no digest can be computed.
    pub fn store_bytes(
        &self,
        doctype: Option<DocType>,
        body: Bytes,
        source: &str,
        at: Timestamp,
    ) -> Result<ArchiveEntry, ArchiveError> {
        let doctype = doctype.or_else(|| docparse::detect_type(&body).ok());
        match doctype.map(|t| RawDocument::new(t, body.clone(), source, at)) {
            Some(Ok(raw)) => self.store(&raw),
            _ => self.store_unrecognized(&body, source, at),
        }
    }

    fn read_file(&self, rel: &str) -> Result<Vec<u8>, ArchiveError> {
        let p = self.root.join(rel);
        let _g = self.gate.acquire();
        fs::read(&p).map_err(|e| io_err(&p, e))
    }

    /// Reads a file and checks it against the recorded whole-file digest.
    pub fn read_verified(&self, entry: &ArchiveEntry) -> Result<Vec<u8>, ArchiveError> {
        let bytes = self.read_file(&entry.path)?;
        if docparse::full_sha256_hex(&bytes) != entry.file_sha256 {
            return Err(ArchiveError::CorruptEntry(entry.path.clone()));
        }
        Ok(bytes)
    }

    /// Reads and verifies a typed entry, returning the body without
    /// annotation.
    pub fn load_entry(&self, entry: &ArchiveEntry) -> Result<RawDocument, ArchiveError> {
        let Some(doctype) = entry.doctype else {
            return Err(ArchiveError::NoDigest);
        };
        let bytes = self.read_verified(entry)?;
        let (_, body) = docparse::strip_annotation(&bytes);
        let raw = RawDocument::new(doctype, Bytes::copy_from_slice(body), entry.path.clone(), entry.stored_at)
            .map_err(|_| ArchiveError::CorruptEntry(entry.path.clone()))?;
        if !raw.digests.intersects(&entry.digests) {
            return Err(ArchiveError::CorruptEntry(entry.path.clone()));
        }
        let ctx = (doctype == DocType::Microdescriptor).then_some(entry.doc_datetime);
        Ok(raw.with_context_datetime(ctx))
    }

    fn locate(&self, id: &DocumentIdentifier) -> Option<ArchiveEntry> {
        let s = self.state.read().unwrap();
        if !id.digests.is_empty() {
            return s.find(Some(id.doctype), &id.digests).map(|i| s.entries[i].clone());
        }
        s.by_period
            .get(&(id.doctype, id.datetime))?
            .iter()
            .map(|&i| &s.entries[i])
            .find(|e| e.subject == id.subject)
            .cloned()
    }

    /// Loads by digest, or by (type, subject, datetime) for digest-less
    /// period identifiers.
    pub fn load(&self, id: &DocumentIdentifier) -> Result<Option<RawDocument>, ArchiveError> {
        match self.locate(id) {
            Some(e) => self.load_entry(&e).map(Some),
            None => Ok(None),
        }
    }

    /// Body of an unrecognized blob.
    pub fn load_unrecognized(&self, sha256_hex: &str) -> Result<Option<Bytes>, ArchiveError> {
        let Ok(d) = DigestSet::empty().with_sha256_hex(sha256_hex) else {
            return Ok(None);
        };
        let entry = {
            let s = self.state.read().unwrap();
            s.find(None, &d).map(|i| s.entries[i].clone())
        };
        match entry {
            Some(e) => self.read_verified(&e).map(|b| Some(Bytes::from(b))),
            None => Ok(None),
        }
    }

    /// Entries of a type stored at or after `since`.
    pub fn stored_since(&self, doctype: DocType, since: Timestamp) -> Vec<ArchiveEntry> {
        let s = self.state.read().unwrap();
        s.entries.iter().filter(|e| e.doctype == Some(doctype) && e.stored_at >= since).cloned().collect()
    }

    /// Period documents of a type with datetime in `[from, to]`, newest
    /// first.
    pub fn period_entries(&self, doctype: DocType, from: Timestamp, to: Timestamp) -> Vec<ArchiveEntry> {
        let s = self.state.read().unwrap();
        let mut out: Vec<ArchiveEntry> = s
            .by_period
            .range((doctype, from)..=(doctype, to))
            .flat_map(|(_, v)| v.iter().map(|&i| s.entries[i].clone()))
            .collect();
        out.reverse();
        out
    }

    /// The consensus of a flavor valid at `now`: the latest valid-after not
    /// after `now` whose valid-until is later, ties broken by the greatest
    /// digest.
    pub fn current_consensus(&self, flavor: DocType, now: Timestamp) -> Option<RawDocument> {
        let mut candidates = self.period_entries(flavor, Timestamp::from_unix(i64::MIN / 2), now);
        candidates.sort_by(|a, b| {
            (b.doc_datetime, layout::primary_digest(flavor, &b.digests))
                .cmp(&(a.doc_datetime, layout::primary_digest(flavor, &a.digests)))
        });
        for e in candidates {
            let Ok(raw) = self.load_entry(&e) else { continue };
            let valid = docparse::parse(&raw).ok().and_then(|d| docparse::extract_timings(&d).ok());
            if valid.is_some_and(|t| t.valid_after <= now && now < t.valid_until) {
                return Some(raw);
            }
        }
        None
    }
}

impl ArchiveView for Archive {
    fn contains(&self, doctype: DocType, digests: &DigestSet) -> bool {
        self.state.read().unwrap().find(Some(doctype), digests).is_some()
    }

    fn has_period_document(&self, doctype: DocType, subject: Option<&str>, datetime: Timestamp) -> bool {
        let s = self.state.read().unwrap();
        s.by_period
            .get(&(doctype, datetime))
            .is_some_and(|v| v.iter().any(|&i| subject.is_none_or(|x| s.entries[i].subject == x)))
    }

    fn server_descriptors_since(&self, since: Timestamp) -> Vec<DigestKey> {
        self.stored_since(DocType::ServerDescriptor, since)
            .iter()
            .filter_map(|e| e.digests.primary_key())
            .collect()
    }

    fn load_key(&self, doctype: DocType, key: &DigestKey) -> Option<RawDocument> {
        let entry = {
            let s = self.state.read().unwrap();
            s.by_key.get(&(Some(doctype), *key)).map(|&i| s.entries[i].clone())
        }?;
        match self.load_entry(&entry) {
            Ok(r) => Some(r),
            Err(e) => {
                tracing::warn!(path = %entry.path, error = %e, "archived document unreadable");
                None
            }
        }
    }

    fn starting_points_since(&self, since: Timestamp) -> Vec<(RawDocument, Timestamp)> {
        let entries: Vec<ArchiveEntry> = {
            let s = self.state.read().unwrap();
            s.entries
                .iter()
                .filter(|e| e.doctype.is_some_and(|t| t.is_starting_point()) && e.stored_at >= since)
                .cloned()
                .collect()
        };
        entries.iter().filter_map(|e| self.load_entry(e).ok().map(|r| (r, e.stored_at))).collect()
    }
}

#[cfg(test)]
mod tests;
