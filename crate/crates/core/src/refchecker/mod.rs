//! The reference checker: starting points, download expectations, period
//! document guesses and the per-phase attempt ledger.

mod ledger;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub use ledger::{AttemptKey, AttemptLedger};

use crate::docmodel::{ConsensusTimings, DigestKey, DigestSet, DocType, DocumentIdentifier, RawDocument, Timestamp};
use crate::docparse::{self, ParsedDocument};
use crate::scheduler::{compute_schedule, last_occurrence, PhaseInstance};

/// Starting points older than this are dropped.
pub const WINDOW_SECS: i64 = 3 * 3600;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum RefError {
    #[error("{0} documents are not starting points")]
    WrongDocType(DocType),
}

/// Read access to the archive needed by the reference checker.
pub trait ArchiveView: Send + Sync {
    /// Digest lookup; never by subject or datetime.
    fn contains(&self, doctype: DocType, digests: &DigestSet) -> bool;

    /// Whether a period document of this type and datetime is archived.
    /// `subject: None` matches any subject.
    fn has_period_document(&self, doctype: DocType, subject: Option<&str>, datetime: Timestamp) -> bool;

    /// Keys of server descriptors stored at or after `since`.
    fn server_descriptors_since(&self, since: Timestamp) -> Vec<DigestKey>;

    fn load_key(&self, doctype: DocType, key: &DigestKey) -> Option<RawDocument>;

    /// Starting-point documents stored at or after `since`, with their
    /// storage times.
    fn starting_points_since(&self, since: Timestamp) -> Vec<(RawDocument, Timestamp)>;
}

struct Entry {
    added_at: Timestamp,
    refs: Vec<DocumentIdentifier>,
    doc: Arc<ParsedDocument>,
}

#[derive(Default)]
pub struct StartingPointSet {
    entries: HashMap<DocumentIdentifier, Entry>,
}

impl StartingPointSet {
    /// Returns whether the document was new.
    pub fn add(&mut self, doc: ParsedDocument, now: Timestamp) -> Result<bool, RefError> {
        if !doc.doctype.is_starting_point() {
            return Err(RefError::WrongDocType(doc.doctype));
        }
        let digests = docparse::compute_digests(&doc.source_bytes, doc.doctype).unwrap_or_default();
        let id = docparse::identify_parsed(&doc, digests, now);
        if self.entries.contains_key(&id) {
            return Ok(false);
        }
        let refs = docparse::extract_references(&doc).ids;
        self.entries.insert(id, Entry { added_at: now, refs, doc: Arc::new(doc) });
        Ok(true)
    }

    pub fn prune(&mut self, now: Timestamp) -> usize {
        let before = self.entries.len();
        self.entries.retain(|_, e| now - e.added_at <= WINDOW_SECS);
        before - self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &DocumentIdentifier> {
        self.entries.keys()
    }

    /// Identity fingerprints that signed a referenced consensus, taken
    /// from the detached signatures that reference it.
    fn signers(&self, id: &DocumentIdentifier) -> Vec<String> {
        let mut out = Vec::new();
        for e in self.entries.values() {
            if e.doc.doctype != DocType::DetachedSignature || !e.refs.iter().any(|r| r.doctype == id.doctype && r.digests.intersects(&id.digests)) {
                continue;
            }
            for item in e.doc.all("directory-signature").chain(e.doc.all("additional-signature")) {
                let args: Vec<&str> = item.args().collect();
                if let Some(fp) = args.len().checked_sub(2).map(|i| args[i].to_ascii_uppercase()) {
                    if !out.contains(&fp) {
                        out.push(fp);
                    }
                }
            }
        }
        out.sort();
        out
    }

    fn references(&self) -> impl Iterator<Item = &DocumentIdentifier> {
        self.entries.values().flat_map(|e| e.refs.iter())
    }
}

fn expectation_rank(t: DocType) -> u8 {
    match t {
        DocType::ConsensusNs | DocType::ConsensusMicrodesc => 0,
        DocType::BandwidthList => 1,
        DocType::ServerDescriptor => 2,
        DocType::Microdescriptor => 3,
        DocType::ExtraInfoDescriptor => 4,
        _ => 5,
    }
}

pub struct RefChecker {
    authorities: Vec<String>,
    starting: Mutex<StartingPointSet>,
    ledger: Mutex<AttemptLedger>,
    latest: Mutex<Option<ConsensusTimings>>,
    extra_refs: Mutex<HashMap<DigestKey, Vec<DocumentIdentifier>>>,
    signature_windows: Mutex<BTreeSet<Timestamp>>,
    missed: AtomicU64,
}

impl RefChecker {
    /// `authorities` are the identity fingerprints whose votes are guessed.
    pub fn new(authorities: Vec<String>) -> Self {
        RefChecker {
            authorities,
            starting: Mutex::new(StartingPointSet::default()),
            ledger: Mutex::new(AttemptLedger::default()),
            latest: Mutex::new(None),
            extra_refs: Mutex::new(HashMap::new()),
            signature_windows: Mutex::new(BTreeSet::new()),
            missed: AtomicU64::new(0),
        }
    }

    /// Loads the starting points archived within the window.
    pub fn load_from_archive(&self, view: &dyn ArchiveView, now: Timestamp) -> usize {
        let mut n = 0;
        for (raw, stored_at) in view.starting_points_since(now - WINDOW_SECS) {
            if let Ok(doc) = docparse::parse(&raw) {
                if let Ok(true) = self.add_starting_point(doc, stored_at) {
                    n += 1;
                }
            }
        }
        n
    }

    pub fn add_starting_point(&self, doc: ParsedDocument, now: Timestamp) -> Result<bool, RefError> {
        if doc.doctype.is_consensus() {
            if let Ok(t) = docparse::extract_timings(&doc) {
                let mut latest = self.latest.lock().unwrap();
                if latest.is_none_or(|l| t.valid_after > l.valid_after) {
                    *latest = Some(t);
                }
            }
        }
        self.starting.lock().unwrap().add(doc, now)
    }

    pub fn prune(&self, now: Timestamp) -> usize {
        let removed = self.starting.lock().unwrap().prune(now);
        if removed > 0 {
            tracing::debug!(removed, "pruned starting points");
        }
        removed
    }

    pub fn starting_points(&self) -> usize {
        self.starting.lock().unwrap().len()
    }

    pub fn starting_point_ids(&self) -> Vec<DocumentIdentifier> {
        self.starting.lock().unwrap().ids().cloned().collect()
    }

    pub fn signers(&self, id: &DocumentIdentifier) -> Vec<String> {
        self.starting.lock().unwrap().signers(id)
    }

    pub fn latest_timings(&self) -> Option<ConsensusTimings> {
        *self.latest.lock().unwrap()
    }

    /// Identifiers that have not been archived, referenced from starting
    /// points or from server descriptors archived within the window.
    pub fn expectations(&self, now: Timestamp, view: &dyn ArchiveView) -> Vec<DocumentIdentifier> {
        let mut out: Vec<DocumentIdentifier> = self.starting.lock().unwrap().references().cloned().collect();
        let keys = view.server_descriptors_since(now - WINDOW_SECS);
        {
            let mut memo = self.extra_refs.lock().unwrap();
            let live: HashSet<&DigestKey> = keys.iter().collect();
            memo.retain(|k, _| live.contains(k));
            for key in &keys {
                if !memo.contains_key(key) {
                    let refs = view
                        .load_key(DocType::ServerDescriptor, key)
                        .and_then(|raw| docparse::parse(&raw).ok())
                        .map(|doc| docparse::extract_references(&doc).ids)
                        .unwrap_or_default();
                    memo.insert(*key, refs);
                }
            }
            out.extend(memo.values().flatten().cloned());
        }
        let mut seen = HashSet::new();
        out.retain(|id| {
            let key = id.digests.primary_key();
            key.is_some() && seen.insert((id.doctype, key)) && !view.contains(id.doctype, &id.digests)
        });
        out.sort_by_key(|id| (expectation_rank(id.doctype), id.doctype, id.digests.primary_key()));
        out
    }

    /// Digest-less identifiers for period documents that may exist now
    /// but have not been archived.
    pub fn guess_period_documents(&self, now: Timestamp, view: &dyn ArchiveView) -> Vec<DocumentIdentifier> {
        let Some(t) = self.latest_timings() else {
            return vec![DocumentIdentifier::guessed(DocType::ConsensusNs, "", now)];
        };
        let Ok(s) = compute_schedule(&t) else {
            return vec![];
        };
        let period = t.period();
        let va = last_occurrence(t.valid_after, period, now);
        let next_va = va + period;
        let task1 = next_va - (t.fresh_until - s.task1_at);
        let task2 = next_va - (t.fresh_until - s.task2_at);
        let mut out = Vec::new();
        for flavor in [DocType::ConsensusNs, DocType::ConsensusMicrodesc] {
            if !view.has_period_document(flavor, None, va) {
                out.push(DocumentIdentifier::guessed(flavor, "", va));
            }
        }
        for fp in &self.authorities {
            if !view.has_period_document(DocType::Vote, Some(fp), va) {
                out.push(DocumentIdentifier::guessed(DocType::Vote, fp.clone(), va));
            }
        }
        if now >= task1 {
            for fp in &self.authorities {
                if !view.has_period_document(DocType::Vote, Some(fp), next_va) {
                    out.push(DocumentIdentifier::guessed(DocType::Vote, fp.clone(), next_va));
                }
            }
        }
        let mut windows = self.signature_windows.lock().unwrap();
        if now >= task2 {
            windows.insert(next_va);
            if !view.has_period_document(DocType::DetachedSignature, None, next_va) {
                out.push(DocumentIdentifier::guessed(DocType::DetachedSignature, "", next_va));
            }
        }
        let closed: Vec<Timestamp> = windows.range(..=va).copied().collect();
        for w in closed {
            windows.remove(&w);
            if !view.has_period_document(DocType::DetachedSignature, None, w) {
                tracing::warn!(valid_after = %w, "detached signatures permanently missed");
                self.missed.fetch_add(1, Ordering::Relaxed);
            }
        }
        out
    }

    pub fn record_attempt(&self, id: &DocumentIdentifier, server: &str, phase: PhaseInstance) -> bool {
        self.ledger.lock().unwrap().record_attempt(id, server, phase)
    }

    pub fn record_key(&self, key: AttemptKey, server: &str, phase: PhaseInstance) -> bool {
        self.ledger.lock().unwrap().record_key(key, server, phase)
    }

    pub fn reset_phase(&self, phase: PhaseInstance) -> bool {
        self.ledger.lock().unwrap().reset_phase(phase)
    }

    pub fn mark_unreachable(&self, server: &str, phase: PhaseInstance) {
        self.ledger.lock().unwrap().mark_unreachable(server, phase)
    }

    pub fn is_unreachable(&self, server: &str, phase: PhaseInstance) -> bool {
        self.ledger.lock().unwrap().is_unreachable(server, phase)
    }

    pub fn add_missed(&self, n: u64) {
        self.missed.fetch_add(n, Ordering::Relaxed);
    }

    pub fn permanently_missed(&self) -> u64 {
        self.missed.load(Ordering::Relaxed)
    }
}
