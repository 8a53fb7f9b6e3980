//! Document taxonomy, identifiers, digests and timing values shared by the
//! rest of the crate.
//!
//! Everything here is an immutable value once constructed.

mod digest;
mod time;

use std::fmt;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

pub use digest::{DigestKey, DigestSet};
pub(crate) use digest::{decode_b64, hex_upper};
pub use time::Timestamp;

use crate::docparse::{self, DocError};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("bad timestamp {0:?}")]
    BadTimestamp(String),
    #[error("bad digest {0:?}: {1}")]
    BadDigest(String, &'static str),
    #[error("digest set is empty")]
    EmptyDigestSet,
    #[error("invalid consensus timings: {0}")]
    InvalidTimings(&'static str),
}

/// The kinds of document collected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DocType {
    ConsensusNs,
    ConsensusMicrodesc,
    Vote,
    DetachedSignature,
    ServerDescriptor,
    ExtraInfoDescriptor,
    Microdescriptor,
    BandwidthList,
    TorperfResults,
}

impl DocType {
    pub const ALL: [DocType; 9] = [
        DocType::ConsensusNs,
        DocType::ConsensusMicrodesc,
        DocType::Vote,
        DocType::DetachedSignature,
        DocType::ServerDescriptor,
        DocType::ExtraInfoDescriptor,
        DocType::Microdescriptor,
        DocType::BandwidthList,
        DocType::TorperfResults,
    ];

    /// `(name, major, minor)` of the `@type` annotation.
    pub fn annotation(self) -> (&'static str, u32, u32) {
        match self {
            DocType::ConsensusNs => ("network-status-consensus-3", 1, 0),
            DocType::ConsensusMicrodesc => ("network-status-microdesc-consensus-3", 1, 0),
            DocType::Vote => ("network-status-vote-3", 1, 0),
            DocType::DetachedSignature => ("detached-signature-3", 1, 0),
            DocType::ServerDescriptor => ("server-descriptor", 1, 0),
            DocType::ExtraInfoDescriptor => ("extra-info", 1, 0),
            DocType::Microdescriptor => ("microdescriptor", 1, 0),
            DocType::BandwidthList => ("bandwidth-file", 1, 0),
            DocType::TorperfResults => ("torperf", 1, 1),
        }
    }

    pub fn annotation_name(self) -> &'static str {
        self.annotation().0
    }

    pub fn from_annotation_name(name: &str) -> Option<DocType> {
        DocType::ALL.into_iter().find(|t| t.annotation_name() == name)
    }

    /// Top-level directory of this type inside the archive.
    pub fn dir_name(self) -> &'static str {
        match self {
            DocType::ConsensusNs => "consensus",
            DocType::ConsensusMicrodesc => "consensus-microdesc",
            DocType::Vote => "vote",
            DocType::DetachedSignature => "detached-signature",
            DocType::ServerDescriptor => "server-descriptor",
            DocType::ExtraInfoDescriptor => "extra-info",
            DocType::Microdescriptor => "microdescriptor",
            DocType::BandwidthList => "bandwidth-file",
            DocType::TorperfResults => "torperf",
        }
    }

    pub fn from_dir_name(name: &str) -> Option<DocType> {
        DocType::ALL.into_iter().find(|t| t.dir_name() == name)
    }

    pub fn is_consensus(self) -> bool {
        matches!(self, DocType::ConsensusNs | DocType::ConsensusMicrodesc)
    }

    /// Documents produced once per voting period (consensuses, votes,
    /// signatures); archived by date rather than by digest fan-out.
    pub fn is_period_document(self) -> bool {
        matches!(
            self,
            DocType::ConsensusNs | DocType::ConsensusMicrodesc | DocType::Vote | DocType::DetachedSignature
        )
    }

    /// Documents the reference checker walks from.
    pub fn is_starting_point(self) -> bool {
        self.is_period_document()
    }
}

impl fmt::Display for DocType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.annotation_name())
    }
}

/// A document that is expected to exist, or that does exist.
///
/// `subject` is a 40-character uppercase fingerprint for relay and
/// authority documents, `<source>-<filesize>` for Torperf files and empty
/// for consensuses. `digests` is empty only for guessed period documents,
/// which are resolved by URL.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DocumentIdentifier {
    pub doctype: DocType,
    pub subject: String,
    pub datetime: Timestamp,
    pub digests: DigestSet,
}

impl DocumentIdentifier {
    pub fn new(doctype: DocType, subject: impl Into<String>, datetime: Timestamp, digests: DigestSet) -> Self {
        DocumentIdentifier { doctype, subject: subject.into(), datetime, digests }
    }

    pub fn guessed(doctype: DocType, subject: impl Into<String>, datetime: Timestamp) -> Self {
        Self::new(doctype, subject, datetime, DigestSet::empty())
    }

    pub fn is_guessed(&self) -> bool {
        self.digests.is_empty()
    }
}

impl fmt::Display for DocumentIdentifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.doctype, self.datetime, self.subject)?;
        if let Some(k) = self.digests.primary_key() {
            write!(f, " {k}")?;
        }
        Ok(())
    }
}

/// Lifecycle timestamps and voting delays of one consensus period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConsensusTimings {
    pub valid_after: Timestamp,
    pub fresh_until: Timestamp,
    pub valid_until: Timestamp,
    pub vote_seconds: i64,
    pub dist_seconds: i64,
}

impl ConsensusTimings {
    pub fn new(
        valid_after: Timestamp,
        fresh_until: Timestamp,
        valid_until: Timestamp,
        vote_seconds: i64,
        dist_seconds: i64,
    ) -> Result<Self, ModelError> {
        let t = ConsensusTimings { valid_after, fresh_until, valid_until, vote_seconds, dist_seconds };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.valid_after >= self.fresh_until {
            return Err(ModelError::InvalidTimings("valid-after must precede fresh-until"));
        }
        if self.fresh_until >= self.valid_until {
            return Err(ModelError::InvalidTimings("fresh-until must precede valid-until"));
        }
        if self.vote_seconds <= 0 || self.dist_seconds <= 0 {
            return Err(ModelError::InvalidTimings("voting delays must be positive"));
        }
        if self.vote_seconds + self.dist_seconds >= self.period() {
            return Err(ModelError::InvalidTimings("voting delays exceed the freshness period"));
        }
        Ok(())
    }

    /// Length of the freshness interval, which is also the voting period.
    pub fn period(&self) -> i64 {
        self.fresh_until - self.valid_after
    }

    /// Timings of the following period, assuming identical length and delays.
    pub fn successor(&self) -> ConsensusTimings {
        self.shifted(1)
    }

    pub fn shifted(&self, periods: i64) -> ConsensusTimings {
        let d = self.period() * periods;
        ConsensusTimings {
            valid_after: self.valid_after + d,
            fresh_until: self.fresh_until + d,
            valid_until: self.valid_until + d,
            ..*self
        }
    }

    /// Hour-aligned timings used before any consensus is known.
    pub fn provisional(now: Timestamp, vote_seconds: i64, dist_seconds: i64) -> Result<Self, ModelError> {
        let va = Timestamp::from_unix(now.unix() - now.unix().rem_euclid(3600));
        Self::new(va, va + 3600, va + 3 * 3600, vote_seconds, dist_seconds)
    }
}

/// The exact bytes of a document as retrieved, with provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub doctype: DocType,
    pub body: Bytes,
    pub source: String,
    pub retrieved_at: Timestamp,
    pub digests: DigestSet,
    /// Datetime supplied by whoever referenced this document; only consulted
    /// for types that carry no timestamp of their own (microdescriptors).
    pub context_datetime: Option<Timestamp>,
}

impl RawDocument {
    /// Builds a document, recomputing its digests from `body`.
    pub fn new(
        doctype: DocType,
        body: impl Into<Bytes>,
        source: impl Into<String>,
        retrieved_at: Timestamp,
    ) -> Result<Self, DocError> {
        let body = body.into();
        let digests = docparse::compute_digests(&body, doctype)?;
        Ok(RawDocument { doctype, body, source: source.into(), retrieved_at, digests, context_datetime: None })
    }

    pub fn with_context_datetime(mut self, t: Option<Timestamp>) -> Self {
        self.context_datetime = t;
        self
    }

    pub fn matches(&self, id: &DocumentIdentifier) -> bool {
        id.doctype == self.doctype && self.digests.intersects(&id.digests)
    }
}
