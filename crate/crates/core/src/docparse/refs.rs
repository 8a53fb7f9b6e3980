//! Timings, subjects and cross-document references.

use super::{DocError, ParsedDocument};
use crate::docmodel::{decode_b64, hex_upper, ConsensusTimings, DigestSet, DocType, DocumentIdentifier, Timestamp};

fn timestamp_field(doc: &ParsedDocument, keyword: &'static str) -> Result<Timestamp, DocError> {
    let v = doc.value(keyword).ok_or(DocError::MissingTimingField(keyword))?;
    Timestamp::parse(v).map_err(|_| DocError::MissingTimingField(keyword))
}

/// Reads valid-after, fresh-until, valid-until and voting-delay from a
/// vote or consensus.
pub fn extract_timings(doc: &ParsedDocument) -> Result<ConsensusTimings, DocError> {
    if !matches!(doc.doctype, DocType::Vote | DocType::ConsensusNs | DocType::ConsensusMicrodesc) {
        return Err(DocError::MissingTimingField("valid-after"));
    }
    let va = timestamp_field(doc, "valid-after")?;
    let fu = timestamp_field(doc, "fresh-until")?;
    let vu = timestamp_field(doc, "valid-until")?;
    let delay = doc.first("voting-delay").ok_or(DocError::MissingTimingField("voting-delay"))?;
    let parse = |i| delay.arg(i).and_then(|s| s.parse::<i64>().ok());
    let (vote, dist) = parse(0).zip(parse(1)).ok_or(DocError::MissingTimingField("voting-delay"))?;
    Ok(ConsensusTimings::new(va, fu, vu, vote, dist)?)
}

/// Fingerprint (uppercase hex) from a base64 identity as used on `r` lines.
fn identity_to_hex(b64: &str) -> Option<String> {
    let bytes = decode_b64(b64)?;
    (bytes.len() == 20).then(|| hex_upper(&bytes))
}

fn is_fingerprint(s: &str) -> bool {
    s.len() == 40 && s.bytes().all(|c| c.is_ascii_hexdigit())
}

/// The opaque subject used in identifiers for this document.
pub fn document_subject(doc: &ParsedDocument) -> String {
    match doc.doctype {
        DocType::Vote => doc
            .first("dir-source")
            .and_then(|i| i.arg(1))
            .filter(|s| is_fingerprint(s))
            .map(str::to_ascii_uppercase)
            .unwrap_or_default(),
        DocType::ServerDescriptor => doc
            .value("fingerprint")
            .map(|v| v.split_whitespace().collect::<String>().to_ascii_uppercase())
            .filter(|s| is_fingerprint(s))
            .unwrap_or_default(),
        DocType::ExtraInfoDescriptor => doc
            .first("extra-info")
            .and_then(|i| i.arg(1))
            .filter(|s| is_fingerprint(s))
            .map(str::to_ascii_uppercase)
            .unwrap_or_default(),
        DocType::TorperfResults => {
            let first = doc.items.first();
            let field = |key: &str| {
                first.and_then(|i| {
                    std::iter::once(i.keyword.as_str())
                        .chain(i.args())
                        .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                        .map(str::to_string)
                })
            };
            match (field("SOURCE"), field("FILESIZE")) {
                (Some(src), Some(size)) => format!("{}-{}", src.to_ascii_lowercase(), size),
                _ => String::new(),
            }
        }
        _ => String::new(),
    }
}

/// The datetime a document is filed under: valid-after for period
/// documents, publication time for relay descriptors, the measurement day
/// for Torperf files. Microdescriptors carry no time of their own and use
/// the datetime of the consensus that referenced them.
pub fn document_datetime(doc: &ParsedDocument) -> Option<Timestamp> {
    match doc.doctype {
        DocType::Vote | DocType::ConsensusNs | DocType::ConsensusMicrodesc | DocType::DetachedSignature => {
            doc.value("valid-after").and_then(|v| Timestamp::parse(v).ok())
        }
        DocType::ServerDescriptor | DocType::ExtraInfoDescriptor => {
            doc.value("published").and_then(|v| Timestamp::parse(v).ok())
        }
        DocType::Microdescriptor => doc.context_datetime,
        DocType::BandwidthList => doc
            .items
            .first()
            .filter(|i| i.args.is_empty())
            .and_then(|i| i.keyword.parse::<i64>().ok())
            .map(Timestamp::from_unix),
        DocType::TorperfResults => {
            let first = doc.items.first()?;
            let start = std::iter::once(first.keyword.as_str())
                .chain(first.args())
                .find_map(|t| t.strip_prefix("START="))?;
            let secs: f64 = start.parse().ok()?;
            Some(Timestamp::from_unix(secs.floor() as i64).start_of_day())
        }
    }
}

/// References found in a document, plus the number of reference lines that
/// could not be decoded.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct References {
    pub ids: Vec<DocumentIdentifier>,
    pub skipped: usize,
}

/// Lists the documents a document refers to. GeoIP database digests are
/// ignored since those files are not archived.
pub fn extract_references(doc: &ParsedDocument) -> References {
    let mut refs = References::default();
    let valid_after = doc.value("valid-after").and_then(|v| Timestamp::parse(v).ok());
    match doc.doctype {
        DocType::Vote | DocType::ConsensusNs => {
            let authority = document_subject(doc);
            for item in doc.all("bandwidth-file-digest") {
                let digest = item
                    .args()
                    .find_map(|a| a.strip_prefix("sha256="))
                    .and_then(|b64| DigestSet::empty().with_sha256_base64(b64).ok())
                    .and_then(|d| d.sha256_as_hex())
                    .and_then(|hex| DigestSet::empty().with_sha256_hex(&hex).ok());
                match (digest, valid_after) {
                    (Some(d), Some(va)) => {
                        refs.ids.push(DocumentIdentifier::new(DocType::BandwidthList, authority.clone(), va, d))
                    }
                    _ => refs.skipped += 1,
                }
            }
            for item in doc.all("r") {
                match server_descriptor_ref(item) {
                    Some(id) => refs.ids.push(id),
                    None => refs.skipped += 1,
                }
            }
        }
        DocType::ConsensusMicrodesc => {
            let mut identity = String::new();
            for item in &doc.items {
                match item.keyword.as_str() {
                    "r" => identity = item.arg(1).and_then(identity_to_hex).unwrap_or_default(),
                    "m" => {
                        let digest = item.arg(0).and_then(|d| DigestSet::empty().with_sha256_base64(d).ok());
                        match (digest, valid_after) {
                            (Some(d), Some(va)) => refs.ids.push(DocumentIdentifier::new(
                                DocType::Microdescriptor,
                                identity.clone(),
                                va,
                                d,
                            )),
                            _ => refs.skipped += 1,
                        }
                    }
                    _ => {}
                }
            }
        }
        DocType::ServerDescriptor => {
            let subject = document_subject(doc);
            let published = doc.value("published").and_then(|v| Timestamp::parse(v).ok());
            if let Some(item) = doc.first("extra-info-digest") {
                let mut digest = item.arg(0).and_then(|h| DigestSet::empty().with_sha1_hex(h).ok());
                if let (Some(d), Some(b64)) = (digest.clone(), item.arg(1)) {
                    digest = Some(d.clone().with_sha256_base64(b64).unwrap_or(d));
                }
                match (digest, published) {
                    (Some(d), Some(p)) => {
                        refs.ids.push(DocumentIdentifier::new(DocType::ExtraInfoDescriptor, subject, p, d))
                    }
                    _ => refs.skipped += 1,
                }
            }
        }
        DocType::DetachedSignature => {
            let Some(va) = valid_after else {
                refs.skipped += doc.all("consensus-digest").count() + doc.all("additional-digest").count();
                return refs;
            };
            for item in doc.all("consensus-digest") {
                match item.arg(0).and_then(|h| DigestSet::empty().with_sha1_hex(h).ok()) {
                    Some(d) => refs.ids.push(DocumentIdentifier::new(DocType::ConsensusNs, "", va, d)),
                    None => refs.skipped += 1,
                }
            }
            for item in doc.all("additional-digest") {
                let flavor = item.arg(0);
                let alg = item.arg(1);
                let digest = match alg {
                    Some("sha256") => item.arg(2).and_then(|h| DigestSet::empty().with_sha256_hex(h).ok()),
                    _ => None,
                };
                match (flavor, digest) {
                    (Some("microdesc"), Some(d)) => {
                        refs.ids.push(DocumentIdentifier::new(DocType::ConsensusMicrodesc, "", va, d))
                    }
                    _ => refs.skipped += 1,
                }
            }
        }
        DocType::ExtraInfoDescriptor | DocType::Microdescriptor | DocType::BandwidthList | DocType::TorperfResults => {}
    }
    refs
}

/// `r nickname identity digest date time ip orport dirport`
fn server_descriptor_ref(item: &super::Item) -> Option<DocumentIdentifier> {
    let args: Vec<&str> = item.args().collect();
    if args.len() < 8 {
        return None;
    }
    let subject = identity_to_hex(args[1])?;
    let digests = DigestSet::empty().with_sha1_base64(args[2]).ok()?;
    let published = Timestamp::parse_pair(args[3], args[4]).ok()?;
    Some(DocumentIdentifier::new(DocType::ServerDescriptor, subject, published, digests))
}
