//! Tolerant parsing of directory documents and Torperf results.
//!
//! Parsing never re-serializes: a [`ParsedDocument`] is a read-only view of
//! keyword items over the original bytes. Anything that fails here is still
//! archivable by the caller as an unrecognized blob.

mod digest;
mod refs;

use bytes::Bytes;

pub use digest::{compute_digests, signed_range};
pub(crate) use digest::full_sha256_hex;
pub use refs::{document_datetime, document_subject, extract_references, extract_timings, References};

use crate::docmodel::{DigestSet, DocType, DocumentIdentifier, ModelError, RawDocument, Timestamp};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum DocError {
    #[error("empty document")]
    Empty,
    #[error("unrecognized document")]
    UnrecognizedDocument,
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("digest range not found: missing {0:?}")]
    DigestRangeNotFound(&'static str),
    #[error("missing timing field {0:?}")]
    MissingTimingField(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The `@type <name> <major>.<minor>` header line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub type_name: String,
    pub major: u32,
    pub minor: u32,
}

impl Annotation {
    pub fn for_type(doctype: DocType) -> Self {
        let (name, major, minor) = doctype.annotation();
        Annotation { type_name: name.to_string(), major, minor }
    }

    pub fn line(&self) -> String {
        format!("@type {} {}.{}\n", self.type_name, self.major, self.minor)
    }

    pub fn doctype(&self) -> Option<DocType> {
        DocType::from_annotation_name(&self.type_name)
    }

    fn parse_line(line: &[u8]) -> Option<Annotation> {
        let line = std::str::from_utf8(line).ok()?;
        let rest = line.strip_prefix("@type ")?;
        let mut parts = rest.split_whitespace();
        let type_name = parts.next()?.to_string();
        let (major, minor) = parts.next()?.split_once('.')?;
        if parts.next().is_some() {
            return None;
        }
        Some(Annotation { type_name, major: major.parse().ok()?, minor: minor.parse().ok()? })
    }
}

/// Prepends the type annotation to the document body.
pub fn annotate(raw: &RawDocument) -> Vec<u8> {
    let line = Annotation::for_type(raw.doctype).line();
    let mut out = Vec::with_capacity(line.len() + raw.body.len());
    out.extend_from_slice(line.as_bytes());
    out.extend_from_slice(&raw.body);
    out
}

/// Removes a leading `@type` line, if there is one.
pub fn strip_annotation(bytes: &[u8]) -> (Option<Annotation>, &[u8]) {
    if !bytes.starts_with(b"@type ") {
        return (None, bytes);
    }
    let end = bytes.iter().position(|&b| b == b'\n');
    let (line, rest) = match end {
        Some(i) => (&bytes[..i], &bytes[i + 1..]),
        None => return (None, bytes),
    };
    match Annotation::parse_line(line) {
        Some(a) => (Some(a), rest),
        None => (None, bytes),
    }
}

/// Skips any leading `@`-prefixed lines (tor's `@downloaded-at`,
/// `@source`, CollecTor's `@type`).
fn skip_at_lines(mut bytes: &[u8]) -> &[u8] {
    while bytes.first() == Some(&b'@') {
        match bytes.iter().position(|&b| b == b'\n') {
            Some(i) => bytes = &bytes[i + 1..],
            None => return &bytes[bytes.len()..],
        }
    }
    bytes
}

fn first_line(bytes: &[u8]) -> &[u8] {
    let end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    &bytes[..end]
}

fn is_kv_token(tok: &str) -> bool {
    match tok.split_once('=') {
        Some((k, _)) => !k.is_empty() && k.bytes().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == b'_'),
        None => false,
    }
}

fn is_torperf_line(line: &str) -> bool {
    let mut toks = line.split_whitespace().peekable();
    toks.peek().is_some() && toks.all(is_kv_token)
}

/// Determines the document type from an `@type` annotation or the leading
/// keyword of the body.
pub fn detect_type(bytes: &[u8]) -> Result<DocType, DocError> {
    if bytes.is_empty() {
        return Err(DocError::Empty);
    }
    if let (Some(a), _) = strip_annotation(bytes) {
        if let Some(t) = a.doctype() {
            return Ok(t);
        }
    }
    let body = skip_at_lines(bytes);
    detect_from_keyword(body)
}

fn detect_from_keyword(body: &[u8]) -> Result<DocType, DocError> {
    let line = first_line(body);
    let line = std::str::from_utf8(line).map_err(|_| DocError::UnrecognizedDocument)?;
    let line = line.trim_end_matches('\r');
    let keyword = line.split_whitespace().next().unwrap_or("");
    match keyword {
        "network-status-version" => {
            let microdesc = line.split_whitespace().nth(2) == Some("microdesc");
            // vote-status decides between vote and consensus
            let status = body
                .split(|&b| b == b'\n')
                .take(16)
                .filter_map(|l| std::str::from_utf8(l).ok())
                .find_map(|l| l.strip_prefix("vote-status "))
                .map(str::trim);
            match status {
                Some("vote") => Ok(DocType::Vote),
                Some("consensus") if microdesc => Ok(DocType::ConsensusMicrodesc),
                Some("consensus") => Ok(DocType::ConsensusNs),
                _ => Err(DocError::UnrecognizedDocument),
            }
        }
        "router" => Ok(DocType::ServerDescriptor),
        "extra-info" => Ok(DocType::ExtraInfoDescriptor),
        "onion-key" => Ok(DocType::Microdescriptor),
        "consensus-digest" => Ok(DocType::DetachedSignature),
        _ if !line.is_empty() && line.bytes().all(|c| c.is_ascii_digit()) => Ok(DocType::BandwidthList),
        _ if is_torperf_line(line) => Ok(DocType::TorperfResults),
        _ => Err(DocError::UnrecognizedDocument),
    }
}

/// An object block (`-----BEGIN X----- ... -----END X-----`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Object {
    pub tag: String,
    pub content: String,
}

/// One keyword line plus its optional object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub keyword: String,
    pub args: String,
    pub object: Option<Object>,
}

impl Item {
    pub fn arg(&self, i: usize) -> Option<&str> {
        self.args.split_whitespace().nth(i)
    }

    pub fn args(&self) -> impl Iterator<Item = &str> {
        self.args.split_whitespace()
    }
}

#[derive(Debug, Clone)]
pub struct ParsedDocument {
    pub doctype: DocType,
    pub items: Vec<Item>,
    pub source_bytes: Bytes,
    /// Datetime supplied by the referencing document, if any.
    pub context_datetime: Option<crate::docmodel::Timestamp>,
}

impl ParsedDocument {
    pub fn first(&self, keyword: &str) -> Option<&Item> {
        self.items.iter().find(|i| i.keyword == keyword)
    }

    pub fn all<'a>(&'a self, keyword: &'a str) -> impl Iterator<Item = &'a Item> + 'a {
        self.items.iter().filter(move |i| i.keyword == keyword)
    }

    pub fn value(&self, keyword: &str) -> Option<&str> {
        self.first(keyword).map(|i| i.args.as_str())
    }
}

/// Parses a document body into keyword items.
pub fn parse(raw: &RawDocument) -> Result<ParsedDocument, DocError> {
    let (_, body) = strip_annotation(&raw.body);
    let body = skip_at_lines(body);
    let items = parse_items(body)?;
    if raw.doctype == DocType::TorperfResults {
        validate_torperf(&items)?;
    }
    Ok(ParsedDocument {
        doctype: raw.doctype,
        items,
        source_bytes: raw.body.clone(),
        context_datetime: raw.context_datetime,
    })
}

/// Identifier of a concrete document. Fields that cannot be read fall back
/// to an empty subject and to the context or retrieval time.
pub fn identify(raw: &RawDocument) -> DocumentIdentifier {
    match parse(raw) {
        Ok(doc) => identify_parsed(&doc, raw.digests.clone(), raw.retrieved_at),
        Err(_) => DocumentIdentifier::new(
            raw.doctype,
            "",
            raw.context_datetime.unwrap_or(raw.retrieved_at),
            raw.digests.clone(),
        ),
    }
}

pub fn identify_parsed(doc: &ParsedDocument, digests: DigestSet, fallback: Timestamp) -> DocumentIdentifier {
    let datetime = document_datetime(doc).or(doc.context_datetime).unwrap_or(fallback);
    DocumentIdentifier::new(doc.doctype, document_subject(doc), datetime, digests)
}

/// Detects and parses bytes that did not come with a known type.
pub fn parse_bytes(bytes: &[u8]) -> Result<ParsedDocument, DocError> {
    let doctype = detect_type(bytes)?;
    let (_, body) = strip_annotation(bytes);
    let raw = RawDocument::new(doctype, Bytes::copy_from_slice(skip_at_lines(body)), "", Default::default())?;
    parse(&raw)
}

fn validate_torperf(items: &[Item]) -> Result<(), DocError> {
    if items.is_empty() {
        return Err(DocError::MalformedDocument("no torperf records".into()));
    }
    for item in items {
        if item.object.is_some() || !is_kv_token(&item.keyword) || !item.args().all(is_kv_token) {
            return Err(DocError::MalformedDocument(format!("bad torperf record {:?}", item.keyword)));
        }
    }
    Ok(())
}

fn parse_items(body: &[u8]) -> Result<Vec<Item>, DocError> {
    let mut items: Vec<Item> = Vec::new();
    let mut lines = body.split(|&b| b == b'\n').enumerate();
    while let Some((lineno, raw_line)) = lines.next() {
        let line = std::str::from_utf8(raw_line)
            .map_err(|_| DocError::MalformedDocument(format!("line {} is not UTF-8", lineno + 1)))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        if let Some(tag) = line.strip_prefix("-----BEGIN ").and_then(|r| r.strip_suffix("-----")) {
            let end_marker = format!("-----END {tag}-----");
            let mut content = String::new();
            let mut closed = false;
            for (n, l) in lines.by_ref() {
                let l = std::str::from_utf8(l)
                    .map_err(|_| DocError::MalformedDocument(format!("line {} is not UTF-8", n + 1)))?
                    .trim_end_matches('\r');
                if l == end_marker {
                    closed = true;
                    break;
                }
                content.push_str(l);
                content.push('\n');
            }
            if !closed {
                return Err(DocError::MalformedDocument(format!("truncated {tag} object")));
            }
            let owner = items
                .last_mut()
                .ok_or_else(|| DocError::MalformedDocument("object without keyword".into()))?;
            if owner.object.is_some() {
                return Err(DocError::MalformedDocument(format!("second object after {:?}", owner.keyword)));
            }
            owner.object = Some(Object { tag: tag.to_string(), content });
            continue;
        }
        let (keyword, args) = match line.split_once([' ', '\t']) {
            Some((k, a)) => (k, a.trim()),
            None => (line, ""),
        };
        items.push(Item { keyword: keyword.to_string(), args: args.to_string(), object: None });
    }
    Ok(items)
}

/// Keyword that starts each document of a concatenation.
fn start_keyword(doctype: DocType) -> Option<&'static str> {
    match doctype {
        DocType::ServerDescriptor => Some("router "),
        DocType::ExtraInfoDescriptor => Some("extra-info "),
        DocType::Microdescriptor => Some("onion-key\n"),
        DocType::ConsensusNs | DocType::ConsensusMicrodesc | DocType::Vote => Some("network-status-version "),
        DocType::DetachedSignature => Some("consensus-digest "),
        DocType::BandwidthList | DocType::TorperfResults => None,
    }
}

/// A document cut out of a concatenated file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk<'a> {
    pub annotation: Option<Annotation>,
    pub doctype: Option<DocType>,
    pub body: &'a [u8],
}

fn line_starts(bytes: &[u8]) -> impl Iterator<Item = usize> + '_ {
    std::iter::once(0).chain(
        bytes
            .iter()
            .enumerate()
            .filter(|(i, &b)| b == b'\n' && i + 1 < bytes.len())
            .map(|(i, _)| i + 1),
    )
}

/// Splits documents of one type concatenated together (as served by
/// `/tor/server/d/...` or found in a `cached-descriptors` file). Leading
/// `@` lines before each document are dropped from its body.
pub fn split_concatenated(bytes: &[u8], doctype: DocType) -> Vec<&[u8]> {
    let Some(kw) = start_keyword(doctype) else {
        let body = skip_at_lines(bytes);
        return if body.is_empty() { vec![] } else { vec![body] };
    };
    let kw = kw.as_bytes();
    let starts: Vec<usize> = line_starts(bytes).filter(|&i| bytes[i..].starts_with(kw)).collect();
    let mut out = Vec::with_capacity(starts.len() + 1);
    // bytes before the first document are kept so that callers can archive them
    let head_end = starts.first().copied().unwrap_or(bytes.len());
    let head = skip_at_lines(&bytes[..trim_trailing_at_lines(bytes, 0, head_end)]);
    if head.iter().any(|b| !b.is_ascii_whitespace()) {
        out.push(head);
    }
    for (n, &s) in starts.iter().enumerate() {
        let mut end = starts.get(n + 1).copied().unwrap_or(bytes.len());
        // trailing @-annotations belong to the next document
        if n + 1 < starts.len() {
            end = trim_trailing_at_lines(bytes, s, end);
        }
        out.push(&bytes[s..end]);
    }
    out
}

fn trim_trailing_at_lines(bytes: &[u8], start: usize, mut end: usize) -> usize {
    loop {
        let seg = &bytes[start..end];
        if seg.is_empty() || seg[seg.len() - 1] != b'\n' {
            return end;
        }
        let prev_nl = seg[..seg.len() - 1].iter().rposition(|&b| b == b'\n');
        let line_start = prev_nl.map(|p| start + p + 1).unwrap_or(start);
        if line_start > start && bytes[line_start] == b'@' {
            end = line_start;
        } else {
            return end;
        }
    }
}

/// Splits an arbitrary file into documents: on `@type` lines when present,
/// otherwise on the start keyword of the first document's type. A file
/// whose type cannot be detected is returned as a single untyped chunk.
pub fn split_file(bytes: &[u8]) -> Vec<Chunk<'_>> {
    if bytes.is_empty() {
        return vec![];
    }
    let type_starts: Vec<usize> = line_starts(bytes).filter(|&i| bytes[i..].starts_with(b"@type ")).collect();
    if !type_starts.is_empty() {
        let mut out = Vec::new();
        if type_starts[0] > 0 {
            out.extend(split_untyped(&bytes[..type_starts[0]]));
        }
        for (n, &s) in type_starts.iter().enumerate() {
            let end = type_starts.get(n + 1).copied().unwrap_or(bytes.len());
            let seg = &bytes[s..end];
            let (annotation, body) = strip_annotation(seg);
            let doctype = annotation.as_ref().and_then(|a| a.doctype());
            let body = skip_at_lines(body);
            if body.is_empty() {
                continue;
            }
            match doctype {
                Some(t) if start_keyword(t).is_some() => {
                    let parts = split_concatenated(body, t);
                    if parts.is_empty() {
                        out.push(Chunk { annotation: annotation.clone(), doctype: None, body });
                    }
                    for part in parts {
                        out.push(Chunk { annotation: annotation.clone(), doctype: Some(t), body: part });
                    }
                }
                _ => out.push(Chunk { annotation, doctype, body }),
            }
        }
        return out;
    }
    split_untyped(bytes)
}

fn split_untyped(bytes: &[u8]) -> Vec<Chunk<'_>> {
    let body = skip_at_lines(bytes);
    if body.is_empty() {
        return vec![];
    }
    match detect_from_keyword(body) {
        Ok(t) => {
            let parts = split_concatenated(bytes, t);
            if parts.is_empty() {
                vec![Chunk { annotation: None, doctype: None, body }]
            } else {
                parts.into_iter().map(|p| Chunk { annotation: None, doctype: Some(t), body: p }).collect()
            }
        }
        Err(_) => vec![Chunk { annotation: None, doctype: None, body }],
    }
}
