//! Read-only HTTP view of the archive over the directory-protocol paths
//! the fetcher uses, plus `/index.json`, `/status` and raw archived files
//! under `/archive/`.

use std::collections::BTreeMap;
use std::future::Future;
use std::io::Write;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use flate2::write::GzEncoder;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::archive::Archive;
use crate::docmodel::{DigestSet, DocType, Timestamp};
use crate::fetcher::paths;
use crate::scheduler::Clock;

/// Seconds of history covered by `/tor/server/all` and `/tor/extra/all`.
pub const ALL_WINDOW_SECS: i64 = 86_400;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReport {
    pub last_completed: BTreeMap<String, Timestamp>,
    pub archive_counts: BTreeMap<String, usize>,
    pub pending_expectations: usize,
    pub permanently_missed: u64,
}

pub trait StatusSource: Send + Sync + 'static {
    fn status(&self) -> StatusReport;

    fn task_status(&self) -> BTreeMap<String, Timestamp> {
        self.status().last_completed
    }
}

/// Counts only; for serving an archive nobody is collecting into.
pub struct ArchiveStatus(pub Arc<Archive>);

impl StatusSource for ArchiveStatus {
    fn status(&self) -> StatusReport {
        StatusReport { archive_counts: self.0.counts(), ..Default::default() }
    }

    fn task_status(&self) -> BTreeMap<String, Timestamp> {
        BTreeMap::new()
    }
}

#[derive(Clone)]
pub struct DirServer {
    archive: Arc<Archive>,
    clock: Arc<dyn Clock>,
    status: Arc<dyn StatusSource>,
}

#[derive(Debug)]
enum Reply {
    Ok(Vec<u8>, &'static str),
    NotFound,
    BadRequest(String),
    Internal,
}

impl DirServer {
    pub fn new(archive: Arc<Archive>, clock: Arc<dyn Clock>, status: Arc<dyn StatusSource>) -> Self {
        DirServer { archive, clock, status }
    }

    pub fn router(&self) -> Router {
        Router::new().fallback(handle).with_state(self.clone())
    }

    /// Serves until `shutdown` resolves, then drains in-flight requests.
    pub async fn serve(self, listener: TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
        tracing::info!(addr = ?listener.local_addr().ok(), "directory server listening");
        axum::serve(listener, self.router()).with_graceful_shutdown(shutdown).await
    }

    fn respond(&self, path: &str) -> Reply {
        let now = self.clock.now();
        match path {
            "/index.json" => {
                return Reply::Ok(self.archive.build_index(&self.status.task_status()).to_json().into_bytes(), "application/json")
            }
            "/status" => {
                let body = serde_json::to_vec_pretty(&self.status.status()).expect("status serializes");
                return Reply::Ok(body, "application/json");
            }
            _ => {}
        }
        for flavor in [DocType::ConsensusNs, DocType::ConsensusMicrodesc] {
            if paths::current_consensus(flavor) == Some(path) {
                return match self.archive.current_consensus(flavor, now) {
                    Some(doc) => Reply::Ok(doc.body.to_vec(), "text/plain"),
                    None => Reply::NotFound,
                };
            }
        }
        for doctype in [DocType::ServerDescriptor, DocType::ExtraInfoDescriptor] {
            if paths::all_descriptors(doctype) == Some(path) {
                let mut entries = self.archive.stored_since(doctype, now - ALL_WINDOW_SECS);
                entries.sort_by(|a, b| (a.stored_at, &a.path).cmp(&(b.stored_at, &b.path)));
                return self.concat(entries.iter().map(|e| Some(e.clone())));
            }
        }
        for (prefix, doctype) in [
            (paths::SERVER_D, DocType::ServerDescriptor),
            (paths::EXTRA_D, DocType::ExtraInfoDescriptor),
            (paths::MICRO_D, DocType::Microdescriptor),
        ] {
            if let Some(list) = path.strip_prefix(prefix) {
                return match parse_digest_list(doctype, list) {
                    Ok(ds) => self.concat(ds.iter().map(|d| self.archive.find(doctype, d))),
                    Err(bad) => Reply::BadRequest(bad),
                };
            }
        }
        if let Some(rel) = path.strip_prefix("/archive/") {
            return match self.archive.entry_by_path(rel) {
                Some(e) => match self.archive.read_verified(&e) {
                    Ok(b) => Reply::Ok(b, "text/plain"),
                    Err(err) => {
                        tracing::error!(path = rel, error = %err, "archived file failed verification");
                        Reply::Internal
                    }
                },
                None => Reply::NotFound,
            };
        }
        Reply::NotFound
    }

    fn concat(&self, entries: impl Iterator<Item = Option<crate::archive::ArchiveEntry>>) -> Reply {
        let mut out = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for e in entries.flatten() {
            if !seen.insert(e.path.clone()) {
                continue;
            }
            match self.archive.load_entry(&e) {
                Ok(doc) => out.extend_from_slice(&doc.body),
                Err(err) => tracing::error!(path = %e.path, error = %err, "skipping unreadable entry"),
            }
        }
        if out.is_empty() {
            Reply::NotFound
        } else {
            Reply::Ok(out, "text/plain")
        }
    }
}

/// Splits and validates a digest list: 40 hex digits joined by `+` for
/// server and extra-info descriptors, 43 base64 characters joined by `-`
/// for microdescriptors.
fn parse_digest_list(doctype: DocType, list: &str) -> Result<Vec<DigestSet>, String> {
    let list = list.strip_suffix(".z").unwrap_or(list);
    if list.is_empty() {
        return Err("empty digest list".into());
    }
    let (sep, parse): (char, fn(&str) -> Option<DigestSet>) = match doctype {
        DocType::Microdescriptor => ('-', |s| {
            let ok = s.len() == 43 && s.bytes().all(|c| c.is_ascii_alphanumeric() || c == b'+' || c == b'/');
            ok.then(|| DigestSet::empty().with_sha256_base64(s).ok()).flatten()
        }),
        _ => ('+', |s| {
            let ok = s.len() == 40 && s.bytes().all(|c| c.is_ascii_hexdigit());
            ok.then(|| DigestSet::empty().with_sha1_hex(s).ok()).flatten()
        }),
    };
    list.split(sep).map(|s| parse(s).ok_or_else(|| format!("malformed digest {s:?}"))).collect()
}

fn wants_gzip(headers: &HeaderMap) -> bool {
    headers
        .get_all(header::ACCEPT_ENCODING)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .any(|v| {
            let mut it = v.split(';');
            let name = it.next().unwrap_or("").trim();
            let zero = it.any(|p| matches!(p.trim(), "q=0" | "q=0.0" | "q=0.00" | "q=0.000"));
            name.eq_ignore_ascii_case("gzip") && !zero
        })
}

async fn handle(State(srv): State<DirServer>, uri: Uri, headers: HeaderMap) -> Response {
    let path = uri.path().to_string();
    let reply = {
        let srv = srv.clone();
        let path = path.clone();
        tokio::task::spawn_blocking(move || srv.respond(&path)).await.unwrap_or(Reply::Internal)
    };
    let status = match &reply {
        Reply::Ok(..) => StatusCode::OK,
        Reply::NotFound => StatusCode::NOT_FOUND,
        Reply::BadRequest(_) => StatusCode::BAD_REQUEST,
        Reply::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    };
    tracing::debug!(event = "serve", path = %path, status = status.as_u16());
    match reply {
        Reply::Ok(body, ctype) if wants_gzip(&headers) => {
            let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
            let gz = enc.write_all(&body).and_then(|_| enc.finish());
            match gz {
                Ok(gz) => (
                    status,
                    [(header::CONTENT_TYPE, ctype), (header::CONTENT_ENCODING, "gzip")],
                    Body::from(gz),
                )
                    .into_response(),
                Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
            }
        }
        Reply::Ok(body, ctype) => (status, [(header::CONTENT_TYPE, ctype)], Body::from(body)).into_response(),
        Reply::BadRequest(msg) => (status, msg).into_response(),
        _ => status.into_response(),
    }
}
