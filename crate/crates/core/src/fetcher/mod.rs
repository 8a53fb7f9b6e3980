//! HTTP downloads from directory servers and OnionPerf hosts.
//!
//! Every request asks an [`AttemptGate`] first, so the per-phase ledger
//! decides what may be sent where. Retrying means asking the next server;
//! a single request is never repeated here.

mod endpoint;
pub mod paths;

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub use endpoint::{select_servers, EndpointError, Role, ServerEndpoint};

use crate::docmodel::{DigestKey, DocType, DocumentIdentifier, RawDocument, Timestamp};
use crate::docparse;
use crate::refchecker::AttemptKey;
use crate::scheduler::{Clock, Phase};

pub const ONIONPERF_SIZES: [u64; 3] = [51_200, 1_048_576, 5_242_880];

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum FetchError {
    #[error("http status {0}")]
    HttpStatus(u16),
    #[error("request timed out")]
    Timeout,
    #[error("response body exceeds {0} bytes")]
    TooLarge(usize),
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("{0} cannot serve {1} documents")]
    WrongRole(String, DocType),
    #[error("request not approved")]
    NotApproved,
}

impl FetchError {
    /// Failures that say nothing about a particular document, only that
    /// the server could not be talked to.
    pub fn is_network(&self) -> bool {
        matches!(self, FetchError::Timeout | FetchError::Connect(_) | FetchError::Transport(_))
    }

    /// Gone for good: 404 and 410.
    pub fn is_permanent(&self) -> bool {
        matches!(self, FetchError::HttpStatus(404 | 410))
    }

    fn status(&self) -> u16 {
        match self {
            FetchError::HttpStatus(s) => *s,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FetchConfig {
    pub max_batch: usize,
    pub per_server: usize,
    pub global: usize,
    pub timeout_secs: u64,
    pub max_body_bytes: usize,
}

impl Default for FetchConfig {
    fn default() -> Self {
        FetchConfig { max_batch: 96, per_server: 4, global: 32, timeout_secs: 30, max_body_bytes: 32 << 20 }
    }
}

/// Decides whether a (document, server) request may be sent, and learns
/// about servers that cannot be reached.
pub trait AttemptGate: Send + Sync {
    fn approve(&self, key: &AttemptKey, server: &ServerEndpoint) -> bool;
    fn unreachable(&self, server: &ServerEndpoint);
}

/// Approves everything. For one-off tools and tests.
pub struct Unrestricted;

impl AttemptGate for Unrestricted {
    fn approve(&self, _: &AttemptKey, _: &ServerEndpoint) -> bool {
        true
    }
    fn unreachable(&self, _: &ServerEndpoint) {}
}

#[derive(Debug, Default)]
pub struct FetchStats {
    pub requests: AtomicU64,
    pub failures: AtomicU64,
    pub bytes: AtomicU64,
    pub mismatches: AtomicU64,
}

/// What came back from one or more requests. Bodies that could not be
/// digested as the expected type are kept in `unrecognized`.
#[derive(Debug, Default, Clone)]
pub struct Fetched {
    pub documents: Vec<RawDocument>,
    pub unrecognized: Vec<(Bytes, String)>,
    pub errors: Vec<(String, FetchError)>,
}

impl Fetched {
    pub fn extend(&mut self, other: Fetched) {
        self.documents.extend(other.documents);
        self.unrecognized.extend(other.unrecognized);
        self.errors.extend(other.errors);
    }
}

/// Documents of one type to be fetched by digest. Chunked into requests of
/// at most `max_batch` digests.
#[derive(Debug, Clone)]
pub struct FetchBatch {
    pub doctype: DocType,
    pub ids: Vec<DocumentIdentifier>,
    pub phase: Phase,
}

#[derive(Debug, Default, Clone)]
pub struct BatchResult {
    pub fetched: Fetched,
    pub missing: Vec<DocumentIdentifier>,
    /// Bodies whose digest matched nothing requested.
    pub mismatches: usize,
    pub requests: usize,
    /// Size of `missing` after each server that was asked.
    pub missing_history: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct OnionperfHost {
    pub endpoint: ServerEndpoint,
    pub source: String,
}

impl OnionperfHost {
    pub fn file_name(&self, size: u64, day: Timestamp) -> String {
        format!("{}-{}-{}.tpf", self.source, size, day.format("%Y-%m-%d"))
    }

    pub fn subject(&self, size: u64) -> String {
        format!("{}-{}", self.source, size)
    }
}

#[derive(Debug, Clone)]
pub struct OnionperfResult {
    pub subject: String,
    pub day: Timestamp,
    pub outcome: Result<RawDocument, FetchError>,
    /// A body that arrived but was not a Torperf file.
    pub unrecognized: Option<Bytes>,
}

pub struct Fetcher {
    client: reqwest::Client,
    cfg: FetchConfig,
    clock: Arc<dyn Clock>,
    global: Arc<Semaphore>,
    per_server: Mutex<HashMap<String, Arc<Semaphore>>>,
    stats: FetchStats,
}

fn map_reqwest(e: reqwest::Error) -> FetchError {
    if e.is_timeout() {
        FetchError::Timeout
    } else if e.is_connect() {
        FetchError::Connect(e.to_string())
    } else {
        FetchError::Transport(e.to_string())
    }
}

impl Fetcher {
    pub fn new(cfg: FetchConfig, clock: Arc<dyn Clock>) -> Result<Self, FetchError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .user_agent(concat!("dircollect/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| FetchError::Transport(e.to_string()))?;
        Ok(Fetcher {
            client,
            global: Arc::new(Semaphore::new(cfg.global.max(1))),
            per_server: Mutex::new(HashMap::new()),
            stats: FetchStats::default(),
            cfg,
            clock,
        })
    }

    pub fn config(&self) -> &FetchConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &FetchStats {
        &self.stats
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    fn server_permits(&self, server: &str) -> Arc<Semaphore> {
        self.per_server
            .lock()
            .unwrap()
            .entry(server.to_string())
            .or_insert_with(|| Arc::new(Semaphore::new(self.cfg.per_server.max(1))))
            .clone()
    }

    /// One GET. The body is decompressed and capped.
    pub async fn get(&self, server: &ServerEndpoint, path: &str) -> Result<Bytes, FetchError> {
        let per = self.server_permits(&server.server_id);
        let _p = per.acquire_owned().await.expect("semaphore open");
        let _g = self.global.clone().acquire_owned().await.expect("semaphore open");
        self.stats.requests.fetch_add(1, Ordering::Relaxed);
        let result = self.get_inner(server, path).await;
        match &result {
            Ok(body) => {
                self.stats.bytes.fetch_add(body.len() as u64, Ordering::Relaxed);
                tracing::info!(event = "fetch", server = %server.server_id, path, status = 200, bytes = body.len());
            }
            Err(e) => {
                self.stats.failures.fetch_add(1, Ordering::Relaxed);
                tracing::info!(event = "fetch", server = %server.server_id, path, status = e.status(), error = %e);
            }
        }
        result
    }

    async fn get_inner(&self, server: &ServerEndpoint, path: &str) -> Result<Bytes, FetchError> {
        let mut resp = self.client.get(server.url(path)).send().await.map_err(map_reqwest)?;
        if !resp.status().is_success() {
            return Err(FetchError::HttpStatus(resp.status().as_u16()));
        }
        let cap = self.cfg.max_body_bytes;
        if resp.content_length().is_some_and(|n| n as usize > cap) {
            return Err(FetchError::TooLarge(cap));
        }
        let mut body = BytesMut::new();
        while let Some(chunk) = resp.chunk().await.map_err(map_reqwest)? {
            if body.len() + chunk.len() > cap {
                return Err(FetchError::TooLarge(cap));
            }
            body.extend_from_slice(&chunk);
        }
        Ok(body.freeze())
    }

    /// Splits a response into documents of `doctype`, keeping whatever
    /// cannot be digested as unrecognized.
    fn split(&self, body: &Bytes, doctype: DocType, server: &ServerEndpoint, into: &mut Fetched) {
        let now = self.clock.now();
        let source = server.server_id.clone();
        for part in docparse::split_concatenated(body, doctype) {
            let slice = body.slice_ref(part);
            match RawDocument::new(doctype, slice.clone(), source.clone(), now) {
                Ok(doc) => into.documents.push(doc),
                Err(e) => {
                    tracing::warn!(server = %source, doctype = %doctype, error = %e, "response not recognized");
                    into.unrecognized.push((slice, source.clone()));
                }
            }
        }
    }

    /// Fetches `path` from one server and splits the response.
    pub async fn fetch_path(&self, server: &ServerEndpoint, path: &str, doctype: DocType) -> Result<Fetched, FetchError> {
        let body = self.get(server, path).await?;
        let mut out = Fetched::default();
        self.split(&body, doctype, server, &mut out);
        Ok(out)
    }

    /// `/tor/status-vote/current/consensus[-microdesc]`.
    pub async fn fetch_current_consensus(&self, flavor: DocType, server: &ServerEndpoint) -> Result<Fetched, FetchError> {
        let path = paths::current_consensus(flavor).ok_or(FetchError::WrongRole(server.server_id.clone(), flavor))?;
        if !server.has(Role::DirectoryCache) {
            return Err(FetchError::WrongRole(server.server_id.clone(), flavor));
        }
        self.fetch_path(server, path, flavor).await
    }

    /// Same path on several servers at once, one request each, with the
    /// gate consulted per server under `key_for(server)`.
    pub async fn fetch_each(
        &self,
        servers: &[ServerEndpoint],
        path: &str,
        doctype: DocType,
        gate: &dyn AttemptGate,
        key_for: impl Fn(&ServerEndpoint) -> AttemptKey,
    ) -> Fetched {
        let approved: Vec<&ServerEndpoint> = servers.iter().filter(|s| gate.approve(&key_for(s), s)).collect();
        // concurrency is bounded by the fetcher's semaphores
        let results = futures::future::join_all(approved.iter().map(|&s| self.get(s, path))).await;
        let mut out = Fetched::default();
        for (s, r) in approved.into_iter().zip(results) {
            match r {
                Ok(body) => self.split(&body, doctype, s, &mut out),
                Err(e) => {
                    if e.is_network() {
                        gate.unreachable(s);
                    }
                    out.errors.push((s.server_id.clone(), e));
                }
            }
        }
        out
    }

    /// Votes for the coming period from every authority concurrently.
    pub async fn fetch_next_votes(&self, authorities: &[ServerEndpoint], next_va: Timestamp, gate: &dyn AttemptGate) -> Fetched {
        self.fetch_each(authorities, paths::NEXT_AUTHORITY, DocType::Vote, gate, |s| AttemptKey::Guess {
            doctype: DocType::Vote,
            subject: s.server_id.clone(),
            datetime: next_va,
        })
        .await
    }

    /// Detached signatures for the coming period from every authority.
    /// Distinct bodies are all kept.
    pub async fn fetch_detached_signatures(
        &self,
        authorities: &[ServerEndpoint],
        next_va: Timestamp,
        gate: &dyn AttemptGate,
    ) -> Fetched {
        let key = AttemptKey::Guess { doctype: DocType::DetachedSignature, subject: String::new(), datetime: next_va };
        self.fetch_each(authorities, paths::NEXT_SIGNATURES, DocType::DetachedSignature, gate, |_| key.clone())
            .await
    }

    /// `/tor/server/all` or `/tor/extra/all` once per authority. Failures
    /// are not repeated.
    pub async fn fetch_all_descriptors(&self, doctype: DocType, authorities: &[ServerEndpoint]) -> Fetched {
        let Some(path) = paths::all_descriptors(doctype) else {
            return Fetched::default();
        };
        self.fetch_each(authorities, path, doctype, &Unrestricted, |_| AttemptKey::Guess {
            doctype,
            subject: String::new(),
            datetime: Timestamp::EPOCH,
        })
        .await
    }

    async fn batch_request(
        &self,
        doctype: DocType,
        server: &ServerEndpoint,
        ids: Vec<DocumentIdentifier>,
    ) -> (Vec<DocumentIdentifier>, Result<Bytes, FetchError>) {
        let digests: Vec<_> = ids.iter().map(|i| &i.digests).collect();
        let result = match paths::by_digest(doctype, &digests) {
            Some(path) => self.get(server, &path).await,
            None => Err(FetchError::WrongRole(server.server_id.clone(), doctype)),
        };
        (ids, result)
    }

    /// Fetches `batch` by digest, server after server, removing what was
    /// received before asking the next one.
    pub async fn fetch_batch(&self, batch: &FetchBatch, servers: &[ServerEndpoint], gate: &dyn AttemptGate) -> BatchResult {
        let doctype = batch.doctype;
        let mut result = BatchResult::default();
        let mut seen = HashSet::new();
        let mut missing: Vec<DocumentIdentifier> = batch
            .ids
            .iter()
            .filter(|id| id.doctype == doctype && id.digests.primary_key().is_some_and(|k| seen.insert(k)))
            .cloned()
            .collect();
        let max = self.cfg.max_batch.max(1);
        for server in servers.iter().filter(|s| s.serves(doctype)) {
            if missing.is_empty() {
                break;
            }
            // Chunks are approved lazily so that digests never sent to an
            // unreachable server are not charged to it.
            let mut pos = 0;
            let mut next_chunk = || {
                let mut ids = Vec::new();
                while pos < missing.len() && ids.len() < max {
                    let id = &missing[pos];
                    pos += 1;
                    if gate.approve(&AttemptKey::of(id), server) {
                        ids.push(id.clone());
                    }
                }
                ids
            };
            // Probe with one chunk so that an unreachable server costs a
            // single request.
            let probe_ids = next_chunk();
            if probe_ids.is_empty() {
                continue;
            }
            result.requests += 1;
            let probe = self.batch_request(doctype, server, probe_ids).await;
            if probe.1.as_ref().is_err_and(FetchError::is_network) {
                gate.unreachable(server);
                result.fetched.errors.push((server.server_id.clone(), probe.1.unwrap_err()));
                result.missing_history.push(missing.len());
                continue;
            }
            let mut chunks = Vec::new();
            loop {
                let c = next_chunk();
                if c.is_empty() {
                    break;
                }
                chunks.push(c);
            }
            result.requests += chunks.len();
            let mut responses = vec![probe];
            let more: Vec<_> = stream::iter(chunks)
                .map(|ids| self.batch_request(doctype, server, ids))
                .buffer_unordered(self.cfg.per_server.max(1))
                .collect()
                .await;
            responses.extend(more);

            let mut by_key: HashMap<DigestKey, DocumentIdentifier> =
                missing.iter().map(|i| (i.digests.primary_key().unwrap(), i.clone())).collect();
            for (_, r) in responses {
                let body = match r {
                    Ok(b) => b,
                    Err(e) => {
                        if e.is_network() {
                            gate.unreachable(server);
                        }
                        result.fetched.errors.push((server.server_id.clone(), e));
                        continue;
                    }
                };
                let mut got = Fetched::default();
                self.split(&body, doctype, server, &mut got);
                result.fetched.unrecognized.extend(got.unrecognized);
                for doc in got.documents {
                    let hit = doc.digests.keys().into_iter().find_map(|k| by_key.remove(&k));
                    match hit {
                        Some(id) => result.fetched.documents.push(doc.with_context_datetime(Some(id.datetime))),
                        None => {
                            result.mismatches += 1;
                            self.stats.mismatches.fetch_add(1, Ordering::Relaxed);
                            tracing::warn!(server = %server.server_id, doctype = %doctype, "received a document that was not requested");
                            result.fetched.unrecognized.push((doc.body, server.server_id.clone()));
                        }
                    }
                }
            }
            missing.retain(|i| by_key.contains_key(&i.digests.primary_key().unwrap()));
            result.missing_history.push(missing.len());
        }
        result.missing = missing;
        result
    }

    /// Results files of one day from one host, one request per size.
    pub async fn fetch_onionperf(&self, host: &OnionperfHost, day: Timestamp, sizes: &[u64]) -> Vec<OnionperfResult> {
        let day = day.start_of_day();
        let futs = sizes.iter().map(|&size| async move {
            let path = format!("/{}", host.file_name(size, day));
            let subject = host.subject(size);
            match self.get(&host.endpoint, &path).await {
                Err(e) => OnionperfResult { subject, day, outcome: Err(e), unrecognized: None },
                Ok(body) => match RawDocument::new(DocType::TorperfResults, body.clone(), host.endpoint.server_id.clone(), self.clock.now()) {
                    Ok(doc) => OnionperfResult { subject, day, outcome: Ok(doc.with_context_datetime(Some(day))), unrecognized: None },
                    Err(e) => OnionperfResult {
                        subject,
                        day,
                        outcome: Err(FetchError::Transport(e.to_string())),
                        unrecognized: Some(body),
                    },
                },
            }
        });
        futures::future::join_all(futs).await
    }
}
