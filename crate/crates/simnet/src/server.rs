//! HTTP front of the simulated network.
//!
//! One listener per authority answers the directory protocol according to
//! the virtual clock; one listener per OnionPerf source serves daily
//! Torperf files. Requests to a down authority are read and then dropped
//! without a response. Every request lands in a shared log.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD_NO_PAD;
use base64::Engine;
use bytes::Bytes;
use dircollect::docmodel::{DocType, Timestamp};
use dircollect::fetcher::{paths, Role, ServerEndpoint};
use dircollect::scheduler::Clock;
use dircollect::service::{EndpointConfig, OnionperfHostConfig};
use http_body_util::Full;
use hyper::body::Incoming;
use hyper::service::service_fn;
use hyper::{Request, Response, StatusCode};
use hyper_util::rt::TokioIo;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::generate::{torperf_file, Corpus, PeriodDocs, SimDoc};
use crate::scenario::{SimPhase, SimScenario};

/// Status recorded for requests answered by dropping the connection.
pub const ABORTED: u16 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRecord {
    pub server: String,
    pub path: String,
    pub at: Timestamp,
    pub status: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Target {
    Authority(usize),
    Onionperf(usize),
}

/// Where a digest-addressed descriptor lives: (period, index).
type DescIndex = HashMap<(DocType, String), (usize, usize)>;

struct Inner {
    corpus: Corpus,
    clock: Arc<dyn Clock>,
    names: HashMap<Target, String>,
    descriptors: DescIndex,
    log: Mutex<Vec<RequestRecord>>,
}

fn descriptor_index(corpus: &Corpus) -> DescIndex {
    let mut idx = HashMap::new();
    for (pi, p) in corpus.periods.iter().enumerate() {
        for (i, d) in p.servers.iter().enumerate() {
            idx.insert((DocType::ServerDescriptor, d.digests.sha1_hex().unwrap().to_ascii_uppercase()), (pi, i));
        }
        for (i, d) in p.extras.iter().enumerate() {
            idx.insert((DocType::ExtraInfoDescriptor, d.digests.sha1_hex().unwrap().to_ascii_uppercase()), (pi, i));
        }
        for (i, d) in p.micros.iter().enumerate() {
            let b64 = STANDARD_NO_PAD.encode(d.digests.sha256_bytes().unwrap());
            idx.insert((DocType::Microdescriptor, b64), (pi, i));
        }
    }
    idx
}

impl Inner {
    fn scenario(&self) -> &SimScenario {
        &self.corpus.scenario
    }

    fn period(&self, k: i64) -> Option<&PeriodDocs> {
        self.corpus.period(k)
    }

    fn descriptors_of(p: &PeriodDocs, doctype: DocType) -> &[SimDoc] {
        match doctype {
            DocType::ServerDescriptor => &p.servers,
            DocType::ExtraInfoDescriptor => &p.extras,
            _ => &p.micros,
        }
    }

    /// Descriptors visible at `t`: every period whose descriptors are out.
    fn descriptor_visible(&self, period: usize, t: Timestamp) -> bool {
        self.scenario().descriptor_window(period as i64).contains(t)
    }

    fn by_digest(&self, doctype: DocType, list: &str, t: Timestamp) -> Option<Bytes> {
        let sep = if doctype == DocType::Microdescriptor { '-' } else { '+' };
        let mut out = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for part in list.split(sep) {
            let key = if doctype == DocType::Microdescriptor { part.to_string() } else { part.to_ascii_uppercase() };
            if let Some(&(pi, i)) = self.descriptors.get(&(doctype, key)) {
                if self.descriptor_visible(pi, t) && seen.insert((pi, i)) {
                    out.extend_from_slice(&Self::descriptors_of(&self.corpus.periods[pi], doctype)[i].body);
                }
            }
        }
        (!out.is_empty()).then(|| Bytes::from(out))
    }

    /// Latest descriptor of every relay.
    fn all_descriptors(&self, doctype: DocType, t: Timestamp) -> Option<Bytes> {
        let latest = (0..self.corpus.periods.len()).rev().find(|&pi| self.descriptor_visible(pi, t))?;
        let docs = Self::descriptors_of(&self.corpus.periods[latest], doctype);
        Some(docs.iter().flat_map(|d| d.body.iter().copied()).collect::<Vec<u8>>().into())
    }

    fn authority_body(&self, a: usize, path: &str, t: Timestamp) -> Option<Bytes> {
        let s = self.scenario();
        let now_k = s.period_at(t);
        let next_k = now_k + 1;
        let body = |d: &SimDoc| Some(d.body.clone());
        match path {
            paths::CURRENT_CONSENSUS => body(self.period(now_k)?.consensus(DocType::ConsensusNs, a)),
            paths::CURRENT_CONSENSUS_MICRODESC => body(self.period(now_k)?.consensus(DocType::ConsensusMicrodesc, a)),
            paths::CURRENT_AUTHORITY => body(&self.period(now_k)?.votes[a]),
            paths::NEXT_AUTHORITY if s.next_vote_window(next_k).contains(t) => body(&self.period(next_k)?.votes[a]),
            paths::NEXT_CONSENSUS if s.distribution_window(next_k).contains(t) => {
                body(self.period(next_k)?.consensus(DocType::ConsensusNs, a))
            }
            paths::NEXT_CONSENSUS_MICRODESC if s.distribution_window(next_k).contains(t) => {
                body(self.period(next_k)?.consensus(DocType::ConsensusMicrodesc, a))
            }
            paths::NEXT_SIGNATURES if s.distribution_window(next_k).contains(t) => {
                body(&self.period(next_k)?.signatures[a])
            }
            paths::NEXT_BANDWIDTH => {
                let k = s.period_at(t + s.lead());
                body(&self.period(k)?.bandwidth[a])
            }
            paths::SERVER_ALL => self.all_descriptors(DocType::ServerDescriptor, t),
            paths::EXTRA_ALL => self.all_descriptors(DocType::ExtraInfoDescriptor, t),
            _ => {
                if let Some(list) = path.strip_prefix(paths::SERVER_D) {
                    self.by_digest(DocType::ServerDescriptor, list, t)
                } else if let Some(list) = path.strip_prefix(paths::EXTRA_D) {
                    self.by_digest(DocType::ExtraInfoDescriptor, list, t)
                } else if let Some(list) = path.strip_prefix(paths::MICRO_D) {
                    self.by_digest(DocType::Microdescriptor, list, t)
                } else {
                    None
                }
            }
        }
    }

    /// `/<source>-<size>-<YYYY-MM-DD>.tpf`, published once the day is over.
    fn onionperf_body(&self, host: usize, path: &str, t: Timestamp) -> Option<Bytes> {
        let op = &self.scenario().onionperf;
        let source = &op.sources[host];
        let rest = path.strip_prefix('/')?.strip_prefix(source.as_str())?.strip_prefix('-')?.strip_suffix(".tpf")?;
        let (size, date) = rest.split_once('-')?;
        let size: u64 = size.parse().ok()?;
        let day = Timestamp::parse(&format!("{date} 00:00:00")).ok()?;
        let offset = day - op.first_day;
        let in_range = offset >= 0 && offset % 86_400 == 0 && (offset / 86_400) < op.days as i64;
        let missing = op.missing.iter().any(|m| &m.source == source && m.size == size && m.day == day);
        if !op.sizes.contains(&size) || !in_range || missing || t < day + 86_400 {
            return None;
        }
        Some(torperf_file(self.scenario(), source, size, day).into())
    }

    /// `None` drops the connection.
    fn respond(&self, target: Target, path: &str) -> Option<(u16, Bytes)> {
        let t = self.clock.now();
        let path = path.strip_suffix(".z").unwrap_or(path);
        let reply = match target {
            Target::Authority(a) if self.scenario().is_down(a, t) => None,
            Target::Authority(a) => {
                let injected = self.scenario().http_errors.iter().find(|e| e.authority == a && path.starts_with(&e.path));
                Some(match injected {
                    Some(e) => (e.status, Bytes::new()),
                    None => self.authority_body(a, path, t).map_or((404, Bytes::new()), |b| (200, b)),
                })
            }
            Target::Onionperf(h) => Some(self.onionperf_body(h, path, t).map_or((404, Bytes::new()), |b| (200, b))),
        };
        self.log.lock().unwrap().push(RequestRecord {
            server: self.names[&target].clone(),
            path: path.to_string(),
            at: t,
            status: reply.as_ref().map_or(ABORTED, |r| r.0),
        });
        reply
    }
}

async fn serve(listener: TcpListener, inner: Arc<Inner>, target: Target) {
    loop {
        let Ok((stream, _)) = listener.accept().await else { continue };
        let inner = inner.clone();
        tokio::spawn(async move {
            let svc = service_fn(move |req: Request<Incoming>| {
                let reply = inner.respond(target, req.uri().path());
                async move {
                    match reply {
                        Some((status, body)) => Ok::<_, std::io::Error>(
                            Response::builder()
                                .status(StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR))
                                .body(Full::new(body))
                                .expect("static response parts"),
                        ),
                        None => Err(std::io::Error::new(std::io::ErrorKind::ConnectionAborted, "authority down")),
                    }
                }
            });
            let _ = hyper::server::conn::http1::Builder::new().serve_connection(TokioIo::new(stream), svc).await;
        });
    }
}

/// Running servers for one scenario; dropped servers stop listening.
pub struct SimNetwork {
    inner: Arc<Inner>,
    authority_addrs: Vec<SocketAddr>,
    onionperf_addrs: Vec<SocketAddr>,
    tasks: Vec<JoinHandle<()>>,
}

impl SimNetwork {
    pub async fn start(scenario: &SimScenario, clock: Arc<dyn Clock>) -> std::io::Result<SimNetwork> {
        let corpus = Corpus::generate(scenario);
        let mut names = HashMap::new();
        for (i, a) in corpus.identities.authorities.iter().enumerate() {
            names.insert(Target::Authority(i), a.fingerprint.clone());
        }
        for (i, src) in scenario.onionperf.sources.iter().enumerate() {
            names.insert(Target::Onionperf(i), format!("onionperf-{src}"));
        }
        let descriptors = descriptor_index(&corpus);
        let inner = Arc::new(Inner { corpus, clock, names, descriptors, log: Mutex::new(Vec::new()) });
        let mut net = SimNetwork { inner: inner.clone(), authority_addrs: vec![], onionperf_addrs: vec![], tasks: vec![] };
        let targets = (0..scenario.n_authorities)
            .map(Target::Authority)
            .chain((0..scenario.onionperf.sources.len()).map(Target::Onionperf));
        for target in targets {
            let listener = TcpListener::bind("127.0.0.1:0").await?;
            let addr = listener.local_addr()?;
            match target {
                Target::Authority(_) => net.authority_addrs.push(addr),
                Target::Onionperf(_) => net.onionperf_addrs.push(addr),
            }
            net.tasks.push(tokio::spawn(serve(listener, inner.clone(), target)));
        }
        Ok(net)
    }

    pub fn corpus(&self) -> &Corpus {
        &self.inner.corpus
    }

    pub fn scenario(&self) -> &SimScenario {
        &self.inner.corpus.scenario
    }

    /// Server id of authority `a`: its fingerprint.
    pub fn authority_id(&self, a: usize) -> &str {
        &self.inner.names[&Target::Authority(a)]
    }

    pub fn authority_index(&self, server: &str) -> Option<usize> {
        (0..self.authority_addrs.len()).find(|&a| self.authority_id(a) == server)
    }

    pub fn authority_urls(&self) -> Vec<String> {
        self.authority_addrs.iter().map(|a| format!("http://{a}")).collect()
    }

    pub fn endpoints(&self) -> Vec<ServerEndpoint> {
        self.authority_configs()
            .into_iter()
            .map(|c| ServerEndpoint::new(c.id, &c.url, [Role::Authority]).expect("loopback url"))
            .collect()
    }

    pub fn authority_configs(&self) -> Vec<EndpointConfig> {
        self.authority_urls()
            .into_iter()
            .enumerate()
            .map(|(a, url)| EndpointConfig { id: self.authority_id(a).to_string(), url, roles: vec![] })
            .collect()
    }

    pub fn onionperf_configs(&self) -> Vec<OnionperfHostConfig> {
        self.scenario()
            .onionperf
            .sources
            .iter()
            .zip(&self.onionperf_addrs)
            .map(|(source, addr)| OnionperfHostConfig { source: source.clone(), url: format!("http://{addr}") })
            .collect()
    }

    pub fn requests(&self) -> Vec<RequestRecord> {
        self.inner.log.lock().unwrap().clone()
    }

    pub fn clear_requests(&self) {
        self.inner.log.lock().unwrap().clear();
    }

    /// Collector phase the servers attribute a request to.
    pub fn phase_of(&self, r: &RequestRecord) -> SimPhase {
        self.scenario().phase_at(r.at)
    }
}

impl Drop for SimNetwork {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}
