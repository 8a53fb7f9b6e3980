use std::sync::atomic::AtomicUsize;

use super::*;
use crate::docmodel::DigestSet;
use crate::fetcher::{FetchConfig, Role};
use crate::scheduler::ManualClock;
use crate::testutil::{consensus_with, mock, relay_state, MockState};

fn ts(s: &str) -> Timestamp {
    Timestamp::parse(s).unwrap()
}

struct Env {
    _dir: tempfile::TempDir,
    clock: Arc<ManualClock>,
    ctx: PluginContext,
}

fn env(now: &str, directory_servers: Vec<ServerEndpoint>, onionperf_hosts: Vec<OnionperfHost>) -> Env {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(ts(now)));
    let archive = Arc::new(Archive::open(dir.path()).unwrap());
    let fetcher = Arc::new(Fetcher::new(FetchConfig { timeout_secs: 5, ..Default::default() }, clock.clone()).unwrap());
    let ctx = PluginContext { archive, fetcher, clock: clock.clone(), directory_servers, onionperf_hosts };
    Env { _dir: dir, clock, ctx }
}

fn defaults() -> Vec<String> {
    DEFAULT_PLUGINS.iter().map(|s| s.to_string()).collect()
}

#[test]
fn discover_builtins_and_isolate_failures() {
    let e = env("2018-11-15 19:00:00", vec![], vec![]);
    let (reg, failures) = Registry::discover(&e.ctx, &defaults(), &builtin_factories(), &toml::Table::new());
    assert!(failures.is_empty());
    let names: Vec<String> = reg.descriptors().into_iter().map(|d| d.name).collect();
    assert_eq!(names, ["relaydescs", "onionperf"]);

    let enabled = vec!["relaydescs".to_string(), "nope".to_string(), "onionperf".to_string(), "relaydescs".to_string()];
    let settings: toml::Table = toml::from_str("[onionperf]\nsizes = [1]\nbogus = true\n").unwrap();
    let (reg, failures) = Registry::discover(&e.ctx, &enabled, &builtin_factories(), &settings);
    assert_eq!(reg.descriptors().len(), 1);
    assert_eq!(failures.len(), 3);
    assert!(matches!(failures[0], PluginError::Unknown(_)));
    assert!(matches!(failures[1], PluginError::Init(..)));
    assert!(matches!(failures[2], PluginError::Duplicate(_)));
}

fn tpf(source: &str, size: u64, day: Timestamp) -> Vec<u8> {
    format!("DATAPERC100=1 FILESIZE={size} SOURCE={source} START={}.25\n", day.unix() + 60).into_bytes()
}

async fn onionperf_hosts(days: &[Timestamp], missing: Option<(&str, u64, u16)>) -> (Vec<OnionperfHost>, Vec<Arc<MockState>>) {
    let mut hosts = Vec::new();
    let mut states = Vec::new();
    for src in ["op-ab", "op-hk", "op-nl"] {
        let mut st = MockState::default();
        for &day in days {
            for size in crate::fetcher::ONIONPERF_SIZES {
                let path = format!("/{src}-{size}-{}.tpf", day.format("%Y-%m-%d"));
                let entry = match missing {
                    Some((s, z, status)) if s == src && z == size => (status, vec![]),
                    _ => (200, tpf(src, size, day)),
                };
                st.fixed.insert(path, entry);
            }
        }
        let (mut ep, st) = mock(st).await;
        ep.roles = [Role::OnionperfHost].into();
        hosts.push(OnionperfHost { endpoint: ep, source: src.into() });
        states.push(st);
    }
    (hosts, states)
}

#[tokio::test]
async fn onionperf_expects_yesterdays_nine() {
    let (hosts, _) = onionperf_hosts(&[], None).await;
    let e = env("2018-11-15 00:20:00", vec![], hosts);
    let p = Onionperf::new(&e.ctx, OnionperfSettings::default());
    let ids = p.expectations(e.clock.now());
    assert_eq!(ids.len(), 9);
    assert!(ids.iter().all(|i| i.datetime == ts("2018-11-14 00:00:00") && i.doctype == DocType::TorperfResults));
}

#[tokio::test]
async fn onionperf_permanent_miss_never_rerequested() {
    let days = [ts("2018-11-14 00:00:00"), ts("2018-11-15 00:00:00"), ts("2018-11-16 00:00:00")];
    let (hosts, states) = onionperf_hosts(&days, Some(("op-hk", 1_048_576, 404))).await;
    let e = env("2018-11-15 00:20:00", vec![], hosts);
    let mut reg = Registry::new(e.ctx.archive.clone(), e.clock.clone());
    reg.register(Arc::new(Onionperf::new(&e.ctx, OnionperfSettings::default()))).unwrap();
    let mut per_day = Vec::new();
    for _ in 0..3 {
        let rep = reg.run_cycle("onionperf").await.unwrap();
        per_day.push((rep.stored, rep.permanent_misses));
        e.clock.advance(86_400);
    }
    assert_eq!(per_day, [(8, 1), (8, 1), (8, 1)]);
    let hk = states[1].log.lock().unwrap().clone();
    let first_day_miss = hk.iter().filter(|p| p.as_str() == "/op-hk-1048576-2018-11-14.tpf").count();
    assert_eq!(first_day_miss, 1);
    assert_eq!(reg.permanently_missed(), 3);
    // a satisfied archive needs no fetches
    e.clock.set(ts("2018-11-17 00:20:00"));
    let before: usize = states.iter().map(|s| s.log.lock().unwrap().len()).sum();
    let rep = reg.run_cycle("onionperf").await.unwrap();
    assert_eq!(rep.stored, 0);
    let after: usize = states.iter().map(|s| s.log.lock().unwrap().len()).sum();
    assert_eq!(after, before);
    assert_eq!(reg.run_cycle("onionperf").await.unwrap().iterations, 0);
}

#[tokio::test]
async fn onionperf_transient_retried_next_day() {
    let days = [ts("2018-11-14 00:00:00"), ts("2018-11-15 00:00:00")];
    let (hosts, states) = onionperf_hosts(&days, Some(("op-ab", 51_200, 503))).await;
    let e = env("2018-11-15 00:20:00", vec![], hosts);
    let mut reg = Registry::new(e.ctx.archive.clone(), e.clock.clone());
    reg.register(Arc::new(Onionperf::new(&e.ctx, OnionperfSettings::default()))).unwrap();
    let rep = reg.run_cycle("onionperf").await.unwrap();
    assert_eq!((rep.stored, rep.permanent_misses, rep.errors), (8, 0, 1));
    e.clock.advance(86_400);
    let p = reg.get("onionperf").unwrap();
    let ids = p.expectations(e.clock.now());
    assert_eq!(ids.len(), 10, "yesterday's nine plus one retry");
    reg.run_cycle("onionperf").await.unwrap();
    let ab = states[0].log.lock().unwrap().clone();
    assert_eq!(ab.iter().filter(|p| p.as_str() == "/op-ab-51200-2018-11-14.tpf").count(), 2);
}

#[tokio::test]
async fn foreign_identifiers_rejected() {
    let e = env("2018-11-15 00:20:00", vec![], vec![]);
    let op = Onionperf::new(&e.ctx, OnionperfSettings::default());
    let foreign = DocumentIdentifier::guessed(DocType::Vote, "X", ts("2018-11-15 00:00:00"));
    assert!(matches!(op.fetch(std::slice::from_ref(&foreign), e.clock.now()).await, Err(PluginError::NotOwned { .. })));
    let rd = RelayDescs::new(&e.ctx);
    let tp = DocumentIdentifier::guessed(DocType::TorperfResults, "op-ab-51200", ts("2018-11-14 00:00:00"));
    assert!(matches!(rd.fetch(&[tp], e.clock.now()).await, Err(PluginError::NotOwned { .. })));
}

#[tokio::test]
async fn relaydescs_parse_contract() {
    let e = env("2018-11-15 19:10:00", vec![], vec![]);
    let rd = RelayDescs::new(&e.ctx);
    let now = e.clock.now();
    let c = RawDocument::new(DocType::ConsensusNs, consensus_with(3), "t", now).unwrap();
    let refs = rd.parse(&c, now);
    assert_eq!(refs.len(), 3);
    assert!(refs.iter().all(|r| r.doctype == DocType::ServerDescriptor));
    assert_eq!(rd.checker().starting_points(), 1);
    let bad = RawDocument::new(DocType::Vote, "network-status-version 3\nvote-status vote\nx\n-----BEGIN SIGNATURE-----\nAA\n", "t", now);
    let bad = bad.unwrap_or_else(|_| RawDocument {
        doctype: DocType::Vote,
        body: bytes::Bytes::from_static(b"network-status-version 3\n-----BEGIN X-----\n"),
        source: "t".into(),
        retrieved_at: now,
        digests: DigestSet::from_sha1_bytes(&[1; 20]),
        context_datetime: None,
    });
    assert!(rd.parse(&bad, now).is_empty());
    assert_eq!(rd.parse_failures(), 1);
    let op = Onionperf::new(&e.ctx, OnionperfSettings::default());
    let t = RawDocument::new(DocType::TorperfResults, tpf("op-ab", 51200, ts("2018-11-14 00:00:00")), "t", now).unwrap();
    assert!(op.parse(&t, now).is_empty());
}

#[tokio::test]
async fn relaydescs_bootstrap_then_closure() {
    let st = relay_state(25);
    let (auth, log) = mock(st).await;
    let e = env("2018-11-15 19:10:00", vec![auth], vec![]);
    let (reg, _) = Registry::discover(&e.ctx, &["relaydescs".to_string()], &builtin_factories(), &toml::Table::new());
    let rep = reg.run_task(TaskKind::Bootstrap, e.clock.now()).await;
    assert!(rep.ok);
    assert_eq!(e.ctx.archive.counts().get("server-descriptor"), Some(&25));
    assert_eq!(e.ctx.archive.counts().get("network-status-consensus-3"), Some(&1));
    assert_eq!(reg.pending(e.clock.now()), 0);
    let batches = log.log.lock().unwrap().iter().filter(|p| p.starts_with("/tor/server/d/")).count();
    assert_eq!(batches, 1, "25 digests in one request");
    // a second reference check on the satisfied archive fetches no descriptor
    let before = log.log.lock().unwrap().len();
    reg.run_task(TaskKind::ReferenceCheck, e.clock.now()).await;
    let new: Vec<String> = log.log.lock().unwrap()[before..].to_vec();
    assert!(new.iter().all(|p| !p.starts_with("/tor/server/d/")), "{new:?}");
    assert_eq!(reg.latest_timings().unwrap().valid_after, ts("2018-11-15 19:00:00"));
}

#[tokio::test]
async fn bootstrap_fails_without_servers() {
    let e = env("2018-11-15 19:10:00", vec![], vec![]);
    let (reg, _) = Registry::discover(&e.ctx, &["relaydescs".to_string()], &builtin_factories(), &toml::Table::new());
    assert!(!reg.run_task(TaskKind::Bootstrap, e.clock.now()).await.ok);
}

/// Expects an endless chain of documents, one new link per fetch.
struct Chain {
    n: AtomicUsize,
}

#[async_trait]
impl Plugin for Chain {
    fn descriptor(&self) -> PluginDescriptor {
        PluginDescriptor { name: "chain".into(), version: "0".into(), doctypes: [DocType::BandwidthList].into() }
    }
    fn expectations(&self, now: Timestamp) -> Vec<DocumentIdentifier> {
        vec![DocumentIdentifier::guessed(DocType::BandwidthList, "", now)]
    }
    async fn fetch(&self, _ids: &[DocumentIdentifier], now: Timestamp) -> Result<FetchOutcome, PluginError> {
        let i = self.n.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let body = format!("{}\nversion=1.4.0\nnode_id=${i:040X} bw=1\n", now.unix() + i as i64);
        let doc = RawDocument::new(DocType::BandwidthList, body, "chain", now).unwrap();
        Ok(FetchOutcome { documents: vec![doc], ..Default::default() })
    }
    fn parse(&self, _doc: &RawDocument, _now: Timestamp) -> Vec<DocumentIdentifier> {
        vec![]
    }
}

#[tokio::test]
async fn cycle_stops_at_iteration_cap() {
    let e = env("2018-11-15 19:10:00", vec![], vec![]);
    let mut reg = Registry::new(e.ctx.archive.clone(), e.clock.clone());
    reg.register(Arc::new(Chain { n: AtomicUsize::new(0) })).unwrap();
    let rep = reg.run_cycle("chain").await.unwrap();
    assert_eq!(rep.iterations, DEFAULT_ITERATION_CAP);
    assert_eq!(rep.stored, DEFAULT_ITERATION_CAP);
    assert_eq!(e.ctx.archive.len(), DEFAULT_ITERATION_CAP);
    assert!(matches!(reg.run_cycle("missing").await, Err(PluginError::Unknown(_))));
}
