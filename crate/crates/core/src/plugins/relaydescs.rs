//! Relay descriptors: votes, consensuses, detached signatures, bandwidth
//! lists and the relay descriptors they reference.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;

use super::{FetchOutcome, Plugin, PluginContext, PluginDescriptor, PluginError, TaskFetch};
use crate::archive::Archive;
use crate::docmodel::{ConsensusTimings, DocType, DocumentIdentifier, RawDocument, Timestamp};
use crate::docparse;
use crate::fetcher::{paths, select_servers, AttemptGate, FetchBatch, Fetcher, Role, ServerEndpoint};
use crate::refchecker::{ArchiveView, AttemptKey, RefChecker};
use crate::scheduler::{last_occurrence, phase_instance, PhaseInstance, TaskKind};

pub const NAME: &str = "relaydescs";

const DOCTYPES: [DocType; 8] = [
    DocType::ServerDescriptor,
    DocType::ExtraInfoDescriptor,
    DocType::Microdescriptor,
    DocType::Vote,
    DocType::ConsensusNs,
    DocType::ConsensusMicrodesc,
    DocType::DetachedSignature,
    DocType::BandwidthList,
];

/// The attempt ledger seen through the fetcher's gate.
struct LedgerGate<'a> {
    checker: &'a RefChecker,
    phase: PhaseInstance,
}

impl AttemptGate for LedgerGate<'_> {
    fn approve(&self, key: &AttemptKey, server: &ServerEndpoint) -> bool {
        self.checker.record_key(key.clone(), &server.server_id, self.phase)
    }

    fn unreachable(&self, server: &ServerEndpoint) {
        tracing::warn!(server = %server.server_id, "server unreachable for the rest of the phase");
        self.checker.mark_unreachable(&server.server_id, self.phase);
    }
}

/// Bootstrap may repeat after a backoff, so it only avoids servers that
/// already failed during the same attempt.
struct BootstrapGate<'a> {
    inner: LedgerGate<'a>,
    failed: Mutex<HashSet<String>>,
}

impl AttemptGate for BootstrapGate<'_> {
    fn approve(&self, _: &AttemptKey, server: &ServerEndpoint) -> bool {
        !self.failed.lock().unwrap().contains(&server.server_id)
    }

    fn unreachable(&self, server: &ServerEndpoint) {
        self.failed.lock().unwrap().insert(server.server_id.clone());
        self.inner.unreachable(server);
    }
}

pub struct RelayDescs {
    archive: Arc<Archive>,
    fetcher: Arc<Fetcher>,
    checker: Arc<RefChecker>,
    servers: Vec<ServerEndpoint>,
    authorities: Vec<ServerEndpoint>,
    parse_failures: AtomicU64,
}

impl RelayDescs {
    pub fn new(ctx: &PluginContext) -> Self {
        let authorities: Vec<ServerEndpoint> =
            ctx.directory_servers.iter().filter(|s| s.has(Role::Authority)).cloned().collect();
        let checker = RefChecker::new(authorities.iter().map(|a| a.server_id.clone()).collect());
        RelayDescs {
            archive: ctx.archive.clone(),
            fetcher: ctx.fetcher.clone(),
            checker: Arc::new(checker),
            servers: ctx.directory_servers.clone(),
            authorities,
            parse_failures: AtomicU64::new(0),
        }
    }

    pub fn checker(&self) -> &Arc<RefChecker> {
        &self.checker
    }

    fn timings(&self, now: Timestamp) -> ConsensusTimings {
        self.checker.latest_timings().unwrap_or_else(|| {
            ConsensusTimings::provisional(now, 300, 300).expect("provisional timings are valid")
        })
    }

    /// Valid-after of the period containing `now` and of the next one.
    fn periods(&self, now: Timestamp) -> (Timestamp, Timestamp) {
        let t = self.timings(now);
        let va = last_occurrence(t.valid_after, t.period(), now);
        (va, va + t.period())
    }

    fn phase(&self, now: Timestamp) -> PhaseInstance {
        phase_instance(now, self.checker.latest_timings().as_ref())
    }

    fn gate(&self, now: Timestamp) -> LedgerGate<'_> {
        LedgerGate { checker: &self.checker, phase: self.phase(now) }
    }

    /// The current consensus of both flavors, from the first server that
    /// has it.
    pub async fn bootstrap(&self, now: Timestamp) -> TaskFetch {
        let gate = BootstrapGate { inner: self.gate(now), failed: Mutex::new(HashSet::new()) };
        let mut outcome = FetchOutcome::default();
        let mut got = 0;
        for flavor in [DocType::ConsensusNs, DocType::ConsensusMicrodesc] {
            let key = AttemptKey::Guess { doctype: flavor, subject: String::new(), datetime: now };
            if self.fetch_consensus_from(flavor, &self.servers_for(flavor, now), &gate, &key, &mut outcome, |_| true).await {
                got += 1;
            }
        }
        TaskFetch { ok: got > 0, outcome }
    }

    pub async fn eager_votes(&self, now: Timestamp) -> TaskFetch {
        let (_, next_va) = self.periods(now);
        let f = self.fetcher.fetch_next_votes(&self.authorities, next_va, &self.gate(now)).await;
        let mut outcome = FetchOutcome::default();
        outcome.absorb(f);
        TaskFetch { ok: true, outcome }
    }

    pub async fn eager_signatures(&self, now: Timestamp) -> TaskFetch {
        let (_, next_va) = self.periods(now);
        let f = self.fetcher.fetch_detached_signatures(&self.authorities, next_va, &self.gate(now)).await;
        let mut outcome = FetchOutcome::default();
        outcome.absorb(f);
        TaskFetch { ok: true, outcome }
    }

    /// Full descriptor lists from every authority, extra-info first.
    pub async fn greedy(&self, _now: Timestamp) -> TaskFetch {
        let mut outcome = FetchOutcome::default();
        for t in [DocType::ExtraInfoDescriptor, DocType::ServerDescriptor] {
            outcome.absorb(self.fetcher.fetch_all_descriptors(t, &self.authorities).await);
        }
        TaskFetch { ok: true, outcome }
    }

    fn servers_for(&self, doctype: DocType, now: Timestamp) -> Vec<ServerEndpoint> {
        select_servers(self.phase(now).phase, doctype, &self.servers)
    }

    fn authority(&self, fingerprint: &str) -> Option<&ServerEndpoint> {
        self.authorities.iter().find(|a| a.server_id.eq_ignore_ascii_case(fingerprint))
    }

    /// Tries servers in order until one returns a consensus accepted by
    /// `wanted`. Every consensus received is kept.
    async fn fetch_consensus_from(
        &self,
        flavor: DocType,
        servers: &[ServerEndpoint],
        gate: &dyn AttemptGate,
        key: &AttemptKey,
        outcome: &mut FetchOutcome,
        wanted: impl Fn(&RawDocument) -> bool,
    ) -> bool {
        self.fetch_period_from(flavor, servers, gate, key, outcome, wanted, |_| paths::current_consensus(flavor)).await
    }

    #[allow(clippy::too_many_arguments)]
    async fn fetch_period_from(
        &self,
        doctype: DocType,
        servers: &[ServerEndpoint],
        gate: &dyn AttemptGate,
        key: &AttemptKey,
        outcome: &mut FetchOutcome,
        wanted: impl Fn(&RawDocument) -> bool,
        path_for: impl Fn(&ServerEndpoint) -> Option<&'static str>,
    ) -> bool {
        for server in servers {
            let Some(path) = path_for(server) else { continue };
            if !gate.approve(key, server) {
                continue;
            }
            match self.fetcher.fetch_path(server, path, doctype).await {
                Ok(f) => {
                    let hit = f.documents.iter().any(&wanted);
                    outcome.absorb(f);
                    if hit {
                        return true;
                    }
                }
                Err(e) => {
                    outcome.errors += 1;
                    if e.is_network() {
                        gate.unreachable(server);
                    }
                }
            }
        }
        false
    }

    async fn fetch_period_document(&self, id: &DocumentIdentifier, now: Timestamp, outcome: &mut FetchOutcome) {
        let gate = self.gate(now);
        let key = AttemptKey::of(id);
        let (va, next_va) = self.periods(now);
        let period = next_va - va;
        match (id.doctype, id.is_guessed()) {
            (DocType::ConsensusNs | DocType::ConsensusMicrodesc, true) => {
                let known = self.checker.latest_timings().is_some();
                let servers = self.servers_for(id.doctype, now);
                self.fetch_consensus_from(id.doctype, &servers, &gate, &key, outcome, |d| {
                    !known || docparse::identify(d).datetime == id.datetime
                })
                .await;
            }
            (DocType::ConsensusNs | DocType::ConsensusMicrodesc, false) => {
                if now >= id.datetime + period {
                    tracing::debug!(%id, "referenced consensus no longer served");
                    return;
                }
                let pending = now < id.datetime;
                let signers = self.checker.signers(id);
                let mut servers: Vec<ServerEndpoint> = if pending {
                    self.authorities.clone()
                } else {
                    self.servers_for(id.doctype, now)
                };
                servers.sort_by_key(|s| !signers.iter().any(|f| f.eq_ignore_ascii_case(&s.server_id)));
                let path = if pending { paths::next_consensus(id.doctype) } else { paths::current_consensus(id.doctype) };
                self.fetch_period_from(id.doctype, &servers, &gate, &key, outcome, |d| d.matches(id), |_| path).await;
            }
            (DocType::Vote, _) => {
                let Some(auth) = self.authority(&id.subject) else { return };
                let path = if id.datetime <= now { paths::CURRENT_AUTHORITY } else { paths::NEXT_AUTHORITY };
                self.fetch_period_from(DocType::Vote, std::slice::from_ref(auth), &gate, &key, outcome, |_| true, |_| Some(path))
                    .await;
            }
            (DocType::BandwidthList, _) => {
                if now >= id.datetime + period {
                    return;
                }
                let Some(auth) = self.authority(&id.subject) else { return };
                self.fetch_period_from(
                    DocType::BandwidthList,
                    std::slice::from_ref(auth),
                    &gate,
                    &key,
                    outcome,
                    |_| true,
                    |_| Some(paths::NEXT_BANDWIDTH),
                )
                .await;
            }
            (DocType::DetachedSignature, _) if now < id.datetime => {
                let f = self.fetcher.fetch_detached_signatures(&self.authorities, id.datetime, &gate).await;
                outcome.absorb(f);
            }
            _ => {}
        }
    }
}

#[async_trait]
impl Plugin for RelayDescs {
    fn descriptor(&self) -> PluginDescriptor {
        PluginDescriptor { name: NAME.into(), version: env!("CARGO_PKG_VERSION").into(), doctypes: DOCTYPES.into() }
    }

    fn init(&self, now: Timestamp) {
        let n = self.checker.load_from_archive(self.archive.as_ref(), now);
        tracing::info!(plugin = NAME, starting_points = n, "loaded starting points from archive");
    }

    fn expectations(&self, now: Timestamp) -> Vec<DocumentIdentifier> {
        self.checker.prune(now);
        let mut out = self.checker.guess_period_documents(now, self.archive.as_ref());
        out.extend(self.checker.expectations(now, self.archive.as_ref()));
        out
    }

    async fn fetch(&self, ids: &[DocumentIdentifier], now: Timestamp) -> Result<FetchOutcome, PluginError> {
        if let Some(id) = ids.iter().find(|id| !self.owns(id)) {
            return Err(PluginError::NotOwned { plugin: NAME.into(), id: Box::new(id.clone()) });
        }
        let mut outcome = FetchOutcome::default();
        for id in ids.iter().filter(|id| id.is_guessed() || !matches!(id.doctype, DocType::ServerDescriptor | DocType::ExtraInfoDescriptor | DocType::Microdescriptor)) {
            self.fetch_period_document(id, now, &mut outcome).await;
        }
        let phase = self.phase(now);
        let gate = self.gate(now);
        for doctype in [DocType::ServerDescriptor, DocType::Microdescriptor, DocType::ExtraInfoDescriptor] {
            let batch_ids: Vec<DocumentIdentifier> =
                ids.iter().filter(|id| id.doctype == doctype && !id.is_guessed()).cloned().collect();
            if batch_ids.is_empty() {
                continue;
            }
            let batch = FetchBatch { doctype, ids: batch_ids, phase: phase.phase };
            let servers = select_servers(phase.phase, doctype, &self.servers);
            let r = self.fetcher.fetch_batch(&batch, &servers, &gate).await;
            outcome.mismatches += r.mismatches;
            outcome.absorb(r.fetched);
        }
        Ok(outcome)
    }

    fn parse(&self, doc: &RawDocument, now: Timestamp) -> Vec<DocumentIdentifier> {
        let parsed = match docparse::parse(doc) {
            Ok(p) => p,
            Err(e) => {
                self.parse_failures.fetch_add(1, Ordering::Relaxed);
                tracing::warn!(doctype = %doc.doctype, error = %e, "could not parse archived document");
                return Vec::new();
            }
        };
        let refs = docparse::extract_references(&parsed);
        if refs.skipped > 0 {
            tracing::warn!(doctype = %doc.doctype, skipped = refs.skipped, "undecodable references");
        }
        if doc.doctype.is_starting_point() {
            let _ = self.checker.add_starting_point(parsed, now);
        }
        refs.ids.into_iter().filter(|id| !self.archive.contains(id.doctype, &id.digests)).collect()
    }

    async fn scheduled(&self, task: TaskKind, now: Timestamp) -> Option<TaskFetch> {
        match task {
            TaskKind::Bootstrap => Some(self.bootstrap(now).await),
            TaskKind::EagerVotes => Some(self.eager_votes(now).await),
            TaskKind::EagerSignatures => Some(self.eager_signatures(now).await),
            TaskKind::GreedyDiscovery => Some(self.greedy(now).await),
            TaskKind::ReferenceCheck | TaskKind::Onionperf => None,
        }
    }

    fn cycles_on(&self, task: TaskKind) -> bool {
        task == TaskKind::ReferenceCheck
    }

    fn latest_timings(&self) -> Option<ConsensusTimings> {
        self.checker.latest_timings()
    }

    fn pending(&self, now: Timestamp) -> usize {
        self.checker.expectations(now, self.archive.as_ref()).len()
    }

    fn permanently_missed(&self) -> u64 {
        self.checker.permanently_missed()
    }

    fn parse_failures(&self) -> u64 {
        self.parse_failures.load(Ordering::Relaxed)
    }
}
