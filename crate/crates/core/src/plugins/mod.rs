//! Collection plugins and the host that persists what they fetch.
//!
//! A plugin names the documents it expects, fetches them and parses
//! fetched documents for further expectations. Only the host writes to
//! the archive.

pub mod onionperf;
pub mod relaydescs;

use std::collections::BTreeSet;
use std::sync::Arc;

use async_trait::async_trait;
use bytes::Bytes;
use serde::Serialize;

pub use onionperf::{Onionperf, OnionperfSettings};
pub use relaydescs::RelayDescs;

use crate::archive::{Archive, ArchiveError};
use crate::docmodel::{ConsensusTimings, DocType, DocumentIdentifier, RawDocument, Timestamp};
use crate::fetcher::{FetchError, Fetcher, OnionperfHost, ServerEndpoint};
use crate::refchecker::ArchiveView;
use crate::scheduler::{Clock, TaskKind};

pub const DEFAULT_ITERATION_CAP: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PluginDescriptor {
    pub name: String,
    pub version: String,
    pub doctypes: BTreeSet<DocType>,
}

#[derive(Debug, thiserror::Error)]
pub enum PluginError {
    #[error("plugin {0:?} is not known")]
    Unknown(String),
    #[error("plugin {0:?} is registered twice")]
    Duplicate(String),
    #[error("plugin {0:?} failed to initialize: {1}")]
    Init(String, String),
    #[error("{plugin} does not handle {id}")]
    NotOwned { plugin: String, id: Box<DocumentIdentifier> },
    #[error(transparent)]
    Fetch(#[from] FetchError),
}

/// Everything fetched in one call. `permanent_misses` counts documents
/// that are known to be gone for good.
#[derive(Debug, Default, Clone)]
pub struct FetchOutcome {
    pub documents: Vec<RawDocument>,
    pub unrecognized: Vec<(Bytes, String)>,
    pub permanent_misses: usize,
    pub mismatches: usize,
    pub errors: usize,
}

impl FetchOutcome {
    pub fn absorb(&mut self, f: crate::fetcher::Fetched) {
        self.errors += f.errors.len();
        self.documents.extend(f.documents);
        self.unrecognized.extend(f.unrecognized);
    }
}

/// Result of a plugin-handled scheduled task.
#[derive(Debug, Default, Clone)]
pub struct TaskFetch {
    pub outcome: FetchOutcome,
    pub ok: bool,
}

/// Shared handles given to plugins. The archive is for reading.
#[derive(Clone)]
pub struct PluginContext {
    pub archive: Arc<Archive>,
    pub fetcher: Arc<Fetcher>,
    pub clock: Arc<dyn Clock>,
    pub directory_servers: Vec<ServerEndpoint>,
    pub onionperf_hosts: Vec<OnionperfHost>,
}

#[async_trait]
pub trait Plugin: Send + Sync {
    fn descriptor(&self) -> PluginDescriptor;

    /// Documents expected to be available for fetching. No network access.
    fn expectations(&self, now: Timestamp) -> Vec<DocumentIdentifier>;

    /// Fetches expected documents. Batch-natured: one call may return many
    /// documents, or fewer than asked for.
    async fn fetch(&self, ids: &[DocumentIdentifier], now: Timestamp) -> Result<FetchOutcome, PluginError>;

    /// Further expectations referenced from a fetched document.
    fn parse(&self, doc: &RawDocument, now: Timestamp) -> Vec<DocumentIdentifier>;

    fn init(&self, _now: Timestamp) {}

    /// Handles a scheduled task other than a plain cycle, if this plugin
    /// owns it.
    async fn scheduled(&self, _task: TaskKind, _now: Timestamp) -> Option<TaskFetch> {
        None
    }

    /// Whether a cycle of this plugin runs on `task`.
    fn cycles_on(&self, _task: TaskKind) -> bool {
        false
    }

    fn latest_timings(&self) -> Option<ConsensusTimings> {
        None
    }

    fn pending(&self, now: Timestamp) -> usize {
        self.expectations(now).len()
    }

    fn permanently_missed(&self) -> u64 {
        0
    }

    fn parse_failures(&self) -> u64 {
        0
    }

    fn owns(&self, id: &DocumentIdentifier) -> bool {
        self.descriptor().doctypes.contains(&id.doctype)
    }
}

pub trait PluginFactory: Send + Sync {
    fn name(&self) -> &str;
    fn build(&self, ctx: &PluginContext, settings: &toml::Table) -> Result<Arc<dyn Plugin>, PluginError>;
}

struct RelayDescsFactory;
struct OnionperfFactory;

impl PluginFactory for RelayDescsFactory {
    fn name(&self) -> &str {
        relaydescs::NAME
    }
    fn build(&self, ctx: &PluginContext, _settings: &toml::Table) -> Result<Arc<dyn Plugin>, PluginError> {
        Ok(Arc::new(RelayDescs::new(ctx)))
    }
}

impl PluginFactory for OnionperfFactory {
    fn name(&self) -> &str {
        onionperf::NAME
    }
    fn build(&self, ctx: &PluginContext, settings: &toml::Table) -> Result<Arc<dyn Plugin>, PluginError> {
        let s: OnionperfSettings = toml::Value::Table(settings.clone())
            .try_into()
            .map_err(|e: toml::de::Error| PluginError::Init(onionperf::NAME.into(), e.to_string()))?;
        Ok(Arc::new(Onionperf::new(ctx, s)))
    }
}

pub fn builtin_factories() -> Vec<Box<dyn PluginFactory>> {
    vec![Box::new(RelayDescsFactory), Box::new(OnionperfFactory)]
}

pub const DEFAULT_PLUGINS: [&str; 2] = [relaydescs::NAME, onionperf::NAME];

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub received: usize,
    pub stored: usize,
    pub unrecognized: usize,
    pub followups: usize,
    pub errors: usize,
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize)]
pub struct CycleReport {
    pub iterations: usize,
    pub expected: usize,
    pub fetched: usize,
    pub stored: usize,
    pub unrecognized: usize,
    pub mismatches: usize,
    pub permanent_misses: usize,
    pub errors: usize,
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize)]
pub struct TaskReport {
    pub ok: bool,
    pub stored: usize,
    pub cycles: Vec<(String, CycleReport)>,
}

pub struct Registry {
    archive: Arc<Archive>,
    clock: Arc<dyn Clock>,
    plugins: Vec<Arc<dyn Plugin>>,
    iteration_cap: usize,
}

impl Registry {
    pub fn new(archive: Arc<Archive>, clock: Arc<dyn Clock>) -> Self {
        Registry { archive, clock, plugins: Vec::new(), iteration_cap: DEFAULT_ITERATION_CAP }
    }

    pub fn with_iteration_cap(mut self, cap: usize) -> Self {
        self.iteration_cap = cap.max(1);
        self
    }

    pub fn register(&mut self, plugin: Arc<dyn Plugin>) -> Result<(), PluginError> {
        let name = plugin.descriptor().name;
        if self.plugins.iter().any(|p| p.descriptor().name == name) {
            return Err(PluginError::Duplicate(name));
        }
        plugin.init(self.clock.now());
        self.plugins.push(plugin);
        Ok(())
    }

    /// Builds the enabled plugins. A plugin that fails to build is left
    /// out and reported; the others are still registered.
    pub fn discover(
        ctx: &PluginContext,
        enabled: &[String],
        factories: &[Box<dyn PluginFactory>],
        settings: &toml::Table,
    ) -> (Registry, Vec<PluginError>) {
        let mut reg = Registry::new(ctx.archive.clone(), ctx.clock.clone());
        let mut failures = Vec::new();
        let empty = toml::Table::new();
        for name in enabled {
            let Some(factory) = factories.iter().find(|f| f.name() == name) else {
                failures.push(PluginError::Unknown(name.clone()));
                continue;
            };
            let sub = settings.get(name).and_then(|v| v.as_table()).unwrap_or(&empty);
            match factory.build(ctx, sub).and_then(|p| reg.register(p)) {
                Ok(()) => tracing::info!(plugin = %name, "plugin registered"),
                Err(e) => {
                    tracing::error!(plugin = %name, error = %e, "plugin not loaded");
                    failures.push(e);
                }
            }
        }
        (reg, failures)
    }

    pub fn descriptors(&self) -> Vec<PluginDescriptor> {
        self.plugins.iter().map(|p| p.descriptor()).collect()
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn Plugin>> {
        self.plugins.iter().find(|p| p.descriptor().name == name).cloned()
    }

    pub fn plugins(&self) -> &[Arc<dyn Plugin>] {
        &self.plugins
    }

    pub fn archive(&self) -> &Arc<Archive> {
        &self.archive
    }

    /// Archives everything in `outcome` and hands each typed document back
    /// to the plugin for parsing.
    pub fn ingest(&self, plugin: &dyn Plugin, outcome: &FetchOutcome, now: Timestamp) -> IngestReport {
        let mut rep = IngestReport { received: outcome.documents.len(), ..Default::default() };
        for (body, source) in &outcome.unrecognized {
            match self.archive.store_unrecognized(body, source, now) {
                Ok(_) => rep.unrecognized += 1,
                Err(e) => {
                    tracing::error!(error = %e, "could not archive unrecognized body");
                    rep.errors += 1;
                }
            }
        }
        for doc in &outcome.documents {
            let existed = self.archive.contains(doc.doctype, &doc.digests);
            if let Err(e) = self.archive.store(doc) {
                tracing::error!(error = %e, doctype = %doc.doctype, "could not archive document");
                rep.errors += 1;
                if matches!(e, ArchiveError::StorageFull(_)) {
                    break;
                }
                continue;
            }
            if !existed {
                rep.stored += 1;
            }
            rep.followups += plugin.parse(doc, now).len();
        }
        rep
    }

    /// Expectations, fetch, archive, parse; repeated until nothing is
    /// expected, nothing new arrives, or the iteration cap is reached.
    pub async fn run_cycle(&self, name: &str) -> Result<CycleReport, PluginError> {
        let plugin = self.get(name).ok_or_else(|| PluginError::Unknown(name.to_string()))?;
        let mut rep = CycleReport::default();
        while rep.iterations < self.iteration_cap {
            let now = self.clock.now();
            let ids = plugin.expectations(now);
            if ids.is_empty() {
                break;
            }
            rep.iterations += 1;
            rep.expected += ids.len();
            let outcome = plugin.fetch(&ids, now).await?;
            rep.fetched += outcome.documents.len();
            rep.mismatches += outcome.mismatches;
            rep.permanent_misses += outcome.permanent_misses;
            rep.errors += outcome.errors;
            let ing = self.ingest(plugin.as_ref(), &outcome, now);
            rep.stored += ing.stored;
            rep.unrecognized += ing.unrecognized;
            rep.errors += ing.errors;
            if ing.stored == 0 {
                break;
            }
        }
        tracing::info!(event = "cycle", plugin = name, iterations = rep.iterations, expected = rep.expected, fetched = rep.fetched, stored = rep.stored);
        Ok(rep)
    }

    /// Runs a scheduled task across plugins: plugin-specific work first,
    /// then a cycle wherever the task calls for one or new documents
    /// arrived.
    pub async fn run_task(&self, kind: TaskKind, now: Timestamp) -> TaskReport {
        let mut report = TaskReport { ok: true, ..Default::default() };
        let mut handled = false;
        for plugin in &self.plugins {
            let name = plugin.descriptor().name;
            let mut cycle = plugin.cycles_on(kind);
            if let Some(tf) = plugin.scheduled(kind, now).await {
                handled = true;
                let ing = self.ingest(plugin.as_ref(), &tf.outcome, now);
                report.ok &= tf.ok && ing.errors == 0;
                report.stored += ing.stored;
                cycle |= ing.stored > 0;
            }
            if cycle {
                handled = true;
                match self.run_cycle(&name).await {
                    Ok(c) => {
                        report.stored += c.stored;
                        report.cycles.push((name, c));
                    }
                    Err(e) => {
                        tracing::error!(plugin = %name, error = %e, "cycle failed");
                        report.ok = false;
                    }
                }
            }
        }
        if !handled && kind == TaskKind::Bootstrap {
            report.ok = false;
        }
        report
    }

    pub fn latest_timings(&self) -> Option<ConsensusTimings> {
        self.plugins.iter().filter_map(|p| p.latest_timings()).max_by_key(|t| t.valid_after)
    }

    pub fn pending(&self, now: Timestamp) -> usize {
        self.plugins.iter().map(|p| p.pending(now)).sum()
    }

    pub fn permanently_missed(&self) -> u64 {
        self.plugins.iter().map(|p| p.permanently_missed()).sum()
    }

    pub fn parse_failures(&self) -> u64 {
        self.plugins.iter().map(|p| p.parse_failures()).sum()
    }
}

#[cfg(test)]
mod tests;
