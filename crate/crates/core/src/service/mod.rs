//! Composition root: wires archive, fetcher, plugins, scheduler and
//! directory server into one collector process.

mod config;
mod metrics;

use std::collections::BTreeMap;
use std::future::Future;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::Serialize;
use tokio::net::TcpListener;

pub use config::*;
pub use metrics::{Metrics, MetricsSnapshot, TaskCounters};

use crate::archive::{Archive, ArchiveError, IntegrityReport};
use crate::dirserver::{DirServer, StatusReport, StatusSource};
use crate::docmodel::{ConsensusTimings, Timestamp};
use crate::fetcher::{FetchError, Fetcher};
use crate::plugins::{builtin_factories, onionperf, relaydescs, PluginContext, PluginError, Registry, TaskReport};
use crate::scheduler::{run_loop, Clock, CompletionRecord, LoopConfig, TaskKind, TaskRunner};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("http client: {0}")]
    Fetch(#[from] FetchError),
    #[error("cannot listen on {0}: {1}")]
    Listen(String, #[source] std::io::Error),
}

/// Outcome of a single `once` pass.
#[derive(Debug, Clone, Default, Serialize)]
pub struct OnceReport {
    pub ok: bool,
    pub stored: usize,
    /// (task, ok, newly stored)
    pub tasks: Vec<(String, bool, usize)>,
    pub plugin_failures: Vec<String>,
}

pub struct Collector {
    config: Config,
    clock: Arc<dyn Clock>,
    archive: Arc<Archive>,
    fetcher: Arc<Fetcher>,
    registry: Registry,
    plugin_failures: Vec<String>,
    last_completed: Mutex<BTreeMap<String, Timestamp>>,
    integrity_missing: AtomicU64,
    metrics: Metrics,
}

impl Collector {
    /// Opens the archive and builds the enabled plugins. Plugins that fail
    /// to load are reported in [`Collector::plugin_failures`].
    pub fn new(config: Config, clock: Arc<dyn Clock>) -> Result<Collector, ServiceError> {
        config.validate()?;
        config.validate_for_collection()?;
        let archive = Arc::new(Archive::open_with_limit(&config.archive.root, config.limits.max_open_files)?);
        let fetcher = Arc::new(Fetcher::new(config.limits.fetch_config(), clock.clone())?);
        let ctx = PluginContext {
            archive: archive.clone(),
            fetcher: fetcher.clone(),
            clock: clock.clone(),
            directory_servers: config.directory_servers()?,
            onionperf_hosts: config.onionperf_hosts()?,
        };
        let (registry, failures) =
            Registry::discover(&ctx, &config.plugins.enabled, &builtin_factories(), &config.plugins.settings);
        Ok(Collector {
            config,
            clock,
            archive,
            fetcher,
            registry,
            plugin_failures: failures.iter().map(PluginError::to_string).collect(),
            last_completed: Mutex::new(BTreeMap::new()),
            integrity_missing: AtomicU64::new(0),
            metrics: Metrics::default(),
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn archive(&self) -> &Arc<Archive> {
        &self.archive
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn plugin_failures(&self) -> &[String] {
        &self.plugin_failures
    }

    pub fn last_completed(&self) -> BTreeMap<String, Timestamp> {
        self.last_completed.lock().unwrap().clone()
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        self.metrics.snapshot(self.fetcher.stats(), self.registry.parse_failures())
    }

    /// Runs one task and does the bookkeeping that follows every task:
    /// completion record, recent snapshot and index.
    pub async fn execute(&self, kind: TaskKind, scheduled_for: Timestamp) -> TaskReport {
        let report = self.registry.run_task(kind, self.clock.now()).await;
        let done = self.clock.now();
        self.last_completed.lock().unwrap().insert(kind.name().to_string(), done);
        if report.stored > 0 {
            if let Err(e) = self.archive.recent_snapshot(done) {
                tracing::error!(error = %e, "recent snapshot failed");
            }
        }
        if let Err(e) = self.archive.prune_recent(done) {
            tracing::warn!(error = %e, "pruning recent files failed");
        }
        if let Err(e) = self.archive.write_index(&self.last_completed()) {
            tracing::error!(error = %e, "writing index failed");
        }
        self.metrics.record(kind, report.ok, report.stored);
        tracing::info!(
            event = "task",
            task = kind.name(),
            scheduled_for = %scheduled_for,
            finished_at = %done,
            ok = report.ok,
            stored = report.stored,
            archived = self.archive.len(),
        );
        report
    }

    /// Tasks a `once` pass runs, in order.
    pub fn once_tasks(&self) -> Vec<TaskKind> {
        let mut tasks = Vec::new();
        if self.config.plugin_enabled(relaydescs::NAME) {
            tasks.push(TaskKind::Bootstrap);
            if self.config.scheduler.greedy_discovery {
                tasks.push(TaskKind::GreedyDiscovery);
            }
            tasks.push(TaskKind::ReferenceCheck);
        }
        if self.config.plugin_enabled(onionperf::NAME) {
            tasks.push(TaskKind::Onionperf);
        }
        tasks
    }

    /// A single collection pass.
    pub async fn once(&self) -> OnceReport {
        let mut rep = OnceReport { ok: self.plugin_failures.is_empty(), plugin_failures: self.plugin_failures.clone(), ..Default::default() };
        for kind in self.once_tasks() {
            let r = self.execute(kind, self.clock.now()).await;
            rep.ok &= r.ok;
            rep.stored += r.stored;
            rep.tasks.push((kind.name().to_string(), r.ok, r.stored));
        }
        rep
    }

    /// Integrity check whose missing count surfaces in the status report.
    pub fn verify(&self, window: Option<(Timestamp, Timestamp)>) -> IntegrityReport {
        let rep = self.archive.verify_integrity(window, self.config.thresholds.missing_ratio);
        self.integrity_missing.store(rep.missing as u64, Ordering::Relaxed);
        rep
    }

    pub fn loop_config(&self, until: Option<Timestamp>) -> LoopConfig {
        let s = &self.config.scheduler;
        LoopConfig {
            assumed_vote_seconds: self.config.voting.vote_seconds,
            assumed_dist_seconds: self.config.voting.dist_seconds,
            relay_tasks: self.config.plugin_enabled(relaydescs::NAME),
            greedy_cadence: s.greedy_discovery.then_some(s.greedy_interval_secs),
            reference_check_interval: s.reference_check_secs,
            onionperf_daily_at: self.config.plugin_enabled(onionperf::NAME).then_some(s.onionperf_daily_at),
            backoff_base: s.backoff_base_secs,
            backoff_cap: s.backoff_cap_secs,
            until,
        }
    }

    pub fn dirserver(self: &Arc<Self>) -> DirServer {
        DirServer::new(self.archive.clone(), self.clock.clone(), self.clone())
    }

    /// Scheduler loop plus directory server (when `serve.listen` is set)
    /// until `until` passes or `shutdown` resolves.
    pub async fn run(
        self: Arc<Self>,
        until: Option<Timestamp>,
        shutdown: impl Future<Output = ()> + Send + 'static,
    ) -> Result<Vec<CompletionRecord>, ServiceError> {
        let (stop_tx, stop_rx) = tokio::sync::watch::channel(false);
        let server = match self.config.serve.listen {
            Some(addr) => {
                let listener = TcpListener::bind(addr).await.map_err(|e| ServiceError::Listen(addr.to_string(), e))?;
                let mut rx = stop_rx.clone();
                let stopped = async move {
                    let _ = rx.wait_for(|s| *s).await;
                };
                Some(tokio::spawn(self.dirserver().serve(listener, stopped)))
            }
            None => None,
        };
        let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
        let cfg = self.loop_config(until);
        let runner: Arc<dyn TaskRunner> = self.clone();
        tokio::select! {
            _ = run_loop(self.clock.clone(), runner, cfg, Some(tx)) => {}
            _ = shutdown => tracing::info!("shutdown requested"),
        }
        let _ = stop_tx.send(true);
        if let Some(h) = server {
            let _ = h.await;
        }
        let mut records = Vec::new();
        while let Ok(r) = rx.try_recv() {
            records.push(r);
        }
        Ok(records)
    }
}

#[async_trait]
impl TaskRunner for Collector {
    async fn run_task(&self, kind: TaskKind, scheduled_for: Timestamp) -> bool {
        self.execute(kind, scheduled_for).await.ok
    }

    fn latest_timings(&self) -> Option<ConsensusTimings> {
        self.registry.latest_timings()
    }
}

impl StatusSource for Collector {
    fn status(&self) -> StatusReport {
        StatusReport {
            last_completed: self.last_completed(),
            archive_counts: self.archive.counts(),
            pending_expectations: self.registry.pending(self.clock.now()),
            permanently_missed: self.registry.permanently_missed() + self.integrity_missing.load(Ordering::Relaxed),
        }
    }

    fn task_status(&self) -> BTreeMap<String, Timestamp> {
        self.last_completed()
    }
}
