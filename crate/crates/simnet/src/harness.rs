//! Runs a collector against a simulated network on shared virtual time.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use dircollect::plugins::{onionperf, relaydescs};
use dircollect::scheduler::{Clock, CompletionRecord, ManualClock};
use dircollect::service::{Collector, Config, ServiceError};

use crate::scenario::SimScenario;
use crate::server::SimNetwork;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("cannot start simulated servers: {0}")]
    Servers(#[from] std::io::Error),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

/// Collector settings matching the scenario's accelerated timings.
pub fn collector_config(net: &SimNetwork, root: &Path, plugins: &[&str]) -> Config {
    let s = net.scenario();
    let mut cfg = Config::default();
    cfg.archive.root = root.to_path_buf();
    cfg.authorities = net.authority_configs();
    cfg.onionperf.hosts = net.onionperf_configs();
    cfg.voting.vote_seconds = s.d_vote;
    cfg.voting.dist_seconds = s.d_dist;
    cfg.scheduler.reference_check_secs = 10;
    cfg.scheduler.backoff_base_secs = 1;
    cfg.scheduler.backoff_cap_secs = 5;
    cfg.limits.timeout_secs = 5;
    cfg.plugins.enabled = plugins.iter().map(|p| p.to_string()).collect();
    cfg
}

pub fn relay_plugins() -> Vec<&'static str> {
    vec![relaydescs::NAME]
}

pub fn all_plugins() -> Vec<&'static str> {
    vec![relaydescs::NAME, onionperf::NAME]
}

/// A scenario's servers plus a collector on the same virtual clock.
pub struct SimRun {
    pub clock: Arc<ManualClock>,
    pub net: SimNetwork,
    pub collector: Arc<Collector>,
}

pub struct RunOutcome {
    pub records: Vec<CompletionRecord>,
    pub wall: Duration,
}

impl SimRun {
    /// Starts at the scenario's run start.
    pub async fn start(s: &SimScenario, root: &Path, plugins: &[&str]) -> Result<SimRun, HarnessError> {
        Self::start_with(s, root, plugins, |_| {}).await
    }

    pub async fn start_with(
        s: &SimScenario,
        root: &Path,
        plugins: &[&str],
        tweak: impl FnOnce(&mut Config),
    ) -> Result<SimRun, HarnessError> {
        let clock = Arc::new(ManualClock::new(s.run_start()));
        let net = SimNetwork::start(s, clock.clone()).await?;
        let mut cfg = collector_config(&net, root, plugins);
        tweak(&mut cfg);
        let collector = Arc::new(Collector::new(cfg, clock.clone())?);
        Ok(SimRun { clock, net, collector })
    }

    /// Runs the scheduler until the scenario's run end.
    pub async fn run(&self) -> Result<RunOutcome, HarnessError> {
        self.run_until(self.net.scenario().run_end()).await
    }

    pub async fn run_until(&self, until: dircollect::docmodel::Timestamp) -> Result<RunOutcome, HarnessError> {
        let started = Instant::now();
        let records = self.collector.clone().run(Some(until), std::future::pending()).await?;
        tracing::debug!(tasks = records.len(), now = %self.clock.now(), "simulated run finished");
        Ok(RunOutcome { records, wall: started.elapsed() })
    }
}
