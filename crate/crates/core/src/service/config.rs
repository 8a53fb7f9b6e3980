//! Service configuration, read from one TOML file.
//!
//! Path resolution: `--config` flag, then `DIRCOLLECT_CONFIG`, then
//! built-in defaults.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::archive::{DEFAULT_MAX_OPEN_FILES, DEFAULT_MISSING_THRESHOLD};
use crate::fetcher::{FetchConfig, OnionperfHost, Role, ServerEndpoint};
use crate::plugins::{onionperf, relaydescs, DEFAULT_PLUGINS};

pub const CONFIG_ENV: &str = "DIRCOLLECT_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("cannot parse config {0}: {1}")]
    Parse(PathBuf, String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchiveSection {
    pub root: PathBuf,
}

impl Default for ArchiveSection {
    fn default() -> Self {
        ArchiveSection { root: PathBuf::from("archive") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub listen: Option<SocketAddr>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub id: String,
    pub url: String,
    /// Defaults to the role implied by the list the entry appears in.
    #[serde(default)]
    pub roles: Vec<Role>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnionperfHostConfig {
    pub source: String,
    pub url: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnionperfSection {
    pub hosts: Vec<OnionperfHostConfig>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsSection {
    pub max_open_files: usize,
    pub max_batch: usize,
    pub per_server_requests: usize,
    pub global_requests: usize,
    pub timeout_secs: u64,
    pub max_body_bytes: usize,
}

impl Default for LimitsSection {
    fn default() -> Self {
        let f = FetchConfig::default();
        LimitsSection {
            max_open_files: DEFAULT_MAX_OPEN_FILES,
            max_batch: f.max_batch,
            per_server_requests: f.per_server,
            global_requests: f.global,
            timeout_secs: f.timeout_secs,
            max_body_bytes: f.max_body_bytes,
        }
    }
}

impl LimitsSection {
    pub fn fetch_config(&self) -> FetchConfig {
        FetchConfig {
            max_batch: self.max_batch,
            per_server: self.per_server_requests,
            global: self.global_requests,
            timeout_secs: self.timeout_secs,
            max_body_bytes: self.max_body_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdsSection {
    pub missing_ratio: f64,
}

impl Default for ThresholdsSection {
    fn default() -> Self {
        ThresholdsSection { missing_ratio: DEFAULT_MISSING_THRESHOLD }
    }
}

/// Assumed voting delays until a consensus has been seen.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VotingSection {
    pub vote_seconds: i64,
    pub dist_seconds: i64,
}

impl Default for VotingSection {
    fn default() -> Self {
        VotingSection { vote_seconds: 300, dist_seconds: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    /// Task 3: `/tor/server/all` and `/tor/extra/all`. Off by default.
    pub greedy_discovery: bool,
    pub greedy_interval_secs: i64,
    pub reference_check_secs: i64,
    /// Seconds after midnight UTC.
    pub onionperf_daily_at: i64,
    pub backoff_base_secs: i64,
    pub backoff_cap_secs: i64,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        SchedulerSection {
            greedy_discovery: false,
            greedy_interval_secs: 3600,
            reference_check_secs: 300,
            onionperf_daily_at: 15 * 60,
            backoff_base_secs: 5,
            backoff_cap_secs: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default)]
pub struct PluginsSection {
    pub enabled: Vec<String>,
    /// Per-plugin subtables, passed to the plugin unchanged.
    #[serde(flatten)]
    pub settings: toml::Table,
}

impl Default for PluginsSection {
    fn default() -> Self {
        PluginsSection { enabled: DEFAULT_PLUGINS.iter().map(|s| s.to_string()).collect(), settings: toml::Table::new() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub archive: ArchiveSection,
    pub serve: ServeSection,
    pub authorities: Vec<EndpointConfig>,
    pub caches: Vec<EndpointConfig>,
    pub collector_peers: Vec<EndpointConfig>,
    pub onionperf: OnionperfSection,
    pub limits: LimitsSection,
    pub thresholds: ThresholdsSection,
    pub voting: VotingSection,
    pub scheduler: SchedulerSection,
    pub plugins: PluginsSection,
}

impl Config {
    pub fn parse(text: &str, origin: &Path) -> Result<Config, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(origin.to_path_buf(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        Self::parse(&text, path)
    }

    /// Flag first, then the environment variable.
    pub fn resolve_path(flag: Option<&Path>) -> Option<PathBuf> {
        flag.map(Path::to_path_buf).or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
    }

    /// Loads from the resolved path, or defaults when none is given.
    pub fn load_resolved(flag: Option<&Path>) -> Result<Config, ConfigError> {
        match Self::resolve_path(flag) {
            Some(p) => Self::load(&p),
            None => Ok(Config::default()),
        }
    }

    pub fn plugin_enabled(&self, name: &str) -> bool {
        self.plugins.enabled.iter().any(|n| n == name)
    }

    /// Checks that hold for every command.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.limits.max_open_files == 0 {
            return bad("limits.max_open_files must be at least 1".into());
        }
        if self.limits.max_batch == 0 || self.limits.per_server_requests == 0 || self.limits.global_requests == 0 {
            return bad("request limits must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.thresholds.missing_ratio) {
            return bad(format!("thresholds.missing_ratio {} not in [0, 1]", self.thresholds.missing_ratio));
        }
        if self.voting.vote_seconds <= 0 || self.voting.dist_seconds <= 0 {
            return bad("voting delays must be positive".into());
        }
        let s = &self.scheduler;
        if s.greedy_interval_secs <= 0 || s.reference_check_secs <= 0 || s.backoff_base_secs <= 0 {
            return bad("scheduler intervals must be positive".into());
        }
        if !(0..86_400).contains(&s.onionperf_daily_at) {
            return bad("scheduler.onionperf_daily_at must be within a day".into());
        }
        let mut names = HashSet::new();
        for p in &self.plugins.enabled {
            if !names.insert(p) {
                return bad(format!("plugin {p} enabled twice"));
            }
        }
        let mut ids = HashSet::new();
        for e in self.directory_servers()? {
            if !ids.insert(e.server_id.clone()) {
                return bad(format!("server id {} listed twice", e.server_id));
            }
        }
        self.onionperf_hosts()?;
        Ok(())
    }

    /// Additional checks before collecting.
    pub fn validate_for_collection(&self) -> Result<(), ConfigError> {
        if self.plugin_enabled(relaydescs::NAME) && self.authorities.is_empty() {
            return Err(ConfigError::Invalid("relaydescs is enabled but no authorities are configured".into()));
        }
        if self.plugin_enabled(onionperf::NAME) && self.onionperf.hosts.is_empty() {
            tracing::warn!("onionperf is enabled but no hosts are configured");
        }
        Ok(())
    }

    /// Authorities, caches and peers, in that order.
    pub fn directory_servers(&self) -> Result<Vec<ServerEndpoint>, ConfigError> {
        let lists = [
            (&self.authorities, Role::Authority, "authorities"),
            (&self.caches, Role::DirectoryCache, "caches"),
            (&self.collector_peers, Role::CollectorPeer, "collector_peers"),
        ];
        let mut out = Vec::new();
        for (list, default_role, section) in lists {
            for e in list {
                let roles = if e.roles.is_empty() { vec![default_role] } else { e.roles.clone() };
                let ep = ServerEndpoint::new(e.id.clone(), &e.url, roles)
                    .map_err(|err| ConfigError::Invalid(format!("{section}: {err}")))?;
                out.push(ep);
            }
        }
        Ok(out)
    }

    pub fn onionperf_hosts(&self) -> Result<Vec<OnionperfHost>, ConfigError> {
        self.onionperf
            .hosts
            .iter()
            .map(|h| {
                if h.source.is_empty() || h.source.contains(['/', '.']) {
                    return Err(ConfigError::Invalid(format!("onionperf source {:?} is not a plain name", h.source)));
                }
                let endpoint = ServerEndpoint::new(h.source.clone(), &h.url, [Role::OnionperfHost])
                    .map_err(|err| ConfigError::Invalid(format!("onionperf.hosts: {err}")))?;
                Ok(OnionperfHost { endpoint, source: h.source.clone() })
            })
            .collect()
    }
}
