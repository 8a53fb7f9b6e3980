//! Declarative scenario description, loadable from TOML.

use dircollect::docmodel::{ConsensusTimings, Timestamp};
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// An authority that drops every request in `[down_from, down_until)`.
/// Open ends mean the whole run.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fault {
    pub authority: usize,
    #[serde(default)]
    pub down_from: Option<Timestamp>,
    #[serde(default)]
    pub down_until: Option<Timestamp>,
}

/// Answer requests whose path starts with `path` with `status`.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpError {
    pub authority: usize,
    pub path: String,
    pub status: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingFile {
    pub source: String,
    pub size: u64,
    pub day: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnionperfScenario {
    pub sources: Vec<String>,
    pub sizes: Vec<u64>,
    /// First measurement day; files exist for `days` consecutive days.
    pub first_day: Timestamp,
    pub days: usize,
    pub measurements_per_file: usize,
    pub missing: Vec<MissingFile>,
}

impl Default for OnionperfScenario {
    fn default() -> Self {
        OnionperfScenario {
            sources: vec!["op-ab".into(), "op-hk".into(), "op-nl".into()],
            sizes: dircollect::fetcher::ONIONPERF_SIZES.to_vec(),
            first_day: Timestamp::from_unix(1_542_153_600), // 2018-11-14
            days: 4,
            measurements_per_file: 24,
            missing: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimScenario {
    pub seed: u64,
    pub n_authorities: usize,
    pub n_relays: usize,
    pub period_seconds: i64,
    pub d_vote: i64,
    pub d_dist: i64,
    /// Valid-after of period 0.
    pub epoch: Timestamp,
    /// The run ends inside period `periods`.
    pub periods: usize,
    /// Run start, seconds after the epoch.
    pub start_offset: i64,
    /// Run end, seconds after the valid-after of period `periods`.
    pub end_offset: i64,
    pub faults: Vec<Fault>,
    pub http_errors: Vec<HttpError>,
    pub split_consensus: bool,
    pub onionperf: OnionperfScenario,
}

impl Default for SimScenario {
    fn default() -> Self {
        SimScenario {
            seed: 1,
            n_authorities: 9,
            n_relays: 40,
            period_seconds: 60,
            d_vote: 5,
            d_dist: 5,
            epoch: Timestamp::from_unix(1_542_308_400), // 2018-11-15 19:00:00
            periods: 2,
            start_offset: 10,
            end_offset: 30,
            faults: vec![],
            http_errors: vec![],
            split_consensus: false,
            onionperf: OnionperfScenario::default(),
        }
    }
}

/// Half-open availability window; `None` end means open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub from: Timestamp,
    pub until: Option<Timestamp>,
}

impl Window {
    pub fn new(from: Timestamp, until: Timestamp) -> Self {
        Window { from, until: Some(until) }
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        t >= self.from && self.until.is_none_or(|u| t < u)
    }

    /// Overlap with the closed interval `[a, b]`.
    pub fn intersects(&self, a: Timestamp, b: Timestamp) -> bool {
        self.from <= b && self.until.is_none_or(|u| u > a)
    }
}

/// Server-side view of the collector's phases: alpha from Task 1 until
/// half a period after valid-after, beta until the next Task 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SimPhase {
    Alpha(i64),
    Beta(i64),
}

impl SimScenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: SimScenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Invalid(m.to_string()));
        if self.n_authorities == 0 || self.n_authorities > 200 {
            return bad("n_authorities must be in 1..=200");
        }
        if self.n_relays > 60_000 {
            return bad("n_relays too large");
        }
        if self.split_consensus && self.n_authorities < 2 {
            return bad("split_consensus needs two authorities");
        }
        self.timings(0).validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if self.lead() >= self.period_seconds / 2 {
            return bad("voting delays must stay below half a period");
        }
        if self.start_offset < 0 || self.start_offset >= self.period_seconds {
            return bad("start_offset must fall inside period 0");
        }
        if self.faults.iter().map(|f| f.authority).chain(self.http_errors.iter().map(|e| e.authority)).any(|a| a >= self.n_authorities) {
            return bad("fault refers to an unknown authority");
        }
        Ok(())
    }

    pub fn valid_after(&self, k: i64) -> Timestamp {
        self.epoch + k * self.period_seconds
    }

    pub fn timings(&self, k: i64) -> ConsensusTimings {
        let va = self.valid_after(k);
        ConsensusTimings {
            valid_after: va,
            fresh_until: va + self.period_seconds,
            valid_until: va + 3 * self.period_seconds,
            vote_seconds: self.d_vote,
            dist_seconds: self.d_dist,
        }
    }

    /// Seconds before valid-after that votes and fresh descriptors appear.
    pub fn lead(&self) -> i64 {
        self.d_vote + self.d_dist
    }

    /// Number of generated periods: the run's periods plus one beyond.
    pub fn generated_periods(&self) -> usize {
        self.periods + 2
    }

    pub fn run_start(&self) -> Timestamp {
        self.epoch + self.start_offset
    }

    pub fn run_end(&self) -> Timestamp {
        self.valid_after(self.periods as i64) + self.end_offset
    }

    /// Index of the period whose valid-after is the latest at or before `t`.
    pub fn period_at(&self, t: Timestamp) -> i64 {
        (t - self.epoch).div_euclid(self.period_seconds)
    }

    pub fn next_vote_window(&self, k: i64) -> Window {
        let va = self.valid_after(k);
        Window::new(va - self.lead(), va)
    }

    pub fn distribution_window(&self, k: i64) -> Window {
        let va = self.valid_after(k);
        Window::new(va - self.d_dist, va)
    }

    pub fn current_window(&self, k: i64) -> Window {
        let va = self.valid_after(k);
        Window::new(va, va + self.period_seconds)
    }

    pub fn bandwidth_window(&self, k: i64) -> Window {
        let va = self.valid_after(k);
        Window::new(va - self.lead(), va + self.period_seconds - self.lead())
    }

    pub fn descriptor_window(&self, k: i64) -> Window {
        Window { from: self.valid_after(k) - self.lead(), until: None }
    }

    pub fn is_down(&self, authority: usize, t: Timestamp) -> bool {
        self.faults.iter().any(|f| {
            f.authority == authority && f.down_from.is_none_or(|a| t >= a) && f.down_until.is_none_or(|b| t < b)
        })
    }

    /// Authorities signing the second consensus variant when split: the
    /// last `n / 2`.
    pub fn variant_of(&self, authority: usize) -> usize {
        usize::from(self.split_consensus && authority >= self.n_authorities - self.n_authorities / 2)
    }

    pub fn variants(&self) -> usize {
        if self.split_consensus { 2 } else { 1 }
    }

    pub fn phase_at(&self, t: Timestamp) -> SimPhase {
        let task1_lead = self.d_dist + self.d_vote / 2;
        let half = self.period_seconds / 2;
        // shift so that alpha of period k starts at a multiple of the period
        let k = (t - (self.epoch - task1_lead)).div_euclid(self.period_seconds);
        let beta_start = self.valid_after(k) + half;
        if t < beta_start {
            SimPhase::Alpha(k)
        } else {
            SimPhase::Beta(k)
        }
    }
}
