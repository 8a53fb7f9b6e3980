use std::collections::BTreeMap;
use std::sync::atomic::Ordering;
use std::sync::Mutex;

use serde::Serialize;

use crate::fetcher::FetchStats;
use crate::scheduler::TaskKind;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TaskCounters {
    pub runs: u64,
    pub failures: u64,
    pub stored: u64,
}

#[derive(Debug, Default)]
pub struct Metrics {
    tasks: Mutex<BTreeMap<&'static str, TaskCounters>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MetricsSnapshot {
    pub tasks: BTreeMap<String, TaskCounters>,
    pub http_requests: u64,
    pub http_failures: u64,
    pub http_bytes: u64,
    pub digest_mismatches: u64,
    pub parse_failures: u64,
}

impl Metrics {
    pub fn record(&self, kind: TaskKind, ok: bool, stored: usize) {
        let mut t = self.tasks.lock().unwrap();
        let c = t.entry(kind.name()).or_default();
        c.runs += 1;
        c.failures += u64::from(!ok);
        c.stored += stored as u64;
    }

    pub fn snapshot(&self, fetch: &FetchStats, parse_failures: u64) -> MetricsSnapshot {
        MetricsSnapshot {
            tasks: self.tasks.lock().unwrap().iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            http_requests: fetch.requests.load(Ordering::Relaxed),
            http_failures: fetch.failures.load(Ordering::Relaxed),
            http_bytes: fetch.bytes.load(Ordering::Relaxed),
            digest_mismatches: fetch.mismatches.load(Ordering::Relaxed),
            parse_failures,
        }
    }
}
