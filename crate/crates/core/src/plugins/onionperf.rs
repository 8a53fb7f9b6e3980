//! Daily OnionPerf results files.
//!
//! Yesterday's files are expected on each run. A 404 or 410 is final; any
//! other failure is retried on later daily runs while the file's day is
//! within `retry_days` of the run.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::Deserialize;

use super::{FetchOutcome, Plugin, PluginContext, PluginDescriptor, PluginError};
use crate::archive::Archive;
use crate::docmodel::{DocType, DocumentIdentifier, RawDocument, Timestamp};
use crate::fetcher::{Fetcher, OnionperfHost, ONIONPERF_SIZES};
use crate::refchecker::ArchiveView;
use crate::scheduler::TaskKind;

pub const NAME: &str = "onionperf";
const DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnionperfSettings {
    pub sizes: Vec<u64>,
    pub retry_days: i64,
}

impl Default for OnionperfSettings {
    fn default() -> Self {
        OnionperfSettings { sizes: ONIONPERF_SIZES.to_vec(), retry_days: 3 }
    }
}

type FileKey = (String, Timestamp);

#[derive(Default)]
struct State {
    permanent: HashSet<FileKey>,
    transient: HashSet<FileKey>,
    /// (file, day of the run that tried it)
    attempted: HashSet<(FileKey, Timestamp)>,
}

pub struct Onionperf {
    archive: Arc<Archive>,
    fetcher: Arc<Fetcher>,
    hosts: Vec<OnionperfHost>,
    settings: OnionperfSettings,
    state: Mutex<State>,
    missed: AtomicU64,
}

impl Onionperf {
    pub fn new(ctx: &PluginContext, settings: OnionperfSettings) -> Self {
        Onionperf {
            archive: ctx.archive.clone(),
            fetcher: ctx.fetcher.clone(),
            hosts: ctx.onionperf_hosts.clone(),
            settings,
            state: Mutex::new(State::default()),
            missed: AtomicU64::new(0),
        }
    }

    fn host_of(&self, subject: &str) -> Option<(&OnionperfHost, u64)> {
        self.hosts
            .iter()
            .find_map(|h| self.settings.sizes.iter().find(|&&s| h.subject(s) == subject).map(|&s| (h, s)))
    }
}

#[async_trait]
impl Plugin for Onionperf {
    fn descriptor(&self) -> PluginDescriptor {
        PluginDescriptor {
            name: NAME.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            doctypes: [DocType::TorperfResults].into(),
        }
    }

    fn expectations(&self, now: Timestamp) -> Vec<DocumentIdentifier> {
        let today = now.start_of_day();
        let oldest = today - self.settings.retry_days * DAY;
        let st = self.state.lock().unwrap();
        let mut files: Vec<FileKey> = Vec::new();
        for h in &self.hosts {
            for &size in &self.settings.sizes {
                files.push((h.subject(size), today - DAY));
            }
        }
        let mut retries: Vec<FileKey> = st.transient.iter().filter(|(_, d)| *d >= oldest && *d < today - DAY).cloned().collect();
        retries.sort();
        files.extend(retries);
        files
            .into_iter()
            .filter(|k| !st.permanent.contains(k) && !st.attempted.contains(&(k.clone(), today)))
            .filter(|(subject, day)| !self.archive.has_period_document(DocType::TorperfResults, Some(subject), *day))
            .map(|(subject, day)| DocumentIdentifier::guessed(DocType::TorperfResults, subject, day))
            .collect()
    }

    async fn fetch(&self, ids: &[DocumentIdentifier], now: Timestamp) -> Result<FetchOutcome, PluginError> {
        if let Some(id) = ids.iter().find(|id| !self.owns(id)) {
            return Err(PluginError::NotOwned { plugin: NAME.into(), id: Box::new(id.clone()) });
        }
        let today = now.start_of_day();
        // one request batch per (host, day)
        let mut groups: HashMap<(usize, Timestamp), Vec<u64>> = HashMap::new();
        {
            let mut st = self.state.lock().unwrap();
            for id in ids {
                let key = (id.subject.clone(), id.datetime);
                if st.permanent.contains(&key) || !st.attempted.insert((key, today)) {
                    continue;
                }
                if let Some((h, size)) = self.host_of(&id.subject) {
                    let hi = self.hosts.iter().position(|x| std::ptr::eq(x, h)).unwrap();
                    groups.entry((hi, id.datetime)).or_default().push(size);
                }
            }
        }
        let mut groups: Vec<_> = groups.into_iter().collect();
        groups.sort();
        let mut outcome = FetchOutcome::default();
        for ((hi, day), sizes) in groups {
            for r in self.fetcher.fetch_onionperf(&self.hosts[hi], day, &sizes).await {
                let key = (r.subject.clone(), r.day);
                if let Some(body) = r.unrecognized {
                    outcome.unrecognized.push((body, self.hosts[hi].endpoint.server_id.clone()));
                }
                let mut st = self.state.lock().unwrap();
                match r.outcome {
                    Ok(doc) => {
                        st.transient.remove(&key);
                        outcome.documents.push(doc);
                    }
                    Err(e) if e.is_permanent() => {
                        tracing::warn!(file = %key.0, day = %key.1, error = %e, "onionperf file permanently missing");
                        st.transient.remove(&key);
                        st.permanent.insert(key);
                        self.missed.fetch_add(1, Ordering::Relaxed);
                        outcome.permanent_misses += 1;
                    }
                    Err(e) => {
                        tracing::info!(file = %key.0, day = %key.1, error = %e, "onionperf file will be retried");
                        st.transient.insert(key);
                        outcome.errors += 1;
                    }
                }
            }
        }
        Ok(outcome)
    }

    fn parse(&self, _doc: &RawDocument, _now: Timestamp) -> Vec<DocumentIdentifier> {
        Vec::new()
    }

    fn cycles_on(&self, task: TaskKind) -> bool {
        task == TaskKind::Onionperf
    }

    fn permanently_missed(&self) -> u64 {
        self.missed.load(Ordering::Relaxed)
    }
}
