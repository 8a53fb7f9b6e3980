use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use async_trait::async_trait;
use serde::Serialize;
use tokio::sync::mpsc::UnboundedSender;
use tokio::task::JoinSet;

use super::{compute_schedule, next_occurrence, next_phase_boundary, Clock};
use crate::docmodel::{ConsensusTimings, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum TaskKind {
    Bootstrap,
    EagerVotes,
    EagerSignatures,
    GreedyDiscovery,
    ReferenceCheck,
    Onionperf,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Bootstrap,
        TaskKind::EagerVotes,
        TaskKind::EagerSignatures,
        TaskKind::GreedyDiscovery,
        TaskKind::ReferenceCheck,
        TaskKind::Onionperf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Bootstrap => "bootstrap",
            TaskKind::EagerVotes => "eager-votes",
            TaskKind::EagerSignatures => "eager-signatures",
            TaskKind::GreedyDiscovery => "greedy-discovery",
            TaskKind::ReferenceCheck => "reference-check",
            TaskKind::Onionperf => "onionperf",
        }
    }
}

/// Executes task bodies on behalf of the loop.
#[async_trait]
pub trait TaskRunner: Send + Sync + 'static {
    /// Returns false when the task failed as a whole. Only bootstrap
    /// failures change scheduling (they trigger a backoff retry).
    async fn run_task(&self, kind: TaskKind, scheduled_for: Timestamp) -> bool;

    fn latest_timings(&self) -> Option<ConsensusTimings>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CompletionRecord {
    pub task: TaskKind,
    pub scheduled_for: Timestamp,
    pub finished_at: Timestamp,
    pub ok: bool,
}

#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub assumed_vote_seconds: i64,
    pub assumed_dist_seconds: i64,
    /// Tasks 0 to 4 (relay descriptors) enabled.
    pub relay_tasks: bool,
    pub greedy_cadence: Option<i64>,
    pub reference_check_interval: i64,
    /// Seconds after midnight UTC.
    pub onionperf_daily_at: Option<i64>,
    pub backoff_base: i64,
    pub backoff_cap: i64,
    /// Stop once no task is due at or before this time.
    pub until: Option<Timestamp>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            assumed_vote_seconds: 300,
            assumed_dist_seconds: 300,
            relay_tasks: true,
            greedy_cadence: None,
            reference_check_interval: 300,
            onionperf_daily_at: Some(15 * 60),
            backoff_base: 5,
            backoff_cap: 300,
            until: None,
        }
    }
}

struct LoopState {
    t0: Timestamp,
    next_bootstrap: Option<Timestamp>,
    bootstrap_failures: u32,
    last_fired: BTreeMap<TaskKind, Timestamp>,
}

impl LoopState {
    fn after(&self, kind: TaskKind) -> Timestamp {
        self.last_fired.get(&kind).copied().unwrap_or(self.t0 - 1)
    }

    fn next_fire(&self, kind: TaskKind, cfg: &LoopConfig, timings: Option<&ConsensusTimings>) -> Option<Timestamp> {
        let after = self.after(kind);
        let relay = cfg.relay_tasks;
        match kind {
            TaskKind::Bootstrap => self.next_bootstrap.filter(|_| relay),
            TaskKind::EagerVotes | TaskKind::EagerSignatures if relay => {
                let s = compute_schedule(timings?).ok()?;
                let anchor = if kind == TaskKind::EagerVotes { s.task1_at } else { s.task2_at };
                Some(next_occurrence(anchor, s.period(), after))
            }
            TaskKind::GreedyDiscovery if relay => {
                cfg.greedy_cadence.map(|c| next_occurrence(self.t0, c.max(1), after))
            }
            TaskKind::ReferenceCheck if relay => {
                let tick = next_occurrence(self.t0, cfg.reference_check_interval.max(1), after);
                let boundary = timings.and_then(|t| next_phase_boundary(after, t));
                Some(boundary.map_or(tick, |b| b.min(tick)))
            }
            TaskKind::Onionperf => cfg
                .onionperf_daily_at
                .map(|at| next_occurrence(self.t0.start_of_day() + at, 86_400, after)),
            _ => None,
        }
    }

    fn backoff(&self, cfg: &LoopConfig) -> i64 {
        let exp = self.bootstrap_failures.saturating_sub(1).min(30);
        cfg.backoff_base.saturating_mul(1i64 << exp).min(cfg.backoff_cap)
    }

    fn bootstrap_finished(&mut self, ok: bool, finished_at: Timestamp, cfg: &LoopConfig) {
        if ok {
            self.next_bootstrap = None;
            self.bootstrap_failures = 0;
        } else {
            self.bootstrap_failures += 1;
            let delay = self.backoff(cfg);
            tracing::warn!(task = "bootstrap", retry_in = delay, "task failed, retrying");
            self.next_bootstrap = Some(finished_at + delay);
        }
    }
}

fn effective_timings(runner: &dyn TaskRunner, cfg: &LoopConfig, now: Timestamp) -> Option<ConsensusTimings> {
    runner
        .latest_timings()
        .or_else(|| ConsensusTimings::provisional(now, cfg.assumed_vote_seconds, cfg.assumed_dist_seconds).ok())
}

/// Runs the task table until `cfg.until` (forever when unset).
///
/// On a virtual clock due tasks run one after another in [`TaskKind`]
/// order and time only advances once they are all done. On a real clock
/// they run as concurrent jobs, and a task whose previous instance is still
/// running when it comes due is skipped.
pub async fn run_loop(
    clock: Arc<dyn Clock>,
    runner: Arc<dyn TaskRunner>,
    cfg: LoopConfig,
    completions: Option<UnboundedSender<CompletionRecord>>,
) {
    let t0 = clock.now();
    let mut state = LoopState { t0, next_bootstrap: Some(t0), bootstrap_failures: 0, last_fired: BTreeMap::new() };
    let mut jobs: JoinSet<CompletionRecord> = JoinSet::new();
    let mut running: BTreeSet<TaskKind> = BTreeSet::new();
    let virtual_time = clock.is_virtual();
    tracing::info!(t0 = %t0, virtual_time, "scheduler started");

    let finish = |rec: CompletionRecord, state: &mut LoopState, running: &mut BTreeSet<TaskKind>| {
        running.remove(&rec.task);
        if rec.task == TaskKind::Bootstrap {
            state.bootstrap_finished(rec.ok, rec.finished_at, &cfg);
        }
        tracing::info!(task = rec.task.name(), finished_at = %rec.finished_at, ok = rec.ok, "task completed");
        if let Some(tx) = &completions {
            let _ = tx.send(rec);
        }
    };

    loop {
        let now = clock.now();
        let timings = effective_timings(runner.as_ref(), &cfg, now);
        let next = TaskKind::ALL
            .iter()
            .filter_map(|&k| state.next_fire(k, &cfg, timings.as_ref()).map(|t| (t, k)))
            .min();
        let Some((at, _)) = next else {
            if running.is_empty() {
                break;
            }
            if let Some(Ok(rec)) = jobs.join_next().await {
                finish(rec, &mut state, &mut running);
            }
            continue;
        };
        if cfg.until.is_some_and(|u| at > u) {
            while let Some(res) = jobs.join_next().await {
                if let Ok(rec) = res {
                    finish(rec, &mut state, &mut running);
                }
            }
            // a finished bootstrap may have scheduled an earlier retry
            let timings = effective_timings(runner.as_ref(), &cfg, clock.now());
            let again = TaskKind::ALL.iter().filter_map(|&k| state.next_fire(k, &cfg, timings.as_ref())).min();
            if again.is_some_and(|t| cfg.until.is_some_and(|u| t <= u)) {
                continue;
            }
            break;
        }
        if at > now {
            if virtual_time || running.is_empty() {
                clock.sleep_until(at).await;
            } else {
                tokio::select! {
                    _ = clock.sleep_until(at) => {}
                    Some(res) = jobs.join_next() => {
                        if let Ok(rec) = res {
                            finish(rec, &mut state, &mut running);
                        }
                        continue;
                    }
                }
            }
        }
        let now = clock.now();
        let timings = effective_timings(runner.as_ref(), &cfg, now);
        for kind in TaskKind::ALL {
            let Some(due) = state.next_fire(kind, &cfg, timings.as_ref()) else { continue };
            if due > now {
                continue;
            }
            let after_due = state.next_fire_after(kind, &cfg, timings.as_ref(), due);
            if after_due.is_some_and(|t| t <= now) {
                tracing::warn!(task = kind.name(), scheduled_for = %due, now = %now, "misfire: skipped missed instances");
            }
            state.last_fired.insert(kind, now);
            if kind == TaskKind::Bootstrap {
                state.next_bootstrap = None;
            }
            if running.contains(&kind) {
                tracing::warn!(task = kind.name(), scheduled_for = %due, "misfire: previous instance still running");
                continue;
            }
            tracing::debug!(task = kind.name(), scheduled_for = %due, "task fired");
            if virtual_time {
                let ok = runner.run_task(kind, due).await;
                let rec = CompletionRecord { task: kind, scheduled_for: due, finished_at: clock.now(), ok };
                finish(rec, &mut state, &mut running);
            } else {
                running.insert(kind);
                let runner = runner.clone();
                let clock = clock.clone();
                jobs.spawn(async move {
                    let ok = runner.run_task(kind, due).await;
                    CompletionRecord { task: kind, scheduled_for: due, finished_at: clock.now(), ok }
                });
            }
        }
    }
    tracing::info!(at = %clock.now(), "scheduler stopped");
}

impl LoopState {
    fn next_fire_after(
        &self,
        kind: TaskKind,
        cfg: &LoopConfig,
        timings: Option<&ConsensusTimings>,
        after: Timestamp,
    ) -> Option<Timestamp> {
        if kind == TaskKind::Bootstrap {
            return None;
        }
        let probe = LoopState {
            t0: self.t0,
            next_bootstrap: None,
            bootstrap_failures: 0,
            last_fired: BTreeMap::from([(kind, after)]),
        };
        probe.next_fire(kind, cfg, timings)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    use std::time::Duration;

    use super::*;
    use crate::scheduler::{ManualClock, ScaledClock};

    fn ts(s: &str) -> Timestamp {
        Timestamp::parse(s).unwrap()
    }

    struct Recorder {
        clock: Arc<dyn Clock>,
        timings: Mutex<Option<ConsensusTimings>>,
        learn_on_bootstrap: Option<ConsensusTimings>,
        bootstrap_failures: AtomicUsize,
        fired: Mutex<Vec<(TaskKind, Timestamp, Timestamp)>>,
        refcheck_sleep: Option<Duration>,
        active: AtomicUsize,
        max_active: AtomicUsize,
    }

    impl Recorder {
        fn new(clock: Arc<dyn Clock>, learn: Option<ConsensusTimings>) -> Self {
            Recorder {
                clock,
                timings: Mutex::new(None),
                learn_on_bootstrap: learn,
                bootstrap_failures: AtomicUsize::new(0),
                fired: Mutex::new(vec![]),
                refcheck_sleep: None,
                active: AtomicUsize::new(0),
                max_active: AtomicUsize::new(0),
            }
        }

        fn fired(&self) -> Vec<(TaskKind, Timestamp, Timestamp)> {
            self.fired.lock().unwrap().clone()
        }
    }

    #[async_trait]
    impl TaskRunner for Recorder {
        async fn run_task(&self, kind: TaskKind, scheduled_for: Timestamp) -> bool {
            self.fired.lock().unwrap().push((kind, scheduled_for, self.clock.now()));
            if kind == TaskKind::Bootstrap {
                if self.bootstrap_failures.load(Ordering::SeqCst) > 0 {
                    self.bootstrap_failures.fetch_sub(1, Ordering::SeqCst);
                    return false;
                }
                *self.timings.lock().unwrap() = self.learn_on_bootstrap;
            }
            if kind == TaskKind::ReferenceCheck {
                if let Some(d) = self.refcheck_sleep {
                    let n = self.active.fetch_add(1, Ordering::SeqCst) + 1;
                    self.max_active.fetch_max(n, Ordering::SeqCst);
                    tokio::time::sleep(d).await;
                    self.active.fetch_sub(1, Ordering::SeqCst);
                }
            }
            true
        }

        fn latest_timings(&self) -> Option<ConsensusTimings> {
            *self.timings.lock().unwrap()
        }
    }

    fn hour_timings() -> ConsensusTimings {
        ConsensusTimings::new(ts("2018-11-15 19:00:00"), ts("2018-11-15 20:00:00"), ts("2018-11-15 22:00:00"), 300, 300)
            .unwrap()
    }

    #[tokio::test]
    async fn cold_start_schedules_task1() {
        let clock = Arc::new(ManualClock::new(ts("2018-11-15 19:10:00")));
        let rec = Arc::new(Recorder::new(clock.clone(), Some(hour_timings())));
        let cfg = LoopConfig {
            reference_check_interval: 3600,
            onionperf_daily_at: None,
            until: Some(ts("2018-11-15 20:00:00")),
            ..Default::default()
        };
        run_loop(clock.clone(), rec.clone(), cfg, None).await;
        let fired = rec.fired();
        assert_eq!(fired[0].0, TaskKind::Bootstrap);
        let votes: Vec<_> = fired.iter().filter(|f| f.0 == TaskKind::EagerVotes).collect();
        assert_eq!(votes.len(), 1);
        assert_eq!(votes[0].1, ts("2018-11-15 19:52:30"));
        let sigs: Vec<_> = fired.iter().filter(|f| f.0 == TaskKind::EagerSignatures).collect();
        assert_eq!(sigs[0].1, ts("2018-11-15 19:57:30"));
        assert!(fired.iter().all(|f| f.0 != TaskKind::GreedyDiscovery));
    }

    #[tokio::test]
    async fn greedy_disabled_never_fires_enabled_fires_at_t0() {
        let clock = Arc::new(ManualClock::new(ts("2018-11-15 19:10:00")));
        let rec = Arc::new(Recorder::new(clock.clone(), Some(hour_timings())));
        let cfg = LoopConfig {
            greedy_cadence: Some(86_400),
            onionperf_daily_at: None,
            until: Some(ts("2018-11-16 19:10:00")),
            ..Default::default()
        };
        run_loop(clock.clone(), rec.clone(), cfg, None).await;
        let greedy: Vec<_> = rec.fired().into_iter().filter(|f| f.0 == TaskKind::GreedyDiscovery).collect();
        assert_eq!(greedy.len(), 2);
        assert_eq!(greedy[0].1, ts("2018-11-15 19:10:00"));
    }

    #[tokio::test]
    async fn bootstrap_backs_off() {
        let clock = Arc::new(ManualClock::new(ts("2018-11-15 19:10:00")));
        let rec = Arc::new(Recorder::new(clock.clone(), Some(hour_timings())));
        rec.bootstrap_failures.store(8, Ordering::SeqCst);
        let cfg = LoopConfig {
            relay_tasks: true,
            reference_check_interval: 100_000,
            onionperf_daily_at: None,
            until: Some(ts("2018-11-15 19:40:00")),
            ..Default::default()
        };
        run_loop(clock.clone(), rec.clone(), cfg, None).await;
        let boots: Vec<i64> = rec
            .fired()
            .iter()
            .filter(|f| f.0 == TaskKind::Bootstrap)
            .map(|f| f.2 - ts("2018-11-15 19:10:00"))
            .collect();
        assert_eq!(boots, vec![0, 5, 15, 35, 75, 155, 315, 615, 915]);
    }

    #[tokio::test]
    async fn reference_check_runs_at_phase_boundaries() {
        let clock = Arc::new(ManualClock::new(ts("2018-11-15 19:10:00")));
        let rec = Arc::new(Recorder::new(clock.clone(), Some(hour_timings())));
        let cfg = LoopConfig {
            reference_check_interval: 100_000,
            onionperf_daily_at: None,
            until: Some(ts("2018-11-15 21:00:00")),
            ..Default::default()
        };
        run_loop(clock.clone(), rec.clone(), cfg, None).await;
        let checks: Vec<Timestamp> =
            rec.fired().iter().filter(|f| f.0 == TaskKind::ReferenceCheck).map(|f| f.1).collect();
        assert_eq!(
            checks,
            vec![
                ts("2018-11-15 19:10:00"),
                ts("2018-11-15 19:30:00"),
                ts("2018-11-15 19:52:30"),
                ts("2018-11-15 20:30:00"),
                ts("2018-11-15 20:52:30"),
            ]
        );
    }

    #[tokio::test]
    async fn onionperf_daily() {
        let clock = Arc::new(ManualClock::new(ts("2018-11-15 19:10:00")));
        let rec = Arc::new(Recorder::new(clock.clone(), None));
        let cfg = LoopConfig { relay_tasks: false, until: Some(ts("2018-11-18 12:00:00")), ..Default::default() };
        run_loop(clock.clone(), rec.clone(), cfg, None).await;
        let runs: Vec<Timestamp> = rec.fired().iter().map(|f| f.1).collect();
        assert_eq!(runs, vec![ts("2018-11-16 00:15:00"), ts("2018-11-17 00:15:00"), ts("2018-11-18 00:15:00")]);
    }

    #[tokio::test]
    async fn completions_are_reported() {
        let clock = Arc::new(ManualClock::new(ts("2018-11-15 19:10:00")));
        let rec = Arc::new(Recorder::new(clock.clone(), Some(hour_timings())));
        let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
        let cfg = LoopConfig { onionperf_daily_at: None, until: Some(ts("2018-11-15 19:53:00")), ..Default::default() };
        run_loop(clock.clone(), rec.clone(), cfg, Some(tx)).await;
        let mut names = BTreeSet::new();
        while let Ok(r) = rx.try_recv() {
            names.insert(r.task.name());
        }
        assert!(names.contains("eager-votes"));
        assert!(names.contains("bootstrap"));
    }

    #[tokio::test]
    async fn scaled_clock_preserves_order() {
        let period = ConsensusTimings::new(
            ts("2018-11-15 19:00:00"),
            ts("2018-11-15 19:01:00"),
            ts("2018-11-15 19:03:00"),
            5,
            5,
        )
        .unwrap();
        let cfg = LoopConfig {
            reference_check_interval: 20,
            onionperf_daily_at: None,
            until: Some(ts("2018-11-15 19:02:10")),
            ..Default::default()
        };
        let manual = Arc::new(ManualClock::new(ts("2018-11-15 19:00:10")));
        let a = Arc::new(Recorder::new(manual.clone(), Some(period)));
        run_loop(manual, a.clone(), cfg.clone(), None).await;
        let scaled = Arc::new(ScaledClock::new(ts("2018-11-15 19:00:10"), 100.0));
        let b = Arc::new(Recorder::new(scaled.clone(), Some(period)));
        run_loop(scaled, b.clone(), cfg, None).await;
        let order = |r: &Recorder| r.fired().iter().map(|f| (f.0, f.1)).collect::<Vec<_>>();
        assert_eq!(order(&a), order(&b));
    }

    #[tokio::test]
    async fn overrunning_task_is_skipped_not_overlapped() {
        let start = ts("2018-11-15 19:00:10");
        let clock = Arc::new(ScaledClock::new(start, 100.0));
        let mut r = Recorder::new(clock.clone(), None);
        r.refcheck_sleep = Some(Duration::from_millis(250));
        let rec = Arc::new(r);
        let cfg = LoopConfig {
            reference_check_interval: 10,
            onionperf_daily_at: None,
            until: Some(start + 60),
            ..Default::default()
        };
        run_loop(clock, rec.clone(), cfg, None).await;
        assert_eq!(rec.max_active.load(Ordering::SeqCst), 1);
        let checks = rec.fired().iter().filter(|f| f.0 == TaskKind::ReferenceCheck).count();
        assert!(checks < 7, "expected skipped instances, saw {checks}");
        assert!(checks >= 2);
    }
}
