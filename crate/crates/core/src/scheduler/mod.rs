//! Task fire times, downloader phases and the recurring task loop.
//!
//! All times derive from the latest known [`ConsensusTimings`]. The next
//! period is extrapolated from the current one (same length, same delays)
//! until its consensus is actually seen.

mod clock;
mod run;

use serde::Serialize;

pub use clock::{Clock, ManualClock, ScaledClock, SystemClock};
pub use run::{run_loop, CompletionRecord, LoopConfig, TaskKind, TaskRunner};

use crate::docmodel::{ConsensusTimings, ModelError, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Phase {
    /// Directory cache mode: fetch from authorities only.
    Alpha,
    /// Client mode: prefer caches and peers.
    Beta,
}

/// One concrete occurrence of a phase. `start` is `None` for the alpha
/// phase that precedes the first known consensus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct PhaseInstance {
    pub phase: Phase,
    pub start: Option<Timestamp>,
}

impl PhaseInstance {
    pub const BOOTSTRAP: PhaseInstance = PhaseInstance { phase: Phase::Alpha, start: None };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSchedule {
    pub timings: ConsensusTimings,
    pub t0: Option<Timestamp>,
    pub task1_at: Timestamp,
    pub task2_at: Timestamp,
    pub task3_at: Option<Timestamp>,
    pub alpha_start: Timestamp,
    pub beta_start: Timestamp,
    pub beta_end: Timestamp,
}

impl TaskSchedule {
    pub fn with_start(mut self, t0: Timestamp) -> Self {
        self.t0 = Some(t0);
        self
    }

    /// Greedy discovery fires at `t0` and then every `cadence` seconds.
    pub fn with_greedy(mut self, cadence: i64, now: Timestamp) -> Self {
        let t0 = self.t0.unwrap_or(now);
        self.task3_at = Some(next_occurrence(t0, cadence, now - 1));
        self
    }

    pub fn period(&self) -> i64 {
        self.timings.period()
    }
}

/// Smallest `anchor + k * period` strictly after `after`.
pub(crate) fn next_occurrence(anchor: Timestamp, period: i64, after: Timestamp) -> Timestamp {
    let k = (after - anchor).div_euclid(period) + 1;
    anchor + k * period
}

/// Largest `anchor + k * period` at or before `t`.
pub(crate) fn last_occurrence(anchor: Timestamp, period: i64, t: Timestamp) -> Timestamp {
    anchor + (t - anchor).div_euclid(period) * period
}

pub fn compute_schedule(timings: &ConsensusTimings) -> Result<TaskSchedule, ModelError> {
    timings.validate()?;
    let fu = timings.fresh_until;
    let (vote, dist) = (timings.vote_seconds, timings.dist_seconds);
    let period = timings.period();
    if dist < 2 {
        return Err(ModelError::InvalidTimings("dist delay too short to precede fresh-until"));
    }
    if dist + vote / 2 >= period - period / 2 {
        return Err(ModelError::InvalidTimings("voting delays leave no room for phase beta"));
    }
    let task1_at = fu - dist - vote / 2;
    let task2_at = fu - dist / 2;
    let next = timings.successor();
    let beta_start = next.valid_after + period / 2;
    Ok(TaskSchedule {
        timings: *timings,
        t0: None,
        task1_at,
        task2_at,
        task3_at: None,
        alpha_start: task1_at,
        beta_start,
        beta_end: task1_at + period,
    })
}

/// Phase at `t`, extending the schedule periodically in both directions.
pub fn phase_at(t: Timestamp, timings: Option<&ConsensusTimings>) -> Phase {
    phase_instance(t, timings).phase
}

pub fn phase_instance(t: Timestamp, timings: Option<&ConsensusTimings>) -> PhaseInstance {
    let Some(s) = timings.and_then(|t| compute_schedule(t).ok()) else {
        return PhaseInstance::BOOTSTRAP;
    };
    let period = s.period();
    let alpha = last_occurrence(s.alpha_start, period, t);
    let beta = alpha + (s.beta_start - s.alpha_start);
    if t < beta {
        PhaseInstance { phase: Phase::Alpha, start: Some(alpha) }
    } else {
        PhaseInstance { phase: Phase::Beta, start: Some(beta) }
    }
}

/// First phase boundary strictly after `t`.
pub fn next_phase_boundary(t: Timestamp, timings: &ConsensusTimings) -> Option<Timestamp> {
    let s = compute_schedule(timings).ok()?;
    let period = s.period();
    let a = next_occurrence(s.alpha_start, period, t);
    let b = next_occurrence(s.beta_start, period, t);
    Some(a.min(b))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ts(s: &str) -> Timestamp {
        Timestamp::parse(s).unwrap()
    }

    fn appendix_timings() -> ConsensusTimings {
        ConsensusTimings::new(ts("2018-11-15 19:00:00"), ts("2018-11-15 20:00:00"), ts("2018-11-15 22:00:00"), 300, 300)
            .unwrap()
    }

    #[test]
    fn appendix_schedule() {
        let s = compute_schedule(&appendix_timings()).unwrap();
        assert_eq!(s.task1_at, ts("2018-11-15 19:52:30"));
        assert_eq!(s.task2_at, ts("2018-11-15 19:57:30"));
        assert_eq!(s.beta_start, ts("2018-11-15 20:30:00"));
        assert_eq!(s.beta_end, ts("2018-11-15 20:52:30"));
        assert_eq!(s.task3_at, None);
    }

    #[test]
    fn appendix_phases() {
        let t = appendix_timings();
        assert_eq!(phase_at(ts("2018-11-15 19:55:00"), Some(&t)), Phase::Alpha);
        assert_eq!(phase_at(ts("2018-11-15 20:40:00"), Some(&t)), Phase::Beta);
        assert_eq!(phase_at(ts("2018-11-15 20:52:30"), Some(&t)), Phase::Alpha);
        assert_eq!(phase_at(ts("2018-11-15 20:29:59"), Some(&t)), Phase::Alpha);
        assert_eq!(phase_at(ts("2018-11-15 20:40:00"), None), Phase::Alpha);
    }

    #[test]
    fn zero_dist_rejected() {
        let t = ConsensusTimings {
            valid_after: ts("2018-11-15 19:00:00"),
            fresh_until: ts("2018-11-15 20:00:00"),
            valid_until: ts("2018-11-15 22:00:00"),
            vote_seconds: 300,
            dist_seconds: 0,
        };
        assert!(matches!(compute_schedule(&t), Err(ModelError::InvalidTimings(_))));
    }

    #[test]
    fn oversized_delays_rejected() {
        let t = ConsensusTimings {
            valid_after: ts("2018-11-15 19:00:00"),
            fresh_until: ts("2018-11-15 19:01:00"),
            valid_until: ts("2018-11-15 19:03:00"),
            vote_seconds: 20,
            dist_seconds: 25,
        };
        assert!(compute_schedule(&t).is_err());
    }

    #[test]
    fn boundaries() {
        let t = appendix_timings();
        assert_eq!(next_phase_boundary(ts("2018-11-15 19:55:00"), &t), Some(ts("2018-11-15 20:30:00")));
        assert_eq!(next_phase_boundary(ts("2018-11-15 20:30:00"), &t), Some(ts("2018-11-15 20:52:30")));
        let a = phase_instance(ts("2018-11-15 19:55:00"), Some(&t));
        let b = phase_instance(ts("2018-11-15 20:10:00"), Some(&t));
        assert_eq!(a, b);
        assert_eq!(a.start, Some(ts("2018-11-15 19:52:30")));
    }

    fn valid_timings() -> impl Strategy<Value = ConsensusTimings> {
        (0i64..2_000_000_000, 60i64..7200, 1i64..3600, 1i64..3600)
            .prop_filter_map("valid", |(va, period, vote, dist)| {
                let va = Timestamp::from_unix(va);
                let t = ConsensusTimings::new(va, va + period, va + 3 * period, vote, dist).ok()?;
                compute_schedule(&t).ok().map(|_| t)
            })
    }

    proptest! {
        #[test]
        fn formulas_hold(t in valid_timings()) {
            let s = compute_schedule(&t).unwrap();
            prop_assert_eq!(s.task1_at, t.fresh_until - t.dist_seconds - t.vote_seconds / 2);
            prop_assert_eq!(s.task2_at, t.fresh_until - t.dist_seconds / 2);
            prop_assert!(s.task1_at < s.task2_at && s.task2_at < t.fresh_until);
            prop_assert!(s.alpha_start < s.beta_start && s.beta_start < s.beta_end);
        }

        #[test]
        fn phases_are_periodic(t in valid_timings(), off in -100_000i64..100_000, k in -5i64..5) {
            let at = t.valid_after + off;
            let p = t.period();
            prop_assert_eq!(phase_at(at, Some(&t)), phase_at(at + k * p, Some(&t)));
            prop_assert_eq!(phase_at(at, Some(&t)), phase_at(at, Some(&t.shifted(k))));
        }

        #[test]
        fn instance_contains_t(t in valid_timings(), off in -100_000i64..100_000) {
            let at = t.valid_after + off;
            let inst = phase_instance(at, Some(&t));
            let start = inst.start.unwrap();
            prop_assert!(start <= at);
            prop_assert!(next_phase_boundary(at, &t).unwrap() > at);
            prop_assert!(at - start < t.period());
        }
    }
}
