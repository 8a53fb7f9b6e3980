use std::sync::Mutex;
use std::time::{Duration, Instant};

use async_trait::async_trait;

use crate::docmodel::Timestamp;

/// Source of the current time. Every component that needs "now" takes one
/// of these, so tests can drive the whole system on simulated time.
#[async_trait]
pub trait Clock: Send + Sync + 'static {
    fn now(&self) -> Timestamp;

    async fn sleep_until(&self, t: Timestamp);

    /// A virtual clock only moves when someone sleeps on it. The run loop
    /// then waits for jobs to finish before letting time advance.
    fn is_virtual(&self) -> bool {
        false
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

#[async_trait]
impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::now()
    }

    async fn sleep_until(&self, t: Timestamp) {
        let secs = t - self.now();
        if secs > 0 {
            tokio::time::sleep(Duration::from_secs(secs as u64)).await;
        }
    }
}

/// Wall time sped up by a constant factor from a chosen origin.
#[derive(Debug, Clone)]
pub struct ScaledClock {
    origin_real: Instant,
    origin: Timestamp,
    factor: f64,
}

impl ScaledClock {
    pub fn new(origin: Timestamp, factor: f64) -> Self {
        assert!(factor > 0.0, "clock factor must be positive");
        ScaledClock { origin_real: Instant::now(), origin, factor }
    }
}

#[async_trait]
impl Clock for ScaledClock {
    fn now(&self) -> Timestamp {
        let elapsed = self.origin_real.elapsed().as_secs_f64() * self.factor;
        self.origin + elapsed.floor() as i64
    }

    async fn sleep_until(&self, t: Timestamp) {
        let target_real = (t - self.origin) as f64 / self.factor;
        let elapsed = self.origin_real.elapsed().as_secs_f64();
        if target_real > elapsed {
            tokio::time::sleep(Duration::from_secs_f64(target_real - elapsed)).await;
        }
        // floor() in now() may still lag by rounding
        while self.now() < t {
            tokio::time::sleep(Duration::from_millis(1)).await;
        }
    }
}

/// Virtual time that advances instantly to whatever a sleeper asks for.
#[derive(Debug)]
pub struct ManualClock {
    now: Mutex<Timestamp>,
}

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        ManualClock { now: Mutex::new(start) }
    }

    pub fn set(&self, t: Timestamp) {
        *self.now.lock().unwrap() = t;
    }

    pub fn advance(&self, secs: i64) {
        let mut now = self.now.lock().unwrap();
        *now = *now + secs;
    }
}

#[async_trait]
impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        *self.now.lock().unwrap()
    }

    async fn sleep_until(&self, t: Timestamp) {
        let mut now = self.now.lock().unwrap();
        if *now < t {
            *now = t;
        }
    }

    fn is_virtual(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn manual_clock_jumps() {
        let c = ManualClock::new(Timestamp::from_unix(100));
        c.sleep_until(Timestamp::from_unix(160)).await;
        assert_eq!(c.now().unix(), 160);
        c.sleep_until(Timestamp::from_unix(10)).await;
        assert_eq!(c.now().unix(), 160);
        c.advance(5);
        assert_eq!(c.now().unix(), 165);
    }

    #[tokio::test]
    async fn scaled_clock_runs_fast() {
        let c = ScaledClock::new(Timestamp::from_unix(1000), 1000.0);
        c.sleep_until(Timestamp::from_unix(1030)).await;
        assert!(c.now().unix() >= 1030);
    }
}
