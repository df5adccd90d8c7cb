//! Time sources. The simulator and tests drive a [`ManualClock`]; the
//! service uses [`SystemClock`].

use std::sync::Arc;

use chrono::Utc;
use parking_lot::Mutex;

use crate::model::{truncate_millis, Timestamp};

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        truncate_millis(Utc::now())
    }
}

/// Virtual clock advanced explicitly.
#[derive(Debug, Clone)]
pub struct ManualClock {
    now: Arc<Mutex<Timestamp>>,
}

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        ManualClock {
            now: Arc::new(Mutex::new(truncate_millis(start))),
        }
    }

    pub fn set(&self, t: Timestamp) {
        *self.now.lock() = truncate_millis(t);
    }

    pub fn advance(&self, by: chrono::Duration) {
        let mut now = self.now.lock();
        *now += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        *self.now.lock()
    }
}

/// Virtual time running `speed` times faster than the wall clock from a
/// chosen origin.
#[derive(Debug, Clone)]
pub struct ScaledClock {
    origin: Timestamp,
    started: std::time::Instant,
    speed: f64,
}

impl ScaledClock {
    pub fn new(origin: Timestamp, speed: f64) -> Self {
        assert!(speed > 0.0 && speed.is_finite(), "speed must be positive");
        ScaledClock {
            origin,
            started: std::time::Instant::now(),
            speed,
        }
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    /// Wall time until virtual time reaches `t`; zero if already past.
    pub fn wall_until(&self, t: Timestamp) -> std::time::Duration {
        let ahead = (t - self.now()).num_milliseconds();
        if ahead <= 0 {
            return std::time::Duration::ZERO;
        }
        std::time::Duration::from_secs_f64(ahead as f64 / 1000.0 / self.speed)
    }
}

impl Clock for ScaledClock {
    fn now(&self) -> Timestamp {
        let virt = self.started.elapsed().as_secs_f64() * self.speed;
        truncate_millis(self.origin + chrono::Duration::milliseconds((virt * 1000.0) as i64))
    }
}

pub type SharedClock = Arc<dyn Clock>;
