//! Jittered exponential backoff with an injectable sleep.

use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

#[derive(Clone)]
pub struct Backoff {
    pub base: Duration,
    pub factor: f64,
    pub cap: Duration,
    pub max_attempts: u32,
    sleeper: Sleeper,
    rng: Arc<Mutex<ChaCha8Rng>>,
}

impl std::fmt::Debug for Backoff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backoff")
            .field("base", &self.base)
            .field("factor", &self.factor)
            .field("cap", &self.cap)
            .field("max_attempts", &self.max_attempts)
            .finish()
    }
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            base: Duration::from_secs(1),
            factor: 2.0,
            cap: Duration::from_secs(60),
            max_attempts: 8,
            sleeper: Arc::new(std::thread::sleep),
            rng: Arc::new(Mutex::new(ChaCha8Rng::from_entropy())),
        }
    }
}

impl Backoff {
    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed)));
        self
    }

    /// Upper bound of the delay before retry number `attempt` (0-based).
    pub fn ceiling(&self, attempt: u32) -> Duration {
        let secs = self.base.as_secs_f64() * self.factor.powi(attempt.min(63) as i32);
        Duration::from_secs_f64(secs.min(self.cap.as_secs_f64()))
    }

    /// Delay drawn uniformly from [ceiling/2, ceiling], at least `floor`.
    pub fn delay(&self, attempt: u32, floor: Option<Duration>) -> Duration {
        let c = self.ceiling(attempt).as_secs_f64();
        let jittered = Duration::from_secs_f64(self.rng.lock().gen_range(c / 2.0..=c));
        floor.map_or(jittered, |f| jittered.max(f.min(self.cap)))
    }

    pub fn sleep(&self, d: Duration) {
        (self.sleeper)(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubles_then_caps() {
        let b = Backoff::default();
        let c: Vec<u64> = (0..9).map(|i| b.ceiling(i).as_secs()).collect();
        assert_eq!(c, vec![1, 2, 4, 8, 16, 32, 60, 60, 60]);
    }

    #[test]
    fn jitter_within_bounds() {
        let b = Backoff::default().with_seed(3);
        for attempt in 0..10 {
            let d = b.delay(attempt, None);
            assert!(d <= b.ceiling(attempt) && d >= b.ceiling(attempt) / 2);
        }
        assert!(b.delay(0, Some(Duration::from_secs(5))) >= Duration::from_secs(5));
    }
}
