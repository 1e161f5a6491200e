use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{duration_ms, AttemptError, BackendError, DEFAULT_MAX_ATTEMPTS};

/// Exponential backoff with full jitter.
///
/// After the `n`-th consecutive failure (1-based) the delay is drawn uniformly
/// from `[0, min(max_delay, base_delay * 2^(n-1))]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_base_delay_ms")]
    pub base_delay_ms: u64,
    #[serde(default = "default_max_delay_ms")]
    pub max_delay_ms: u64,
}

fn default_max_attempts() -> u32 {
    DEFAULT_MAX_ATTEMPTS
}
fn default_base_delay_ms() -> u64 {
    1_000
}
fn default_max_delay_ms() -> u64 {
    60_000
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: default_max_attempts(),
            base_delay_ms: default_base_delay_ms(),
            max_delay_ms: default_max_delay_ms(),
        }
    }
}

impl RetryPolicy {
    /// Upper bound of the jittered delay after `failures` consecutive failures.
    pub fn ceiling(&self, failures: u32) -> Duration {
        if failures == 0 {
            return Duration::ZERO;
        }
        let shift = (failures - 1).min(63);
        let scaled = self.base_delay_ms.saturating_mul(1u64 << shift);
        duration_ms(scaled.min(self.max_delay_ms))
    }

    pub fn delay<R: Rng + ?Sized>(&self, failures: u32, rng: &mut R) -> Duration {
        let cap = self.ceiling(failures).as_millis() as u64;
        if cap == 0 {
            return Duration::ZERO;
        }
        duration_ms(rng.gen_range(0..=cap))
    }

    pub(crate) fn run<T>(
        &self,
        sleeper: &dyn Sleeper,
        mut attempt: impl FnMut() -> Result<T, AttemptError>,
    ) -> Result<(T, u32), BackendError> {
        let max = self.max_attempts.max(1);
        let mut rng = rand::thread_rng();
        let mut last = String::new();
        for n in 1..=max {
            match attempt() {
                Ok(v) => return Ok((v, n)),
                Err(AttemptError::Permanent(msg)) => {
                    return Err(BackendError::PermanentBackendError(msg))
                }
                Err(AttemptError::Transient(msg)) => {
                    log::debug!("attempt {n}/{max} failed: {msg}");
                    last = msg;
                    if n < max {
                        sleeper.sleep(self.delay(n, &mut rng));
                    }
                }
            }
        }
        Err(BackendError::RetriesExhausted {
            attempts: max,
            last,
        })
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        if !d.is_zero() {
            std::thread::sleep(d);
        }
    }
}
