use std::future::Future;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendErrorKind};

/// Exponential backoff with symmetric jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub jitter_fraction: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_backoff_ms: 500,
            jitter_fraction: 0.2,
        }
    }
}

impl RetryPolicy {
    /// Delay after the `attempt`-th failure (1-based), before jitter: base·2^(attempt−1).
    pub fn nominal_backoff(&self, attempt: u32) -> Duration {
        let shift = attempt.saturating_sub(1).min(30);
        Duration::from_millis(self.base_backoff_ms.saturating_mul(1u64 << shift))
    }

    /// `unit` in [-1, 1] picks the point inside the jitter band.
    pub fn jittered_backoff(&self, attempt: u32, unit: f64) -> Duration {
        let nominal = self.nominal_backoff(attempt).as_secs_f64();
        let factor = 1.0 + self.jitter_fraction.clamp(0.0, 1.0) * unit.clamp(-1.0, 1.0);
        Duration::from_secs_f64((nominal * factor).max(0.0))
    }

    pub fn sample_backoff(&self, attempt: u32) -> Duration {
        let unit = rand::rng().random_range(-1.0..=1.0);
        self.jittered_backoff(attempt, unit)
    }
}

/// Runs `op` until it succeeds, fails permanently, or `max_attempts` is reached.
pub async fn retry_with_policy<T, F, Fut>(
    policy: &RetryPolicy,
    backend_id: &str,
    mut op: F,
) -> Result<T, BackendError>
where
    F: FnMut(u32) -> Fut,
    Fut: Future<Output = Result<T, BackendErrorKind>>,
{
    let max = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match op(attempt).await {
            Ok(v) => return Ok(v),
            Err(kind) if kind.is_retryable() && attempt < max => {
                let delay = policy.sample_backoff(attempt);
                tracing::debug!(
                    backend = backend_id,
                    attempt,
                    delay_ms = delay.as_millis() as u64,
                    error = %kind,
                    "retrying"
                );
                tokio::time::sleep(delay).await;
                attempt += 1;
            }
            Err(kind) => return Err(BackendError::new(backend_id, attempt, kind)),
        }
    }
}
