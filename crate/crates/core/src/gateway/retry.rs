use std::thread;
use std::time::Duration;

use super::GatewayError;

/// Exponential backoff for transport failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, initial_backoff: Duration::from_millis(500), multiplier: 2.0 }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        self.initial_backoff.mul_f64(self.multiplier.powi(retry.saturating_sub(1) as i32))
    }

    /// Runs `op` until it succeeds, fails permanently (`Err(Err(_))`), or the
    /// retry budget is spent.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, Result<String, GatewayError>>) -> Result<T, GatewayError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(Err(fatal)) => return Err(fatal),
                Err(Ok(transient)) => {
                    if attempt > self.max_retries {
                        return Err(GatewayError::BackendUnavailable { attempts: attempt, reason: transient });
                    }
                    thread::sleep(self.backoff(attempt));
                }
            }
        }
    }
}
