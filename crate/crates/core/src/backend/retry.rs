use std::future::Future;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::BackendError;

/// Exponential backoff applied per request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    #[serde(with = "millis")]
    pub initial_backoff: Duration,
    #[serde(with = "millis")]
    pub max_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(20),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            ..Self::default()
        }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = self.multiplier.powi(retry.saturating_sub(1) as i32);
        let secs = self.initial_backoff.as_secs_f64() * factor;
        Duration::from_secs_f64(secs.min(self.max_backoff.as_secs_f64()))
    }
}

/// Outcome of one attempt as seen by [`run`].
#[derive(Debug)]
pub enum AttemptError {
    /// Worth retrying (429, 5xx, connection reset).
    Transient(String),
    TimedOut,
    Fatal(BackendError),
}

/// Runs `op` until it succeeds, fails fatally, or the retry cap is hit.
/// Returns the value together with the number of attempts made.
pub async fn run<T, F, Fut>(policy: &RetryPolicy, request_id: &str, mut op: F) -> Result<(T, u32), BackendError>
where
    F: FnMut(u32) -> Fut,
    Fut: Future<Output = Result<T, AttemptError>>,
{
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        let last = match op(attempt).await {
            Ok(v) => return Ok((v, attempt)),
            Err(AttemptError::Fatal(e)) => return Err(e),
            Err(e) => e,
        };
        if attempt > policy.max_retries {
            return Err(match last {
                AttemptError::TimedOut => BackendError::Timeout {
                    request_id: request_id.to_string(),
                    attempts: attempt,
                },
                AttemptError::Transient(msg) => BackendError::RetryExhausted {
                    request_id: request_id.to_string(),
                    attempts: attempt,
                    last: msg,
                },
                AttemptError::Fatal(e) => e,
            });
        }
        let delay = policy.backoff(attempt);
        tracing::debug!(request_id, attempt, ?delay, "retrying backend call");
        tokio::time::sleep(delay).await;
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU32, Ordering};

    use super::*;

    fn fast(max_retries: u32) -> RetryPolicy {
        RetryPolicy {
            max_retries,
            initial_backoff: Duration::from_millis(1),
            max_backoff: Duration::from_millis(2),
            multiplier: 2.0,
        }
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            initial_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_millis(350),
            multiplier: 2.0,
        };
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(2), Duration::from_millis(200));
        assert_eq!(p.backoff(3), Duration::from_millis(350));
    }

    #[tokio::test]
    async fn succeeds_after_transient_failures() {
        let calls = AtomicU32::new(0);
        let (v, attempts) = run(&fast(3), "r1", |_| async {
            if calls.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(AttemptError::Transient("429".into()))
            } else {
                Ok(7)
            }
        })
        .await
        .unwrap();
        assert_eq!((v, attempts), (7, 3));
    }

    #[tokio::test]
    async fn exhaustion_names_request() {
        let err = run(&fast(2), "req-42", |_| async { Err::<(), _>(AttemptError::Transient("503".into())) })
            .await
            .unwrap_err();
        match err {
            BackendError::RetryExhausted { request_id, attempts, .. } => {
                assert_eq!(request_id, "req-42");
                assert_eq!(attempts, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[tokio::test]
    async fn fatal_errors_are_not_retried() {
        let calls = AtomicU32::new(0);
        let err = run(&fast(5), "r", |_| async {
            calls.fetch_add(1, Ordering::SeqCst);
            Err::<(), _>(AttemptError::Fatal(BackendError::Status {
                request_id: "r".into(),
                status: 400,
                body: String::new(),
            }))
        })
        .await
        .unwrap_err();
        assert!(matches!(err, BackendError::Status { status: 400, .. }));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[tokio::test]
    async fn repeated_timeouts_surface_as_timeout() {
        let err = run(&fast(1), "t", |_| async { Err::<(), _>(AttemptError::TimedOut) })
            .await
            .unwrap_err();
        assert!(matches!(err, BackendError::Timeout { attempts: 2, .. }));
    }
}
