//! JSON-over-HTTP plumbing shared by the remote encoder and the remote scorer.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{BelxError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub retries: u32,
    pub base_delay_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay_ms: 100,
            timeout_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << attempt.min(16)))
    }
}

/// Runs `op` until it succeeds or the policy is exhausted, sleeping
/// `base_delay · 2^attempt` between tries.
pub fn with_retries<T>(policy: &RetryPolicy, mut op: impl FnMut() -> Result<T>) -> Result<T> {
    let attempts = policy.retries + 1;
    let mut last = String::new();
    for attempt in 0..attempts {
        match op() {
            Ok(v) => return Ok(v),
            Err(e) => {
                last = e.to_string();
                if attempt + 1 < attempts {
                    std::thread::sleep(policy.delay(attempt));
                }
            }
        }
    }
    Err(BelxError::Retryable {
        attempts,
        message: last,
    })
}

pub struct JsonClient {
    agent: ureq::Agent,
    base_url: String,
}

impl JsonClient {
    pub fn new(base_url: &str, timeout_ms: u64) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(true)
            .build();
        Self {
            agent: config.into(),
            base_url: base_url.trim_end_matches('/').to_string(),
        }
    }

    pub fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R> {
        let url = format!("{}{}", self.base_url, path);
        let mut resp = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| BelxError::Pipeline(format!("POST {url}: {e}")))?;
        resp.body_mut()
            .read_json::<R>()
            .map_err(|e| BelxError::Pipeline(format!("POST {url}: bad response body: {e}")))
    }
}

/// Applies `f` to every item with at most `limit` calls in flight. Results
/// come back in input order whatever the completion order.
pub fn bounded_map<I, O, F>(items: &[I], limit: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    let limit = limit.max(1).min(items.len().max(1));
    if limit == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<O>> = std::iter::repeat_with(|| None).take(items.len()).collect();
    let results: Vec<Vec<(usize, O)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..limit)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break;
                        }
                        done.push((i, f(&items[i])));
                    }
                    done
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    for (i, o) in results.into_iter().flatten() {
        slots[i] = Some(o);
    }
    slots.into_iter().map(|o| o.expect("every slot filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retries_then_succeeds() {
        let calls = Cell::new(0);
        let policy = RetryPolicy {
            retries: 3,
            base_delay_ms: 0,
            timeout_ms: 10,
        };
        let v = with_retries(&policy, || {
            calls.set(calls.get() + 1);
            if calls.get() < 3 {
                Err(BelxError::Pipeline("flaky".into()))
            } else {
                Ok(7)
            }
        })
        .unwrap();
        assert_eq!(v, 7);
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn gives_up_with_attempt_count() {
        let policy = RetryPolicy {
            retries: 2,
            base_delay_ms: 0,
            timeout_ms: 10,
        };
        let err = with_retries::<()>(&policy, || Err(BelxError::Pipeline("down".into()))).unwrap_err();
        assert!(matches!(err, BelxError::Retryable { attempts: 3, .. }));
    }

    #[test]
    fn bounded_map_keeps_order() {
        let items: Vec<u64> = (0..50).collect();
        let out = bounded_map(&items, 4, |&x| {
            std::thread::sleep(Duration::from_micros((50 - x) * 20));
            x * 2
        });
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
