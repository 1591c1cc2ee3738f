//! Cached, rate-limited dispatch to registered LLM providers.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::{CacheKey, LlmRequest, LlmResponse, ResponseCache};
use crate::sync::Semaphore;

/// Errors a provider reports for a single dispatch.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    /// Network hiccup or 5xx; worth retrying.
    #[error("transient provider error: {0}")]
    Transient(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    /// Missing credentials, unreachable configuration and the like.
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("provider rejected the request: {0}")]
    Fatal(String),
}

pub trait LlmProvider: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("provider `{0}` is unavailable")]
    ProviderUnavailable(String),
    #[error("rate limit still hit after {attempts} attempts: {message}")]
    RateLimitExhausted { attempts: u32, message: String },
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("cache write failed: {0}")]
    Cache(String),
}

impl GatewayError {
    /// Whether a fresh stage attempt (with a new sampling seed) may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::RateLimitExhausted { .. } | GatewayError::Transport { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1` (1-based `attempt`):
    /// `base * 2^(attempt-1)`, capped at `max_delay`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32 << attempt.saturating_sub(1).min(16);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatewayStats {
    pub requests: u64,
    pub cache_hits: u64,
    pub provider_calls: u64,
}

/// Shared entry point for every LLM call in a batch.
pub struct Gateway {
    providers: HashMap<String, Arc<dyn LlmProvider>>,
    cache: Arc<ResponseCache>,
    limiter: Semaphore,
    retry: RetryPolicy,
    requests: AtomicU64,
    hits: AtomicU64,
    dispatches: AtomicU64,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut ids: Vec<_> = self.providers.keys().collect();
        ids.sort();
        f.debug_struct("Gateway")
            .field("providers", &ids)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(cache: Arc<ResponseCache>, max_concurrent: usize, retry: RetryPolicy) -> Self {
        Self {
            providers: HashMap::new(),
            cache,
            limiter: Semaphore::new(max_concurrent),
            retry,
            requests: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            dispatches: AtomicU64::new(0),
        }
    }

    pub fn with_provider(mut self, id: impl Into<String>, provider: Arc<dyn LlmProvider>) -> Self {
        self.providers.insert(id.into(), provider);
        self
    }

    pub fn register(&mut self, id: impl Into<String>, provider: Arc<dyn LlmProvider>) {
        self.providers.insert(id.into(), provider);
    }

    pub fn has_provider(&self, id: &str) -> bool {
        self.providers.contains_key(id)
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            requests: self.requests.load(Ordering::Relaxed),
            cache_hits: self.hits.load(Ordering::Relaxed),
            provider_calls: self.dispatches.load(Ordering::Relaxed),
        }
    }

    /// Returns the cached completion for `request` or dispatches it.
    ///
    /// On a miss the response is written to the cache before returning.
    /// Transient and rate-limit errors are retried with exponential backoff up
    /// to `max_attempts` dispatches.
    pub fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, GatewayError> {
        request.validate().map_err(GatewayError::InvalidRequest)?;
        self.requests.fetch_add(1, Ordering::Relaxed);
        let key = CacheKey::of(request);
        if let Some(text) = self.cache.get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(LlmResponse {
                text: text.to_string(),
                cached: true,
                latency_ms: 0,
                attempts: 0,
            });
        }
        let provider = self
            .providers
            .get(&request.provider)
            .ok_or_else(|| GatewayError::ProviderUnavailable(request.provider.clone()))?;

        let started = Instant::now();
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        let text = loop {
            attempt += 1;
            self.dispatches.fetch_add(1, Ordering::Relaxed);
            let outcome = {
                let _permit = self.limiter.acquire();
                provider.complete(request)
            };
            match outcome {
                Ok(text) => break text,
                Err(ProviderError::Unavailable(m)) => {
                    log::warn!("provider {} unavailable: {m}", request.provider);
                    return Err(GatewayError::ProviderUnavailable(request.provider.clone()));
                }
                Err(ProviderError::Fatal(m)) => return Err(GatewayError::Provider(m)),
                Err(err @ (ProviderError::Transient(_) | ProviderError::RateLimited(_))) => {
                    log::debug!(
                        "{} {} attempt {attempt}/{max} failed: {err}",
                        request.provider,
                        request.stage
                    );
                    if attempt >= max {
                        return Err(match err {
                            ProviderError::RateLimited(message) => {
                                GatewayError::RateLimitExhausted {
                                    attempts: attempt,
                                    message,
                                }
                            }
                            ProviderError::Transient(message) => GatewayError::Transport {
                                attempts: attempt,
                                message,
                            },
                            _ => unreachable!(),
                        });
                    }
                    std::thread::sleep(self.retry.backoff(attempt));
                }
            }
        };
        self.cache
            .put(&key, &text)
            .map_err(|e| GatewayError::Cache(e.to_string()))?;
        if attempt > 1 {
            log::info!(
                "{} {} succeeded after {attempt} attempts",
                request.provider,
                request.stage
            );
        }
        Ok(LlmResponse {
            text,
            cached: false,
            latency_ms: started.elapsed().as_millis() as u64,
            attempts: attempt,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{FnProvider, Stage};

    fn req(seed: u64) -> LlmRequest {
        LlmRequest {
            provider: "mock".into(),
            model: "m".into(),
            prompt: "hello".into(),
            temperature: 0.7,
            top_p: 1.0,
            seed,
            stage: Stage::Topic,
        }
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(4),
        }
    }

    fn gateway(p: FnProvider) -> (Gateway, Arc<FnProvider>) {
        let p = Arc::new(p);
        let gw = Gateway::new(Arc::new(ResponseCache::in_memory()), 4, fast_retry())
            .with_provider("mock", p.clone());
        (gw, p)
    }

    #[test]
    fn second_identical_request_is_a_cache_hit() {
        let (gw, p) = gateway(FnProvider::new(|r, _| Ok(format!("seed {}", r.seed))));
        let a = gw.complete(&req(1)).unwrap();
        let b = gw.complete(&req(1)).unwrap();
        assert!(!a.cached);
        assert!(b.cached);
        assert_eq!(a.text, b.text);
        assert_eq!(p.calls(), 1);
        assert_eq!(
            gw.stats(),
            GatewayStats {
                requests: 2,
                cache_hits: 1,
                provider_calls: 1
            }
        );
    }

    #[test]
    fn different_seeds_are_distinct_entries() {
        let (gw, p) = gateway(FnProvider::new(|r, _| Ok(format!("seed {}", r.seed))));
        assert_eq!(gw.complete(&req(1)).unwrap().text, "seed 1");
        assert_eq!(gw.complete(&req(2)).unwrap().text, "seed 2");
        assert_eq!(p.calls(), 2);
        assert_eq!(gw.cache().len(), 2);
    }

    #[test]
    fn transient_failures_are_retried() {
        let (gw, p) = gateway(FnProvider::new(|_, call| {
            if call < 2 {
                Err(ProviderError::Transient("connection reset".into()))
            } else {
                Ok("ok".into())
            }
        }));
        let r = gw.complete(&req(0)).unwrap();
        assert_eq!(r.text, "ok");
        assert_eq!(r.attempts, 3);
        assert_eq!(p.calls(), 3);
    }

    #[test]
    fn retries_are_bounded() {
        let (gw, p) = gateway(FnProvider::new(|_, _| {
            Err(ProviderError::Transient("down".into()))
        }));
        assert_eq!(
            gw.complete(&req(0)).unwrap_err(),
            GatewayError::Transport {
                attempts: 3,
                message: "down".into()
            }
        );
        assert_eq!(p.calls(), 3);
        let (gw, _) = gateway(FnProvider::new(|_, _| {
            Err(ProviderError::RateLimited("429".into()))
        }));
        assert!(matches!(
            gw.complete(&req(0)).unwrap_err(),
            GatewayError::RateLimitExhausted { attempts: 3, .. }
        ));
    }

    #[test]
    fn warm_cache_never_contacts_provider() {
        let cache = Arc::new(ResponseCache::in_memory());
        let warm = Gateway::new(cache.clone(), 1, fast_retry())
            .with_provider("mock", Arc::new(FnProvider::new(|_, _| Ok("x".into()))));
        for s in 0..10 {
            warm.complete(&req(s)).unwrap();
        }
        let failing = Arc::new(FnProvider::new(|_, _| {
            Err(ProviderError::Fatal("must not be called".into()))
        }));
        let cold = Gateway::new(cache, 1, fast_retry()).with_provider("mock", failing.clone());
        for s in 0..10 {
            assert!(cold.complete(&req(s)).unwrap().cached);
        }
        assert_eq!(failing.calls(), 0);
    }

    #[test]
    fn unknown_provider_and_invalid_requests() {
        let (gw, _) = gateway(FnProvider::new(|_, _| Ok("x".into())));
        let mut r = req(0);
        r.provider = "nope".into();
        assert_eq!(
            gw.complete(&r).unwrap_err(),
            GatewayError::ProviderUnavailable("nope".into())
        );
        let mut r = req(0);
        r.prompt.clear();
        assert!(matches!(
            gw.complete(&r).unwrap_err(),
            GatewayError::InvalidRequest(_)
        ));
        let mut r = req(0);
        r.top_p = 0.0;
        assert!(matches!(
            gw.complete(&r).unwrap_err(),
            GatewayError::InvalidRequest(_)
        ));
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(2), Duration::from_millis(200));
        assert_eq!(p.backoff(3), Duration::from_millis(350));
    }
}
