use std::sync::Arc;
use std::time::{Duration, Instant};

use exbank_core::prompt::{estimate_tokens, PromptBundle};

use crate::cache::{cache_key, GenerationCache, GenerationRecord};
use crate::config::ModelConfig;
use crate::provider::{ChatProvider, ChatRequest};
use crate::GatewayError;

/// Exponential backoff without jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base: Duration::from_secs(1), factor: 2.0 }
    }
}

impl RetryPolicy {
    /// Delay after failed attempt number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base.mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Sends prompt bundles to a provider through the cache.
#[derive(Clone)]
pub struct Gateway {
    provider: Arc<dyn ChatProvider>,
    cache: Arc<GenerationCache>,
    retry: RetryPolicy,
    sleeper: Sleeper,
    estimator: fn(&str) -> usize,
}

impl Gateway {
    pub fn new(provider: Arc<dyn ChatProvider>, cache: Arc<GenerationCache>) -> Self {
        Self {
            provider,
            cache,
            retry: RetryPolicy::default(),
            sleeper: Arc::new(std::thread::sleep),
            estimator: estimate_tokens,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_estimator(mut self, estimator: fn(&str) -> usize) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn estimator(&self) -> fn(&str) -> usize {
        self.estimator
    }

    pub fn cache(&self) -> &GenerationCache {
        &self.cache
    }

    pub fn provider(&self) -> &dyn ChatProvider {
        self.provider.as_ref()
    }

    /// Returns the cached generation for `bundle` or requests a new one.
    pub fn generate(&self, bundle: &PromptBundle, cfg: &ModelConfig) -> Result<Arc<GenerationRecord>, GatewayError> {
        let prompt_tokens = (self.estimator)(&bundle.prompt);
        if prompt_tokens > cfg.context_budget {
            return Err(GatewayError::ContextOverflow { prompt_tokens, budget: cfg.context_budget });
        }
        let key = cache_key(&cfg.model, &bundle.prompt, cfg.temperature, cfg.max_output_tokens);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }

        let request = ChatRequest {
            cell_id: exbank_core::report::cell_id(&bundle.article_id, bundle.condition, &cfg.id),
            model: cfg.model.clone(),
            prompt: bundle.prompt.clone(),
            temperature: cfg.temperature,
            max_tokens: cfg.max_output_tokens,
        };
        let mut attempt = 0;
        loop {
            attempt += 1;
            let started = Instant::now();
            match self.provider.complete(&request) {
                Ok(response) => {
                    let record = GenerationRecord {
                        cache_key: key,
                        model: cfg.model.clone(),
                        text: response.text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        request_id: response.request_id,
                        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                        retries: attempt - 1,
                    };
                    return self.cache.insert(record);
                }
                Err(e) if e.is_transient() && attempt < self.retry.max_attempts => {
                    let delay = self.retry.delay(attempt);
                    log::warn!("{}: attempt {attempt} failed ({e}); retrying in {delay:?}", request.cell_id);
                    (self.sleeper)(delay);
                }
                Err(e) => {
                    return Err(GatewayError::PermanentFailure {
                        status: e.status(),
                        attempts: attempt,
                        message: e.to_string(),
                    })
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{ChatResponse, MockProvider, ProviderError};
    use exbank_core::prompt::PromptCondition;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn bundle(prompt: &str) -> PromptBundle {
        PromptBundle {
            condition: PromptCondition::B0,
            model_id: "mixtral-8x22b".into(),
            article_id: "a".into(),
            language: "fa".into(),
            prompt: prompt.into(),
            injected_ids: vec![],
            dropped_ids: vec![],
            template_hash: "h".into(),
        }
    }

    struct Flaky {
        failures: Vec<u16>,
        calls: AtomicUsize,
    }

    impl ChatProvider for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }

        fn complete(&self, _: &ChatRequest) -> Result<ChatResponse, ProviderError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            match self.failures.get(n) {
                Some(code) => Err(ProviderError::Status { code: *code, body: "busy".into() }),
                None => Ok(ChatResponse { text: "ok".into(), request_id: None }),
            }
        }
    }

    fn recording_sleeper() -> (Sleeper, Arc<Mutex<Vec<Duration>>>) {
        let log = Arc::new(Mutex::new(Vec::new()));
        let sink = log.clone();
        (Arc::new(move |d| sink.lock().unwrap().push(d)), log)
    }

    #[test]
    fn cache_hit_skips_provider() {
        let mock = Arc::new(MockProvider::new(vec!["low".into()]));
        let gw = Gateway::new(mock.clone(), Arc::new(GenerationCache::in_memory()));
        let cfg = ModelConfig::mixtral_8x22b();
        let first = gw.generate(&bundle("p"), &cfg).unwrap();
        let second = gw.generate(&bundle("p"), &cfg).unwrap();
        assert_eq!(mock.calls(), 1);
        assert_eq!(first, second);
        let mut hotter = cfg.clone();
        hotter.temperature = 0.7;
        gw.generate(&bundle("p"), &hotter).unwrap();
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn backoff_schedule_then_success() {
        let flaky = Arc::new(Flaky { failures: vec![429, 503, 500], calls: AtomicUsize::new(0) });
        let (sleeper, slept) = recording_sleeper();
        let gw = Gateway::new(flaky.clone(), Arc::new(GenerationCache::in_memory())).with_sleeper(sleeper);
        let r = gw.generate(&bundle("p"), &ModelConfig::mixtral_8x22b()).unwrap();
        assert_eq!(r.retries, 3);
        assert_eq!(*slept.lock().unwrap(), [1, 2, 4].map(Duration::from_secs));
    }

    #[test]
    fn gives_up_after_five_attempts() {
        let flaky = Arc::new(Flaky { failures: vec![503; 10], calls: AtomicUsize::new(0) });
        let (sleeper, slept) = recording_sleeper();
        let gw = Gateway::new(flaky.clone(), Arc::new(GenerationCache::in_memory())).with_sleeper(sleeper);
        let err = gw.generate(&bundle("p"), &ModelConfig::mixtral_8x22b()).unwrap_err();
        assert!(matches!(err, GatewayError::PermanentFailure { status: Some(503), attempts: 5, .. }));
        assert_eq!(slept.lock().unwrap().len(), 4);
        assert!(gw.cache().is_empty());
    }

    #[test]
    fn client_errors_are_not_retried() {
        let flaky = Arc::new(Flaky { failures: vec![400], calls: AtomicUsize::new(0) });
        let (sleeper, slept) = recording_sleeper();
        let gw = Gateway::new(flaky.clone(), Arc::new(GenerationCache::in_memory())).with_sleeper(sleeper);
        let err = gw.generate(&bundle("p"), &ModelConfig::mixtral_8x22b()).unwrap_err();
        assert!(matches!(err, GatewayError::PermanentFailure { status: Some(400), attempts: 1, .. }));
        assert!(slept.lock().unwrap().is_empty());
    }

    #[test]
    fn overflow_checked_before_any_call() {
        let mock = Arc::new(MockProvider::new(vec![]));
        let gw = Gateway::new(mock.clone(), Arc::new(GenerationCache::in_memory()));
        let cfg = ModelConfig::mixtral_8x22b();
        let long = "x".repeat(65_500 * 4 + 1);
        assert_eq!(
            gw.generate(&bundle(&long), &cfg).unwrap_err(),
            GatewayError::ContextOverflow { prompt_tokens: 65_501, budget: 65_500 }
        );
        assert_eq!(mock.calls(), 0);
        assert!(gw.generate(&bundle(&long), &ModelConfig::llama4_maverick()).is_ok());
    }
}
