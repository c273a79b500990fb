//! One request per sample, returning first-token top-k log-probabilities.
//!
//! [`Gateway`] wraps any [`CompletionProvider`] with an in-flight request cap
//! and a call counter, and turns completions into [`ClassificationResult`]s.

mod live;
mod mock;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{ClassificationResult, TokenLogProbs, DEFAULT_FLOOR};
use crate::domain::{CodeSample, LabelVocabulary};
use crate::prompt::{Prompt, PromptError, PromptStrategy};

pub use live::LiveProvider;
pub use mock::{parse_fixture, register_fixture, Fixture, FixtureError, MockProvider};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("request timed out after {attempts} attempts: {detail}")]
    Timeout { attempts: u32, detail: String },
    #[error("server error {status} after {attempts} attempts")]
    Server { status: u16, attempts: u32 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid provider configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClassifyError {
    #[error("sample {sample_id}: {source}")]
    Gateway {
        sample_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("sample {sample_id}: {source}")]
    Prompt {
        sample_id: String,
        #[source]
        source: PromptError,
    },
}

impl ClassifyError {
    pub fn sample_id(&self) -> &str {
        match self {
            ClassifyError::Gateway { sample_id, .. } | ClassifyError::Prompt { sample_id, .. } => sample_id,
        }
    }
}

fn default_top_k() -> u32 {
    20
}
fn default_timeout() -> f64 {
    30.0
}
fn default_retries() -> u32 {
    4
}
fn default_parallel() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    1000
}
fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}

/// Settings for the live chat-completions backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_top_k")]
    pub top_k: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    /// Retries after the first attempt.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    /// Name of the environment variable holding the API key.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            top_k: default_top_k(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_parallel: default_parallel(),
            api_key_env: default_key_env(),
            temperature: 0.0,
            initial_backoff_ms: default_backoff_ms(),
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.top_k < 2 {
            return Err(GatewayError::Config(format!("top_k must be >= 2, got {}", self.top_k)));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(GatewayError::Config(format!(
                "timeout must be > 0, got {}",
                self.timeout_secs
            )));
        }
        if self.max_parallel == 0 {
            return Err(GatewayError::Config("max_parallel must be >= 1".into()));
        }
        Ok(())
    }
}

/// A backend that answers one prompt with first-token top-k log-probs.
pub trait CompletionProvider: Send + Sync {
    fn complete(&self, sample_id: &str, prompt: &Prompt) -> Result<TokenLogProbs, GatewayError>;

    /// Request parameters recorded in run metadata.
    fn describe(&self) -> serde_json::Value;
}

/// Counting semaphore bounding in-flight requests.
struct Permits {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut n = self.available.lock();
        while *n == 0 {
            self.freed.wait(&mut n);
        }
        *n -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock() += 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    provider: Arc<dyn CompletionProvider>,
    permits: Permits,
    max_parallel: usize,
    calls: AtomicU64,
    vocab: LabelVocabulary,
    floor: f64,
}

impl Gateway {
    pub fn new(provider: Arc<dyn CompletionProvider>, max_parallel: usize) -> Self {
        let max_parallel = max_parallel.max(1);
        Gateway {
            provider,
            permits: Permits {
                available: Mutex::new(max_parallel),
                freed: Condvar::new(),
            },
            max_parallel,
            calls: AtomicU64::new(0),
            vocab: LabelVocabulary::default(),
            floor: DEFAULT_FLOOR,
        }
    }

    pub fn with_vocabulary(mut self, vocab: LabelVocabulary) -> Self {
        self.vocab = vocab;
        self
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        assert!(floor < 0.0, "floor must be negative");
        self.floor = floor;
        self
    }

    pub fn vocabulary(&self) -> &LabelVocabulary {
        &self.vocab
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn max_parallel(&self) -> usize {
        self.max_parallel
    }

    /// Completion requests issued through this gateway.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn provider(&self) -> &Arc<dyn CompletionProvider> {
        &self.provider
    }

    pub fn complete_with_logprobs(&self, sample_id: &str, prompt: &Prompt) -> Result<TokenLogProbs, GatewayError> {
        let _permit = self.permits.acquire();
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.provider.complete(sample_id, prompt)
    }

    pub fn classify_sample(
        &self,
        sample: &CodeSample,
        strategy: &PromptStrategy,
    ) -> Result<ClassificationResult, ClassifyError> {
        let prompt = strategy
            .build(sample, &self.vocab)
            .map_err(|source| ClassifyError::Prompt {
                sample_id: sample.id().to_string(),
                source,
            })?;
        let raw = self
            .complete_with_logprobs(sample.id(), &prompt)
            .map_err(|source| ClassifyError::Gateway {
                sample_id: sample.id().to_string(),
                source,
            })?;
        Ok(ClassificationResult::from_logprobs(
            sample.id(),
            strategy.tag(),
            strategy.context_cwe(),
            raw,
            &self.vocab,
            self.floor,
        ))
    }

    /// Classifies every item with up to `max_parallel` workers. Output order
    /// matches input order.
    pub fn classify_batch(
        &self,
        items: &[(CodeSample, PromptStrategy)],
    ) -> Vec<Result<ClassificationResult, ClassifyError>> {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<ClassificationResult, ClassifyError>>>> =
            items.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.max_parallel.min(items.len()).max(1);
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((sample, strategy)) = items.get(i) else { break };
                    *slots[i].lock() = Some(self.classify_sample(sample, strategy));
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("every slot filled"))
            .collect()
    }
}
