//! Chat-completions client requesting a single output token with top-k
//! log-probabilities.

use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::Deserialize;
use serde_json::json;

use super::{CompletionProvider, GatewayError, ProviderConfig};
use crate::confidence::TokenLogProbs;
use crate::prompt::Prompt;

const BACKOFF_FACTOR: f64 = 2.0;

pub struct LiveProvider {
    cfg: ProviderConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl LiveProvider {
    /// Resolves the credential from `cfg.api_key_env`.
    pub fn new(cfg: ProviderConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&cfg.api_key_env)
            .map_err(|_| GatewayError::Auth(format!("environment variable {} is not set", cfg.api_key_env)))?;
        LiveProvider::with_key(cfg, api_key)
    }

    pub fn with_key(cfg: ProviderConfig, api_key: String) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(LiveProvider { cfg, api_key, agent })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.cfg
    }

    fn request_body(&self, prompt: &Prompt) -> serde_json::Value {
        json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": prompt.user_text},
            ],
            "max_tokens": 1,
            "temperature": self.cfg.temperature,
            "logprobs": true,
            "top_logprobs": self.cfg.top_k,
        })
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.cfg.initial_backoff_ms as f64 * BACKOFF_FACTOR.powi(attempt as i32);
        let jitter: f64 = rand::rng().random_range(0.5..=1.0);
        Duration::from_millis((base * jitter) as u64)
    }
}

enum Attempt {
    Done(Result<TokenLogProbs, GatewayError>),
    Retry(GatewayError),
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    content: Option<Vec<PositionLogprobs>>,
}

#[derive(Deserialize)]
struct PositionLogprobs {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

/// Extracts first-position alternatives (plus the sampled token) from a
/// chat-completions response body.
pub(crate) fn parse_response(body: &str) -> Result<TokenLogProbs, GatewayError> {
    let resp: CompletionResponse =
        serde_json::from_str(body).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
    let first = resp
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.logprobs)
        .and_then(|l| l.content)
        .and_then(|c| c.into_iter().next())
        .ok_or_else(|| GatewayError::MalformedResponse("response carries no token logprobs".into()))?;
    let mut entries = vec![(first.token, first.logprob)];
    entries.extend(first.top_logprobs.into_iter().map(|t| (t.token, t.logprob)));
    TokenLogProbs::new(entries).map_err(|e| GatewayError::MalformedResponse(e.to_string()))
}

impl LiveProvider {
    fn attempt(&self, body: &str, attempt_no: u32) -> Attempt {
        let sent = self
            .agent
            .post(&self.cfg.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(body);
        let mut resp = match sent {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry(GatewayError::Timeout {
                    attempts: attempt_no,
                    detail: e.to_string(),
                })
            }
        };
        let status = resp.status().as_u16();
        match status {
            200..=299 => match resp.body_mut().read_to_string() {
                Ok(text) => Attempt::Done(parse_response(&text)),
                Err(e) => Attempt::Retry(GatewayError::Timeout {
                    attempts: attempt_no,
                    detail: e.to_string(),
                }),
            },
            401 | 403 => Attempt::Done(Err(GatewayError::Auth(format!("HTTP {status}")))),
            408 => Attempt::Retry(GatewayError::Timeout {
                attempts: attempt_no,
                detail: "HTTP 408".into(),
            }),
            429 => Attempt::Retry(GatewayError::RateLimited { attempts: attempt_no }),
            500..=599 => Attempt::Retry(GatewayError::Server {
                status,
                attempts: attempt_no,
            }),
            _ => {
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                Attempt::Done(Err(GatewayError::MalformedResponse(format!("HTTP {status}: {text}"))))
            }
        }
    }
}

impl CompletionProvider for LiveProvider {
    fn complete(&self, _sample_id: &str, prompt: &Prompt) -> Result<TokenLogProbs, GatewayError> {
        let body = self.request_body(prompt).to_string();
        let attempts = self.cfg.max_retries + 1;
        let mut last = None;
        for n in 1..=attempts {
            match self.attempt(&body, n) {
                Attempt::Done(result) => return result,
                Attempt::Retry(err) => {
                    tracing::debug!(attempt = n, error = %err, "transient provider failure");
                    last = Some(err);
                    if n < attempts {
                        thread::sleep(self.backoff(n - 1));
                    }
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn describe(&self) -> serde_json::Value {
        json!({
            "kind": "live",
            "endpoint": self.cfg.endpoint,
            "model": self.cfg.model,
            "top_k": self.cfg.top_k,
            "temperature": self.cfg.temperature,
            "max_tokens": 1,
            "max_retries": self.cfg.max_retries,
            "timeout_secs": self.cfg.timeout_secs,
        })
    }
}
