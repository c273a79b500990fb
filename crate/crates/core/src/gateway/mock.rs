use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Deserialize;
use thiserror::Error;

use super::{CompletionProvider, GatewayError};
use crate::confidence::TokenLogProbs;
use crate::prompt::Prompt;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureLine {
    sample_id: String,
    logprobs: Vec<(String, f64)>,
}

/// Canned first-token log-probs keyed by sample id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Fixture {
    entries: HashMap<String, TokenLogProbs>,
}

impl Fixture {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&TokenLogProbs> {
        self.entries.get(sample_id)
    }

    pub fn insert(&mut self, sample_id: impl Into<String>, logprobs: TokenLogProbs) {
        self.entries.insert(sample_id.into(), logprobs);
    }

    /// Serializes as JSON lines sorted by sample id.
    pub fn to_jsonl(&self) -> String {
        let mut ids: Vec<&String> = self.entries.keys().collect();
        ids.sort();
        let mut out = String::new();
        for id in ids {
            let line = serde_json::json!({ "sample_id": id, "logprobs": self.entries[id] });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

pub fn parse_fixture(text: &str) -> Result<Fixture, FixtureError> {
    let mut fixture = Fixture::default();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| FixtureError::Parse { line: line_no, message };
        let rec: FixtureLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.sample_id.is_empty() {
            return Err(err("empty sample_id".into()));
        }
        let logprobs = TokenLogProbs::new(rec.logprobs).map_err(|e| err(e.to_string()))?;
        if fixture.entries.contains_key(&rec.sample_id) {
            return Err(err(format!("duplicate sample_id {:?}", rec.sample_id)));
        }
        fixture.entries.insert(rec.sample_id, logprobs);
    }
    Ok(fixture)
}

pub fn register_fixture(path: impl AsRef<Path>) -> Result<Fixture, FixtureError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| FixtureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_fixture(&text)
}

/// Answers from a [`Fixture`]; never touches the network.
#[derive(Debug, Default)]
pub struct MockProvider {
    fixture: Fixture,
    calls: AtomicU64,
}

impl MockProvider {
    pub fn new(fixture: Fixture) -> Self {
        MockProvider {
            fixture,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl CompletionProvider for MockProvider {
    fn complete(&self, sample_id: &str, _prompt: &Prompt) -> Result<TokenLogProbs, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.fixture
            .get(sample_id)
            .cloned()
            .ok_or_else(|| GatewayError::MalformedResponse(format!("no fixture entry for sample {sample_id}")))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "mock", "entries": self.fixture.len() })
    }
}
