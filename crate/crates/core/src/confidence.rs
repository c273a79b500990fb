//! Label scoring from first-token log-probabilities and the top-two gap
//! confidence score.
//!
//! Scores are read off the model's top-k alternatives for the first answer
//! token: each label takes the best log-prob among the tokens that normalize
//! to one of its surface forms. A label that never shows up gets the floor,
//! which bounds the confidence at `|floor|`.

use serde::{Deserialize, Serialize};

use crate::domain::{normalize_surface_form, CweId, Label, LabelVocabulary};
use crate::prompt::StrategyTag;

pub const DEFAULT_FLOOR: f64 = -100.0;

/// Top-k `(token, logprob)` pairs for the first generated position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenLogProbs(Vec<(String, f64)>);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LogProbError {
    #[error("token log-prob list is empty")]
    Empty,
    #[error("log-prob for token {token:?} is {value}, expected a finite value <= 0")]
    OutOfRange { token: String, value: f64 },
}

impl TokenLogProbs {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self, LogProbError> {
        if entries.is_empty() {
            return Err(LogProbError::Empty);
        }
        if let Some((token, value)) = entries.iter().find(|(_, lp)| !(lp.is_finite() && *lp <= 0.0)) {
            return Err(LogProbError::OutOfRange {
                token: token.clone(),
                value: *value,
            });
        }
        Ok(TokenLogProbs(entries))
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.0
    }
}

/// Aggregated log-prob score per label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub vulnerable: f64,
    pub benign: f64,
}

impl LabelScores {
    pub fn new(vulnerable: f64, benign: f64) -> Self {
        LabelScores { vulnerable, benign }
    }

    pub fn get(&self, label: Label) -> f64 {
        match label {
            Label::Vulnerable => self.vulnerable,
            Label::Benign => self.benign,
        }
    }

    pub fn shifted(&self, c: f64) -> Self {
        LabelScores::new(self.vulnerable + c, self.benign + c)
    }
}

/// Per label: best log-prob among tokens normalizing into that label's
/// surface forms, or `floor` when none matched. Matches below the floor are
/// raised to it so the confidence never exceeds `|floor|`.
pub fn score_labels(raw: &TokenLogProbs, vocab: &LabelVocabulary, floor: f64) -> LabelScores {
    let mut scores = LabelScores::new(floor, floor);
    for (token, lp) in raw.entries() {
        let slot = match vocab.lookup(&normalize_surface_form(token)) {
            Some(Label::Vulnerable) => &mut scores.vulnerable,
            Some(Label::Benign) => &mut scores.benign,
            None => continue,
        };
        if *lp > *slot {
            *slot = *lp;
        }
    }
    scores
}

/// Absolute gap between the best and second-best label score.
pub fn confidence_score(scores: &LabelScores) -> f64 {
    (scores.vulnerable - scores.benign).abs()
}

/// Argmax over label scores. Exact ties go to `Benign`; the second field
/// reports whether the tie rule decided the outcome.
pub fn predict_label_audited(scores: &LabelScores) -> (Label, bool) {
    if scores.vulnerable > scores.benign {
        (Label::Vulnerable, false)
    } else if scores.vulnerable < scores.benign {
        (Label::Benign, false)
    } else {
        (Label::Benign, true)
    }
}

pub fn predict_label(scores: &LabelScores) -> Label {
    predict_label_audited(scores).0
}

/// Outcome of classifying one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub sample_id: String,
    pub predicted: Label,
    pub scores: LabelScores,
    pub confidence: f64,
    pub strategy: StrategyTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_cwe: Option<CweId>,
    #[serde(default)]
    pub tie_broken: bool,
    pub raw: TokenLogProbs,
}

impl ClassificationResult {
    pub fn from_logprobs(
        sample_id: impl Into<String>,
        strategy: StrategyTag,
        context_cwe: Option<CweId>,
        raw: TokenLogProbs,
        vocab: &LabelVocabulary,
        floor: f64,
    ) -> Self {
        let scores = score_labels(&raw, vocab, floor);
        let (predicted, tie_broken) = predict_label_audited(&scores);
        ClassificationResult {
            sample_id: sample_id.into(),
            predicted,
            confidence: confidence_score(&scores),
            scores,
            strategy,
            context_cwe,
            tie_broken,
            raw,
        }
    }
}
