//! Binary confusion counts, accuracy and macro-averaged F1.
//!
//! `Vulnerable` is the positive class throughout.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Label;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("prediction and truth id sets differ (e.g. {0:?})")]
    KeyMismatch(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Same counts with the benign class treated as positive.
    pub fn mirrored(&self) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }

    pub fn record(&mut self, predicted: Label, truth: Label) {
        match (predicted, truth) {
            (Label::Vulnerable, Label::Vulnerable) => self.tp += 1,
            (Label::Vulnerable, Label::Benign) => self.fp += 1,
            (Label::Benign, Label::Vulnerable) => self.fn_ += 1,
            (Label::Benign, Label::Benign) => self.tn += 1,
        }
    }
}

pub fn confusion_counts(
    preds: &BTreeMap<String, Label>,
    truths: &BTreeMap<String, Label>,
) -> Result<ConfusionCounts, MetricsError> {
    if preds.len() != truths.len() {
        let odd = preds
            .keys()
            .find(|k| !truths.contains_key(*k))
            .or_else(|| truths.keys().find(|k| !preds.contains_key(*k)))
            .cloned()
            .unwrap_or_default();
        return Err(MetricsError::KeyMismatch(odd));
    }
    let mut c = ConfusionCounts::default();
    for (id, &p) in preds {
        let &t = truths.get(id).ok_or_else(|| MetricsError::KeyMismatch(id.clone()))?;
        c.record(p, t);
    }
    Ok(c)
}

/// Positive-class F1; 0.0 when the class never occurs in either labels or
/// predictions.
fn class_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn f1_macro(c: &ConfusionCounts) -> f64 {
    let m = c.mirrored();
    (class_f1(c.tp, c.fp, c.fn_) + class_f1(m.tp, m.fp, m.fn_)) / 2.0
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    let total = c.total();
    if total == 0 {
        return 0.0;
    }
    (c.tp + c.tn) as f64 / total as f64
}
