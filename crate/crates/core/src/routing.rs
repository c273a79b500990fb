//! Turning classification results into dispositions.
//!
//! Threshold mode maps each result to quarantine, deployment or human review.
//! Budget mode picks a fixed fraction of a batch for review, either the
//! lowest-confidence results or a seeded uniform sample.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::ClassificationResult;
use crate::domain::Label;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RoutingError {
    #[error("threshold {name} = {value} must be finite and >= 0")]
    BadThreshold { name: &'static str, value: f64 },
    #[error("review proportion {0} is outside [0, 1]")]
    BadProportion(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Quarantine,
    Deploy,
    HumanReview,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::Quarantine => "quarantine",
            Route::Deploy => "deploy",
            Route::HumanReview => "human_review",
        }
    }
}

impl FromStr for Route {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "quarantine" => Ok(Route::Quarantine),
            "deploy" => Ok(Route::Deploy),
            "human_review" => Ok(Route::HumanReview),
            other => Err(format!("unknown route {other:?}")),
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    tau_vulnerable: f64,
    tau_benign: f64,
}

impl Thresholds {
    pub fn new(tau_vulnerable: f64, tau_benign: f64) -> Result<Self, RoutingError> {
        for (name, value) in [("tau_vulnerable", tau_vulnerable), ("tau_benign", tau_benign)] {
            if !value.is_finite() || value < 0.0 {
                return Err(RoutingError::BadThreshold { name, value });
            }
        }
        Ok(Thresholds {
            tau_vulnerable,
            tau_benign,
        })
    }

    pub fn tau_vulnerable(&self) -> f64 {
        self.tau_vulnerable
    }

    pub fn tau_benign(&self) -> f64 {
        self.tau_benign
    }
}

/// What produced a routing decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Provenance {
    Thresholds { tau_vulnerable: f64, tau_benign: f64 },
    Budget { rank: usize, proportion: f64 },
    ClassificationFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub route: Route,
    pub provenance: Provenance,
}

/// Quarantine or deploy when confidence reaches the predicted label's
/// threshold, otherwise human review.
pub fn route_prediction(predicted: Label, confidence: f64, t: &Thresholds) -> Route {
    match predicted {
        Label::Vulnerable if confidence >= t.tau_vulnerable => Route::Quarantine,
        Label::Benign if confidence >= t.tau_benign => Route::Deploy,
        _ => Route::HumanReview,
    }
}

pub fn route_by_thresholds(result: &ClassificationResult, t: &Thresholds) -> RoutingDecision {
    RoutingDecision {
        route: route_prediction(result.predicted, result.confidence, t),
        provenance: Provenance::Thresholds {
            tau_vulnerable: t.tau_vulnerable,
            tau_benign: t.tau_benign,
        },
    }
}

/// Number of reviewed samples for proportion `q` of `n`: `floor(q*n + 0.5)`.
pub fn budget_size(n: usize, q: f64) -> usize {
    ((q * n as f64 + 0.5).floor() as usize).min(n)
}

fn check_proportion(q: f64) -> Result<(), RoutingError> {
    if (0.0..=1.0).contains(&q) {
        Ok(())
    } else {
        Err(RoutingError::BadProportion(q))
    }
}

/// Results ordered by (confidence ascending, sample id ascending).
pub fn review_order(results: &[ClassificationResult]) -> Vec<&ClassificationResult> {
    let mut ordered: Vec<&ClassificationResult> = results.iter().collect();
    ordered.sort_by(|a, b| {
        a.confidence
            .total_cmp(&b.confidence)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    ordered
}

/// The `floor(q*N + 0.5)` lowest-confidence sample ids.
pub fn route_by_budget(results: &[ClassificationResult], q: f64) -> Result<BTreeSet<String>, RoutingError> {
    check_proportion(q)?;
    let k = budget_size(results.len(), q);
    Ok(review_order(results)
        .into_iter()
        .take(k)
        .map(|r| r.sample_id.clone())
        .collect())
}

/// Seeded uniform sample without replacement of `floor(q*N + 0.5)` ids.
///
/// Ids are visited in ascending order, each draws one `u64` key from a
/// ChaCha8 stream seeded with `seed`, and the `k` smallest keys (ties by id)
/// are taken. For a fixed seed the selections are nested in `q`.
pub fn random_budget(results: &[ClassificationResult], q: f64, seed: u64) -> Result<BTreeSet<String>, RoutingError> {
    check_proportion(q)?;
    let k = budget_size(results.len(), q);
    let mut ids: Vec<&str> = results.iter().map(|r| r.sample_id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(u64, &str)> = ids.into_iter().map(|id| (rng.next_u64(), id)).collect();
    keyed.sort_unstable();
    Ok(keyed.into_iter().take(k).map(|(_, id)| id.to_string()).collect())
}
