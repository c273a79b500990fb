//! Expert-in-the-loop sweeps: route a fraction of each strategy's results to
//! a simulated analyst, overwrite those predictions with the analyst's
//! verdicts, and score the outcome.
//!
//! A sweep covers every (strategy, sampler, proportion) cell. Rows come out
//! ordered by strategy, then sampler (`random` before `uq`), then proportion.
//!
//! Per-repeat seeds for the random sampler are the successive `next_u64`
//! outputs of a ChaCha8 stream seeded with the master seed; repeat `r`
//! consults an expert seeded with `expert.seed + r`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::ClassificationResult;
use crate::domain::Label;
use crate::metrics::{accuracy, confusion_counts, f1_macro, MetricsError};
use crate::prompt::StrategyTag;
use crate::routing::{random_budget, route_by_budget, RoutingError};

pub const DEFAULT_PROPORTIONS: [f64; 5] = [0.0, 0.10, 0.25, 0.50, 0.75];

pub const CSV_HEADER: &str = "strategy,sampler,proportion,f1_macro,accuracy,n_reviewed,n_corrected";

pub const IN_DOMAIN_AGGREGATION: &str =
    "fs-in cells are scored on the union of the per-CWE subsets; each sample is classified once under its assigned CWE";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("result id {0:?} has no ground truth")]
    UnknownId(String),
    #[error("strategy {strategy} lists sample {id:?} twice")]
    DuplicateResult { strategy: StrategyTag, id: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Simulated analyst who returns the true label with probability `accuracy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertModel {
    pub accuracy: f64,
    pub seed: u64,
}

impl Default for ExpertModel {
    fn default() -> Self {
        ExpertModel { accuracy: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Random,
    Uq,
}

impl Sampler {
    pub fn as_str(self) -> &'static str {
        match self {
            Sampler::Random => "random",
            Sampler::Uq => "uq",
        }
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sampler {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "random" => Ok(Sampler::Random),
            "uq" => Ok(Sampler::Uq),
            other => Err(format!("unknown sampler {other:?} (expected random or uq)")),
        }
    }
}

/// A review-set selector for one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerChoice {
    Uq,
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub proportions: Vec<f64>,
    pub samplers: Vec<Sampler>,
    pub seed: u64,
    pub expert: ExpertModel,
    pub n_random_repeats: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            proportions: DEFAULT_PROPORTIONS.to_vec(),
            samplers: vec![Sampler::Random, Sampler::Uq],
            seed: 0,
            expert: ExpertModel::default(),
            n_random_repeats: 1,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.proportions.is_empty() {
            return Err(SimError::Config("no proportions".into()));
        }
        for w in self.proportions.windows(2) {
            if w[0] >= w[1] {
                return Err(SimError::Config("proportions must be strictly ascending".into()));
            }
        }
        if let Some(q) = self.proportions.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(SimError::Config(format!("proportion {q} outside [0, 1]")));
        }
        if self.samplers.is_empty() {
            return Err(SimError::Config("no samplers".into()));
        }
        if !(0.0..=1.0).contains(&self.expert.accuracy) {
            return Err(SimError::Config(format!(
                "expert accuracy {} outside [0, 1]",
                self.expert.accuracy
            )));
        }
        if self.n_random_repeats == 0 {
            return Err(SimError::Config("n_random_repeats must be >= 1".into()));
        }
        Ok(())
    }

    fn sorted_samplers(&self) -> Vec<Sampler> {
        self.samplers
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Random-sampler seed for each repeat.
    pub fn repeat_seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_random_repeats).map(|_| rng.next_u64()).collect()
    }
}

/// Final labels after review: reviewed ids get the expert's verdict, the
/// rest keep the model prediction. Reviewed ids are consulted in ascending
/// order, one uniform draw each.
pub fn apply_expert(
    results: &[ClassificationResult],
    review_ids: &BTreeSet<String>,
    truths: &BTreeMap<String, Label>,
    expert: &ExpertModel,
) -> Result<BTreeMap<String, Label>, SimError> {
    let mut labels: BTreeMap<String, Label> = results.iter().map(|r| (r.sample_id.clone(), r.predicted)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(expert.seed);
    for id in review_ids {
        let truth = *truths.get(id).ok_or_else(|| SimError::UnknownId(id.clone()))?;
        let slot = labels.get_mut(id).ok_or_else(|| SimError::UnknownId(id.clone()))?;
        let correct = expert.accuracy >= 1.0 || rng.random::<f64>() < expert.accuracy;
        *slot = if correct { truth } else { truth.flipped() };
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub f1_macro: f64,
    pub accuracy: f64,
    pub n_reviewed: usize,
    pub n_corrected: usize,
}

pub fn run_cell(
    results: &[ClassificationResult],
    truths: &BTreeMap<String, Label>,
    sampler: SamplerChoice,
    q: f64,
    expert: &ExpertModel,
) -> Result<CellMetrics, SimError> {
    let review = match sampler {
        SamplerChoice::Uq => route_by_budget(results, q)?,
        SamplerChoice::Random { seed } => random_budget(results, q, seed)?,
    };
    let final_labels = apply_expert(results, &review, truths, expert)?;
    let scoped: BTreeMap<String, Label> = final_labels
        .keys()
        .map(|id| {
            truths
                .get(id)
                .map(|t| (id.clone(), *t))
                .ok_or_else(|| SimError::UnknownId(id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let counts = confusion_counts(&final_labels, &scoped)?;
    let n_corrected = results
        .iter()
        .filter(|r| review.contains(&r.sample_id) && final_labels[&r.sample_id] != r.predicted)
        .count();
    Ok(CellMetrics {
        f1_macro: f1_macro(&counts),
        accuracy: accuracy(&counts),
        n_reviewed: review.len(),
        n_corrected,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: StrategyTag,
    pub sampler: Sampler,
    pub proportion: f64,
    #[serde(flatten)]
    pub metrics: Option<CellMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyMeta {
    pub strategy: StrategyTag,
    pub n_scored: usize,
    pub raw_f1_macro: f64,
    pub raw_accuracy: f64,
    /// Model predictions before any expert review.
    pub original_predictions: BTreeMap<String, Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub random_repeat_seeds: Vec<u64>,
    pub n_random_repeats: usize,
    pub expert_accuracy: f64,
    pub expert_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_digest: Option<String>,
    pub strategies: Vec<StrategyMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_domain_aggregation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub rows: Vec<ReportRow>,
    pub metadata: ReportMetadata,
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

impl SimulationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            let cells = match &row.metrics {
                Some(m) => format!(
                    "{},{},{},{}",
                    fmt6(m.f1_macro),
                    fmt6(m.accuracy),
                    m.n_reviewed,
                    m.n_corrected
                ),
                None => ",,,".to_string(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{}",
                row.strategy,
                row.sampler,
                fmt6(row.proportion),
                cells
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn row(&self, strategy: StrategyTag, sampler: Sampler, proportion: f64) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.sampler == sampler && r.proportion == proportion)
    }
}

fn average(cells: &[CellMetrics]) -> CellMetrics {
    let n = cells.len() as f64;
    let mean_corrected = cells.iter().map(|c| c.n_corrected as f64).sum::<f64>() / n;
    CellMetrics {
        f1_macro: cells.iter().map(|c| c.f1_macro).sum::<f64>() / n,
        accuracy: cells.iter().map(|c| c.accuracy).sum::<f64>() / n,
        n_reviewed: cells[0].n_reviewed,
        n_corrected: (mean_corrected + 0.5).floor() as usize,
    }
}

/// Runs the full sweep. Every result id must have a truth label; each
/// strategy is scored on its own id set.
pub fn run_simulation(
    classified: &BTreeMap<StrategyTag, Vec<ClassificationResult>>,
    truths: &BTreeMap<String, Label>,
    cfg: &SimulationConfig,
) -> Result<SimulationReport, SimError> {
    cfg.validate()?;
    let mut strategies = Vec::new();
    for (tag, results) in classified {
        let mut seen = BTreeSet::new();
        for r in results {
            if !truths.contains_key(&r.sample_id) {
                return Err(SimError::UnknownId(r.sample_id.clone()));
            }
            if !seen.insert(r.sample_id.as_str()) {
                return Err(SimError::DuplicateResult {
                    strategy: *tag,
                    id: r.sample_id.clone(),
                });
            }
        }
        let raw = run_cell(results, truths, SamplerChoice::Uq, 0.0, &cfg.expert)?;
        strategies.push(StrategyMeta {
            strategy: *tag,
            n_scored: results.len(),
            raw_f1_macro: raw.f1_macro,
            raw_accuracy: raw.accuracy,
            original_predictions: results.iter().map(|r| (r.sample_id.clone(), r.predicted)).collect(),
        });
    }

    let repeat_seeds = cfg.repeat_seeds();
    let mut cells = Vec::new();
    for (tag, results) in classified {
        for sampler in cfg.sorted_samplers() {
            for &q in &cfg.proportions {
                cells.push((*tag, results, sampler, q));
            }
        }
    }
    let rows: Vec<ReportRow> = cells
        .par_iter()
        .map(|&(strategy, results, sampler, q)| {
            let outcome = match sampler {
                Sampler::Uq => run_cell(results, truths, SamplerChoice::Uq, q, &cfg.expert),
                Sampler::Random => repeat_seeds
                    .iter()
                    .enumerate()
                    .map(|(r, &seed)| {
                        let expert = ExpertModel {
                            seed: cfg.expert.seed.wrapping_add(r as u64),
                            ..cfg.expert
                        };
                        run_cell(results, truths, SamplerChoice::Random { seed }, q, &expert)
                    })
                    .collect::<Result<Vec<_>, _>>()
                    .map(|v| average(&v)),
            };
            let (metrics, error) = match outcome {
                Ok(m) => (Some(m), None),
                Err(e) => (None, Some(e.to_string())),
            };
            ReportRow {
                strategy,
                sampler,
                proportion: q,
                metrics,
                error,
            }
        })
        .collect();

    let in_domain_aggregation = classified
        .contains_key(&StrategyTag::FewShotInDomain)
        .then(|| IN_DOMAIN_AGGREGATION.to_string());
    Ok(SimulationReport {
        rows,
        metadata: ReportMetadata {
            seed: cfg.seed,
            random_repeat_seeds: repeat_seeds,
            n_random_repeats: cfg.n_random_repeats,
            expert_accuracy: cfg.expert.accuracy,
            expert_seed: cfg.expert.seed,
            corpus_digest: None,
            strategies,
            in_domain_aggregation,
        },
    })
}
