//! Triage runs: classify a corpus, route every sample by thresholds, persist
//! the records, and let analysts work the human-review queue.
//!
//! A record moves `Pending -> Reviewed` at most once; a second review of the
//! same record is rejected with the standing verdict.

pub mod http;
mod store;

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::confidence::ClassificationResult;
use crate::corpus::{load_catalog, load_corpus, Corpus, CorpusError};
use crate::domain::{CodeSample, Label};
use crate::gateway::{
    register_fixture, CompletionProvider, Gateway, GatewayError, LiveProvider, MockProvider, ProviderConfig,
};
use crate::metrics::{accuracy, f1_macro, ConfusionCounts};
use crate::pipeline::{plan_classification, PipelineError, StrategySpec};
use crate::prompt::StrategyTag;
use crate::routing::{route_by_thresholds, Provenance, Route, RoutingDecision, Thresholds};

pub use store::Store;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run {run_id} has no sample {sample_id}")]
    UnknownSample { run_id: String, sample_id: String },
    #[error("sample {} was already reviewed", .0.sample.id())]
    AlreadyReviewed(Box<TriageRecord>),
    #[error("sample {0} was not routed for human review")]
    NotRoutedForReview(String),
    #[error("run {0} contains unlabeled samples; metrics need ground truth")]
    UnlabeledCorpus(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Provider(#[from] GatewayError),
    #[error("store: {0}")]
    Store(#[from] rusqlite::Error),
    #[error("store: corrupt row: {0}")]
    Corrupt(String),
}

impl ServiceError {
    /// Stable machine-readable code for API error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownRun(_) => "unknown_run",
            ServiceError::UnknownSample { .. } => "unknown_sample",
            ServiceError::AlreadyReviewed(_) => "already_reviewed",
            ServiceError::NotRoutedForReview(_) => "not_routed_for_review",
            ServiceError::UnlabeledCorpus(_) => "unlabeled_corpus",
            ServiceError::InvalidRequest(_) => "invalid_request",
            ServiceError::Corpus(_) => "corpus_error",
            ServiceError::Pipeline(_) => "strategy_error",
            ServiceError::Provider(_) => "provider_error",
            ServiceError::Store(_) | ServiceError::Corrupt(_) => "store_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Reviewed {
        verdict: Label,
        analyst: String,
        at: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Quarantined,
    Deployed,
    AwaitingReview,
}

impl Disposition {
    pub fn derive(route: Route, status: &ReviewStatus) -> Disposition {
        match status {
            ReviewStatus::Reviewed {
                verdict: Label::Vulnerable,
                ..
            } => Disposition::Quarantined,
            ReviewStatus::Reviewed {
                verdict: Label::Benign, ..
            } => Disposition::Deployed,
            ReviewStatus::Pending => match route {
                Route::Quarantine => Disposition::Quarantined,
                Route::Deploy => Disposition::Deployed,
                Route::HumanReview => Disposition::AwaitingReview,
            },
        }
    }
}

/// Lifecycle of one sample within a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageRecord {
    pub run_id: String,
    pub sample: CodeSample,
    /// Absent when classification failed; such samples go to human review.
    pub classification: Option<ClassificationResult>,
    pub routing: RoutingDecision,
    pub status: ReviewStatus,
    pub disposition: Disposition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TriageRecord {
    pub fn confidence(&self) -> Option<f64> {
        self.classification.as_ref().map(|c| c.confidence)
    }

    /// Analyst verdict when reviewed, else the model prediction.
    pub fn effective_label(&self) -> Option<Label> {
        match &self.status {
            ReviewStatus::Reviewed { verdict, .. } => Some(*verdict),
            ReviewStatus::Pending => self.classification.as_ref().map(|c| c.predicted),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDescriptor {
    pub run_id: String,
    pub strategy: StrategySpec,
    pub thresholds: Thresholds,
    pub provider: serde_json::Value,
    pub created_at: String,
    pub corpus_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_ref: Option<String>,
    pub n_records: usize,
    pub n_failed: usize,
    /// Corpus samples used as exemplars and not evaluated.
    pub held_out: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderSpec {
    Mock {
        fixture: String,
        #[serde(default)]
        max_parallel: Option<usize>,
    },
    Live(ProviderConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyRequest {
    pub tag: StrategyTag,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub catalog_ref: Option<String>,
    #[serde(default)]
    pub exemplars_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdsRequest {
    pub tau_vulnerable: f64,
    pub tau_benign: f64,
}

/// Body of `POST /api/v1/runs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRunRequest {
    pub corpus_ref: String,
    pub strategy: StrategyRequest,
    pub thresholds: ThresholdsRequest,
    pub provider: ProviderSpec,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispositionCounts {
    pub quarantined: usize,
    pub deployed: usize,
    pub awaiting_review: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewProgress {
    pub routed_for_review: usize,
    pub reviewed: usize,
    pub pending: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub run_id: String,
    pub n_records: usize,
    pub dispositions: DispositionCounts,
    pub review: ReviewProgress,
    pub n_failed: usize,
    /// Records with an effective label (excludes unreviewed failures).
    pub n_scored: usize,
    pub n_corrected: usize,
    pub confusion: ConfusionCounts,
    pub f1_macro: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format {other:?} (expected csv or json)")),
        }
    }
}

pub const RUN_REPORT_HEADER: &str =
    "strategy,sampler,proportion,f1_macro,accuracy,n_reviewed,n_corrected,quarantined,deployed,awaiting_review";

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn run_id_for(
    digest: &str,
    spec: &StrategySpec,
    pool_digest: Option<&str>,
    t: &Thresholds,
    provider: &serde_json::Value,
) -> String {
    let key = serde_json::json!({
        "corpus": digest,
        "strategy": spec,
        "exemplars": pool_digest,
        "thresholds": t,
        "provider": provider,
    });
    let hash = hex::encode(Sha256::digest(key.to_string().as_bytes()));
    format!("run-{}", &hash[..16])
}

pub struct TriageService {
    store: Store,
}

impl TriageService {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        Ok(TriageService {
            store: Store::open(path)?,
        })
    }

    pub fn in_memory() -> Result<Self, ServiceError> {
        Ok(TriageService {
            store: Store::in_memory()?,
        })
    }

    /// Resolves files and the provider named in a request, then creates the
    /// run. Returns the descriptor and whether it was newly created.
    pub fn create_run(&self, req: &CreateRunRequest) -> Result<(RunDescriptor, bool), ServiceError> {
        let thresholds = Thresholds::new(req.thresholds.tau_vulnerable, req.thresholds.tau_benign)
            .map_err(|e| ServiceError::InvalidRequest(e.to_string()))?;
        let corpus = load_corpus(&req.corpus_ref)?;
        let mut spec = StrategySpec::new(req.strategy.tag, req.strategy.seed);
        if let Some(path) = &req.strategy.catalog_ref {
            spec.catalog = Some(load_catalog(path)?);
        }
        let pool = req.strategy.exemplars_ref.as_ref().map(load_corpus).transpose()?;
        let (provider, parallel, provider_ref): (Arc<dyn CompletionProvider>, usize, serde_json::Value) = match &req
            .provider
        {
            ProviderSpec::Mock { fixture, max_parallel } => {
                let f = register_fixture(fixture).map_err(|e| ServiceError::InvalidRequest(format!("fixture: {e}")))?;
                (
                    Arc::new(MockProvider::new(f)),
                    max_parallel.unwrap_or(4),
                    serde_json::to_value(&req.provider).expect("spec serializes"),
                )
            }
            ProviderSpec::Live(cfg) => (
                Arc::new(LiveProvider::new(cfg.clone())?),
                cfg.max_parallel,
                serde_json::to_value(&req.provider).expect("spec serializes"),
            ),
        };
        let gateway = Gateway::new(provider, parallel);
        self.create_run_with(
            &corpus,
            &spec,
            pool.as_ref(),
            thresholds,
            &gateway,
            provider_ref,
            Some(req.corpus_ref.clone()),
        )
    }

    /// Classifies and routes every evaluated sample, then persists the run.
    /// Idempotent on (corpus digest, strategy, exemplar pool, thresholds,
    /// provider reference): a repeat returns the stored run without calling
    /// the provider.
    #[allow(clippy::too_many_arguments)]
    pub fn create_run_with(
        &self,
        corpus: &Corpus,
        spec: &StrategySpec,
        exemplar_pool: Option<&Corpus>,
        thresholds: Thresholds,
        gateway: &Gateway,
        provider_ref: serde_json::Value,
        corpus_ref: Option<String>,
    ) -> Result<(RunDescriptor, bool), ServiceError> {
        let run_id = run_id_for(
            corpus.digest(),
            spec,
            exemplar_pool.map(|p| p.digest()),
            &thresholds,
            &provider_ref,
        );
        if let Some(existing) = self.store.run(&run_id)? {
            return Ok((existing, false));
        }
        let plan = plan_classification(corpus, spec, exemplar_pool)?;
        let outcomes = gateway.classify_batch(&plan.items);
        let mut records = Vec::with_capacity(outcomes.len());
        let mut n_failed = 0;
        for ((sample, _), outcome) in plan.items.iter().zip(outcomes) {
            let record = match outcome {
                Ok(result) => {
                    let routing = route_by_thresholds(&result, &thresholds);
                    TriageRecord {
                        run_id: run_id.clone(),
                        sample: sample.clone(),
                        disposition: Disposition::derive(routing.route, &ReviewStatus::Pending),
                        classification: Some(result),
                        routing,
                        status: ReviewStatus::Pending,
                        error: None,
                    }
                }
                Err(e) => {
                    n_failed += 1;
                    TriageRecord {
                        run_id: run_id.clone(),
                        sample: sample.clone(),
                        classification: None,
                        routing: RoutingDecision {
                            route: Route::HumanReview,
                            provenance: Provenance::ClassificationFailed,
                        },
                        status: ReviewStatus::Pending,
                        disposition: Disposition::AwaitingReview,
                        error: Some(e.to_string()),
                    }
                }
            };
            records.push(record);
        }
        let descriptor = RunDescriptor {
            run_id: run_id.clone(),
            strategy: spec.clone(),
            thresholds,
            provider: provider_ref,
            created_at: now(),
            corpus_digest: corpus.digest().to_string(),
            corpus_ref,
            n_records: records.len(),
            n_failed,
            held_out: plan.held_out.clone(),
        };
        let created = self.store.insert_run(&descriptor, &records)?;
        if created {
            tracing::info!(run = %run_id, records = records.len(), failed = n_failed, "run created");
            Ok((descriptor, true))
        } else {
            let existing = self
                .store
                .run(&run_id)?
                .ok_or_else(|| ServiceError::UnknownRun(run_id.clone()))?;
            Ok((existing, false))
        }
    }

    pub fn run(&self, run_id: &str) -> Result<RunDescriptor, ServiceError> {
        self.store
            .run(run_id)?
            .ok_or_else(|| ServiceError::UnknownRun(run_id.to_string()))
    }

    pub fn record(&self, run_id: &str, sample_id: &str) -> Result<TriageRecord, ServiceError> {
        self.run(run_id)?;
        self.store
            .record(run_id, sample_id)?
            .ok_or_else(|| ServiceError::UnknownSample {
                run_id: run_id.to_string(),
                sample_id: sample_id.to_string(),
            })
    }

    pub fn records(&self, run_id: &str) -> Result<Vec<TriageRecord>, ServiceError> {
        self.run(run_id)?;
        self.store.records(run_id)
    }

    /// Pending human-review records, lowest confidence first (failed
    /// classifications before all others), ties by sample id.
    pub fn next_pending(&self, run_id: &str, limit: usize) -> Result<Vec<TriageRecord>, ServiceError> {
        self.run(run_id)?;
        self.store.pending(run_id, limit)
    }

    pub fn submit_review(
        &self,
        run_id: &str,
        sample_id: &str,
        verdict: Label,
        analyst: &str,
    ) -> Result<TriageRecord, ServiceError> {
        self.run(run_id)?;
        self.store.review(run_id, sample_id, verdict, analyst, &now())
    }

    pub fn run_metrics(&self, run_id: &str) -> Result<MetricsSnapshot, ServiceError> {
        let records = self.records(run_id)?;
        if records.iter().any(|r| r.sample.ground_truth().is_none()) {
            return Err(ServiceError::UnlabeledCorpus(run_id.to_string()));
        }
        let mut snap = MetricsSnapshot {
            run_id: run_id.to_string(),
            n_records: records.len(),
            dispositions: DispositionCounts::default(),
            review: ReviewProgress::default(),
            n_failed: 0,
            n_scored: 0,
            n_corrected: 0,
            confusion: ConfusionCounts::default(),
            f1_macro: None,
            accuracy: None,
        };
        for r in &records {
            tally(&mut snap.dispositions, &mut snap.review, r);
            if r.classification.is_none() {
                snap.n_failed += 1;
            }
            if is_corrected(r) {
                snap.n_corrected += 1;
            }
            if let (Some(label), Some(truth)) = (r.effective_label(), r.sample.ground_truth()) {
                snap.confusion.record(label, truth);
                snap.n_scored += 1;
            }
        }
        if snap.n_scored > 0 {
            snap.f1_macro = Some(f1_macro(&snap.confusion));
            snap.accuracy = Some(accuracy(&snap.confusion));
        }
        Ok(snap)
    }

    pub fn export_report(&self, run_id: &str, format: ReportFormat) -> Result<String, ServiceError> {
        let desc = self.run(run_id)?;
        let records = self.store.records(run_id)?;
        let metrics = self.run_metrics(run_id).ok();
        let mut disp = DispositionCounts::default();
        let mut progress = ReviewProgress::default();
        for r in &records {
            tally(&mut disp, &mut progress, r);
        }
        let n_corrected = records.iter().filter(|r| is_corrected(r)).count();
        let proportion = if records.is_empty() {
            0.0
        } else {
            progress.reviewed as f64 / records.len() as f64
        };
        let f1 = metrics.as_ref().and_then(|m| m.f1_macro);
        let acc = metrics.as_ref().and_then(|m| m.accuracy);
        match format {
            ReportFormat::Csv => {
                let mut out = format!("{RUN_REPORT_HEADER}\n");
                if !records.is_empty() {
                    let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
                    let _ = writeln!(
                        out,
                        "{},threshold,{proportion:.6},{},{},{},{n_corrected},{},{},{}",
                        desc.strategy.tag,
                        opt(f1),
                        opt(acc),
                        progress.reviewed,
                        disp.quarantined,
                        disp.deployed,
                        disp.awaiting_review
                    );
                }
                Ok(out)
            }
            ReportFormat::Json => {
                let rows: Vec<serde_json::Value> = if records.is_empty() {
                    vec![]
                } else {
                    vec![serde_json::json!({
                        "strategy": desc.strategy.tag,
                        "sampler": "threshold",
                        "proportion": proportion,
                        "f1_macro": f1,
                        "accuracy": acc,
                        "n_reviewed": progress.reviewed,
                        "n_corrected": n_corrected,
                        "quarantined": disp.quarantined,
                        "deployed": disp.deployed,
                        "awaiting_review": disp.awaiting_review,
                    })]
                };
                let body = serde_json::json!({ "run": desc, "rows": rows });
                Ok(serde_json::to_string_pretty(&body).expect("report serializes") + "\n")
            }
        }
    }

    /// Checkpoints the write-ahead log into the main database file.
    pub fn flush(&self) -> Result<(), ServiceError> {
        self.store.checkpoint()
    }
}

fn tally(d: &mut DispositionCounts, p: &mut ReviewProgress, r: &TriageRecord) {
    match r.disposition {
        Disposition::Quarantined => d.quarantined += 1,
        Disposition::Deployed => d.deployed += 1,
        Disposition::AwaitingReview => d.awaiting_review += 1,
    }
    if r.routing.route == Route::HumanReview {
        p.routed_for_review += 1;
        match r.status {
            ReviewStatus::Pending => p.pending += 1,
            ReviewStatus::Reviewed { .. } => p.reviewed += 1,
        }
    }
}

fn is_corrected(r: &TriageRecord) -> bool {
    match (&r.status, &r.classification) {
        (ReviewStatus::Reviewed { verdict, .. }, Some(c)) => *verdict != c.predicted,
        _ => false,
    }
}
