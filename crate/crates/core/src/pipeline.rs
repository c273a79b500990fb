//! Corpus-level classification: expands a strategy into one prompt strategy
//! per evaluated sample, runs it through a gateway, and reads/writes
//! classification record files.
//!
//! Exemplars come from a separate pool when one is given. Otherwise they are
//! drawn from the corpus itself and held out of the evaluated set.
//!
//! For `fs-in`, the corpus is first reduced to vulnerable samples tagged with
//! a catalog CWE plus all benign samples. Each vulnerable sample is evaluated
//! under its highest-ranked catalog CWE; benign samples are dealt round-robin
//! over the in-scope CWEs in ascending id order. Every sample is classified
//! exactly once, and the union of the per-CWE subsets is the scored set.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{ClassificationResult, LabelScores};
use crate::corpus::{filter_by_cwe, Corpus};
use crate::domain::{CodeSample, CweCatalog, CweId, Label};
use crate::gateway::{ClassifyError, Gateway};
use crate::prompt::{select_cross_domain_exemplars, select_in_domain_pair, PromptError, PromptStrategy, StrategyTag};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A strategy tag plus what is needed to expand it over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub tag: StrategyTag,
    #[serde(default)]
    pub seed: u64,
    /// Top-25 catalog for `fs-in`; the bundled 2024 list when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<CweCatalog>,
}

impl StrategySpec {
    pub fn new(tag: StrategyTag, seed: u64) -> Self {
        StrategySpec {
            tag,
            seed,
            catalog: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationPlan {
    pub items: Vec<(CodeSample, PromptStrategy)>,
    /// Corpus samples used as exemplars and therefore not evaluated.
    pub held_out: Vec<String>,
    /// Samples dropped by the `fs-in` top-25 filter.
    pub filtered_out: usize,
}

fn exemplar_ids(strategy: &PromptStrategy) -> Vec<&str> {
    match strategy {
        PromptStrategy::ZeroShot => vec![],
        PromptStrategy::FewShotCrossDomain { exemplars } => exemplars.iter().map(|e| e.sample_id.as_str()).collect(),
        PromptStrategy::FewShotInDomain {
            vulnerable_example,
            benign_example,
            ..
        } => vec![vulnerable_example.sample_id.as_str(), benign_example.sample_id.as_str()],
    }
}

pub fn plan_classification(
    corpus: &Corpus,
    spec: &StrategySpec,
    exemplar_pool: Option<&Corpus>,
) -> Result<ClassificationPlan, PipelineError> {
    // With a separate pool every corpus id is off limits for exemplars.
    let eval_ids: HashSet<String> = match exemplar_pool {
        Some(_) => corpus.ids(),
        None => HashSet::new(),
    };
    let pool = exemplar_pool.map(|p| p.samples()).unwrap_or(corpus.samples());

    match spec.tag {
        StrategyTag::ZeroShot => Ok(ClassificationPlan {
            items: corpus
                .samples()
                .iter()
                .map(|s| (s.clone(), PromptStrategy::ZeroShot))
                .collect(),
            held_out: vec![],
            filtered_out: 0,
        }),
        StrategyTag::FewShotCrossDomain => {
            let exemplars = select_cross_domain_exemplars(pool, &eval_ids, spec.seed)?;
            let strategy = PromptStrategy::FewShotCrossDomain { exemplars };
            let held: BTreeSet<&str> = exemplar_ids(&strategy).into_iter().collect();
            let items = corpus
                .samples()
                .iter()
                .filter(|s| !held.contains(s.id()))
                .map(|s| (s.clone(), strategy.clone()))
                .collect();
            Ok(ClassificationPlan {
                items,
                held_out: held_out(corpus, &held),
                filtered_out: 0,
            })
        }
        StrategyTag::FewShotInDomain => {
            let catalog = spec.catalog.clone().unwrap_or_else(CweCatalog::top25_2024);
            let scoped = filter_by_cwe(corpus, &catalog);
            let in_scope: Vec<CweId> = catalog
                .top25()
                .iter()
                .copied()
                .filter(|c| {
                    scoped
                        .samples()
                        .iter()
                        .any(|s| s.ground_truth() == Some(Label::Vulnerable) && s.cwe_ids().contains(c))
                })
                .collect();
            if in_scope.is_empty() {
                return Err(
                    PromptError::InsufficientCorpus("no vulnerable sample carries a catalog CWE".into()).into(),
                );
            }
            let pool_scoped;
            let pool = match exemplar_pool {
                Some(p) => {
                    pool_scoped = filter_by_cwe(p, &catalog);
                    pool_scoped.samples()
                }
                None => scoped.samples(),
            };
            let mut strategies: BTreeMap<CweId, PromptStrategy> = BTreeMap::new();
            for (i, cwe) in in_scope.iter().enumerate() {
                let (v, b) = select_in_domain_pair(pool, *cwe, &eval_ids, spec.seed.wrapping_add(i as u64))?;
                strategies.insert(
                    *cwe,
                    PromptStrategy::FewShotInDomain {
                        cwe: *cwe,
                        vulnerable_example: v,
                        benign_example: b,
                    },
                );
            }
            let held: BTreeSet<&str> = strategies.values().flat_map(exemplar_ids).collect();

            let mut benign_ids: Vec<&str> = scoped
                .samples()
                .iter()
                .filter(|s| s.ground_truth() == Some(Label::Benign) && !held.contains(s.id()))
                .map(|s| s.id())
                .collect();
            benign_ids.sort_unstable();
            let benign_cwe: BTreeMap<&str, CweId> = benign_ids
                .iter()
                .enumerate()
                .map(|(i, id)| (*id, in_scope[i % in_scope.len()]))
                .collect();

            let mut items = Vec::new();
            for s in scoped.samples().iter().filter(|s| !held.contains(s.id())) {
                let cwe = match s.ground_truth() {
                    Some(Label::Vulnerable) => *in_scope
                        .iter()
                        .find(|c| s.cwe_ids().contains(c))
                        .expect("filtered vulnerable samples carry an in-scope CWE"),
                    _ => benign_cwe[s.id()],
                };
                items.push((s.clone(), strategies[&cwe].clone()));
            }
            Ok(ClassificationPlan {
                items,
                held_out: held_out(corpus, &held),
                filtered_out: corpus.len() - scoped.len(),
            })
        }
    }
}

fn held_out(corpus: &Corpus, held: &BTreeSet<&str>) -> Vec<String> {
    corpus
        .samples()
        .iter()
        .filter(|s| held.contains(s.id()))
        .map(|s| s.id().to_string())
        .collect()
}

pub struct BatchOutcome {
    pub results: Vec<ClassificationResult>,
    pub failures: Vec<ClassifyError>,
}

pub fn classify_plan(plan: &ClassificationPlan, gateway: &Gateway) -> BatchOutcome {
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for r in gateway.classify_batch(&plan.items) {
        match r {
            Ok(ok) => results.push(ok),
            Err(e) => failures.push(e),
        }
    }
    BatchOutcome { results, failures }
}

/// One line of a classification output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationRecord {
    pub sample_id: String,
    pub strategy: StrategyTag,
    pub predicted: Label,
    pub scores: LabelScores,
    pub confidence: f64,
}

impl From<&ClassificationResult> for ClassificationRecord {
    fn from(r: &ClassificationResult) -> Self {
        ClassificationRecord {
            sample_id: r.sample_id.clone(),
            strategy: r.strategy,
            predicted: r.predicted,
            scores: r.scores,
            confidence: r.confidence,
        }
    }
}

impl ClassificationRecord {
    /// Rebuilds a result for simulation. The raw token list is not part of
    /// the record format and is left empty-equivalent.
    pub fn into_result(self) -> ClassificationResult {
        ClassificationResult {
            sample_id: self.sample_id,
            predicted: self.predicted,
            scores: self.scores,
            confidence: self.confidence,
            strategy: self.strategy,
            context_cwe: None,
            tie_broken: self.scores.vulnerable == self.scores.benign,
            raw: crate::confidence::TokenLogProbs::new(vec![
                ("vulnerable".into(), self.scores.vulnerable.min(0.0)),
                ("benign".into(), self.scores.benign.min(0.0)),
            ])
            .expect("scores are finite and <= 0"),
        }
    }
}

pub fn records_to_jsonl(results: &[ClassificationResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(&ClassificationRecord::from(r)).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_records(text: &str) -> Result<Vec<ClassificationRecord>, PipelineError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClassificationRecord = serde_json::from_str(line).map_err(|e| PipelineError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !(rec.confidence.is_finite() && rec.confidence >= 0.0) {
            return Err(PipelineError::Parse {
                line: idx + 1,
                message: format!("confidence {} must be finite and >= 0", rec.confidence),
            });
        }
        if !(rec.scores.vulnerable.is_finite() && rec.scores.benign.is_finite())
            || rec.scores.vulnerable > 0.0
            || rec.scores.benign > 0.0
        {
            return Err(PipelineError::Parse {
                line: idx + 1,
                message: "scores must be finite and <= 0".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<ClassificationRecord>, PipelineError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_records(&text)
}

/// Groups records by strategy, preserving file order within each group.
pub fn group_by_strategy(records: Vec<ClassificationRecord>) -> BTreeMap<StrategyTag, Vec<ClassificationResult>> {
    let mut out: BTreeMap<StrategyTag, Vec<ClassificationResult>> = BTreeMap::new();
    for r in records {
        out.entry(r.strategy).or_default().push(r.into_result());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, SynthConfig};

    fn corpus() -> Corpus {
        generate_corpus(&SynthConfig {
            n_samples: 200,
            prevalence: 0.2,
            n_cwes: 10,
            n_top25: 4,
            seed: 5,
        })
    }

    #[test]
    fn zero_shot_plans_everything() {
        let c = corpus();
        let plan = plan_classification(&c, &StrategySpec::new(StrategyTag::ZeroShot, 0), None).unwrap();
        assert_eq!(plan.items.len(), c.len());
        assert!(plan.held_out.is_empty());
    }

    #[test]
    fn cross_domain_holds_out_exemplars() {
        let c = corpus();
        let plan = plan_classification(&c, &StrategySpec::new(StrategyTag::FewShotCrossDomain, 17), None).unwrap();
        assert_eq!(plan.held_out.len(), 10);
        assert_eq!(plan.items.len(), c.len() - 10);
        for (s, strat) in &plan.items {
            assert!(!exemplar_ids(strat).contains(&s.id()));
        }
    }

    #[test]
    fn separate_pool_keeps_every_sample() {
        let c = corpus();
        let pool_text = generate_corpus(&SynthConfig {
            n_samples: 60,
            prevalence: 0.3,
            n_cwes: 10,
            n_top25: 4,
            seed: 77,
        })
        .to_jsonl()
        .replace("\"fn-", "\"pool-");
        let pool = crate::corpus::parse_corpus(&pool_text).unwrap();
        let spec = StrategySpec::new(StrategyTag::FewShotCrossDomain, 1);
        let plan = plan_classification(&c, &spec, Some(&pool)).unwrap();
        assert_eq!(plan.items.len(), c.len());
        assert!(plan.held_out.is_empty());

        // A pool that is the corpus itself has nothing left once every corpus id is excluded.
        let err = plan_classification(&c, &spec, Some(&c)).unwrap_err();
        assert!(matches!(err, PipelineError::Prompt(PromptError::InsufficientCorpus(_))));
    }

    #[test]
    fn in_domain_assigns_every_scoped_sample_once() {
        let c = corpus();
        let plan = plan_classification(&c, &StrategySpec::new(StrategyTag::FewShotInDomain, 3), None).unwrap();
        let scoped = filter_by_cwe(&c, &CweCatalog::top25_2024());
        assert_eq!(plan.items.len() + plan.held_out.len(), scoped.len());
        assert_eq!(plan.filtered_out, c.len() - scoped.len());
        let ids: BTreeSet<&str> = plan.items.iter().map(|(s, _)| s.id()).collect();
        assert_eq!(ids.len(), plan.items.len());
        for (s, strat) in &plan.items {
            let PromptStrategy::FewShotInDomain { cwe, .. } = strat else {
                panic!()
            };
            if s.ground_truth() == Some(Label::Vulnerable) {
                assert!(s.cwe_ids().contains(cwe));
            }
            assert!(!exemplar_ids(strat).contains(&s.id()));
        }
    }

    #[test]
    fn record_file_round_trip() {
        let text = r#"{"sample_id":"a","strategy":"zero-shot","predicted":"vulnerable","scores":{"vulnerable":-0.1,"benign":-2.4},"confidence":2.3}
{"sample_id":"b","strategy":"fs-cross","predicted":"benign","scores":{"vulnerable":-3.0,"benign":-3.0},"confidence":0.0}
"#;
        let recs = parse_records(text).unwrap();
        let grouped = group_by_strategy(recs);
        assert_eq!(grouped[&StrategyTag::ZeroShot].len(), 1);
        assert!(grouped[&StrategyTag::FewShotCrossDomain][0].tie_broken);
        let bad = text.replace("2.3", "-1.0");
        assert!(matches!(parse_records(&bad), Err(PipelineError::Parse { line: 1, .. })));
    }
}
