//! Prompt construction for the three information levels (zero-shot,
//! cross-domain few-shot, in-domain few-shot) and leakage-free exemplar
//! selection.
//!
//! Templates live in `assets/templates/` and use `{{NAME}}` placeholders.
//! Rendering is single pass, so placeholder-like text inside sample code is
//! never expanded.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CodeSample, CweId, Label, LabelVocabulary};

pub const TEMPLATE_VERSION: &str = "v1";

const SYSTEM_TEMPLATE: &str = include_str!("../assets/templates/system.txt");
const ZERO_SHOT_TEMPLATE: &str = include_str!("../assets/templates/zero_shot.txt");
const CROSS_DOMAIN_TEMPLATE: &str = include_str!("../assets/templates/cross_domain.txt");
const IN_DOMAIN_TEMPLATE: &str = include_str!("../assets/templates/in_domain.txt");
const EXEMPLAR_TEMPLATE: &str = include_str!("../assets/templates/exemplar.txt");

/// Marker that opens every exemplar block in a rendered prompt.
pub const EXEMPLAR_MARKER: &str = "### Example ";

pub const CROSS_DOMAIN_PER_LABEL: usize = 5;
pub const MIN_CROSS_DOMAIN_CWES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("cross-domain prompts need 5 vulnerable and 5 benign exemplars, got {vulnerable} and {benign}")]
    WrongExemplarCount { vulnerable: usize, benign: usize },
    #[error("exemplar {0} is also the classification target or part of the evaluation set")]
    Leakage(String),
    #[error("vulnerable exemplar {exemplar} does not carry {cwe}")]
    CweMismatch { cwe: CweId, exemplar: String },
    #[error("exemplar {exemplar} has label {found}, expected {expected}")]
    WrongExemplarLabel {
        exemplar: String,
        expected: Label,
        found: Label,
    },
    #[error("sample {0} has no ground-truth label and cannot be an exemplar")]
    UnlabeledExemplar(String),
    #[error("insufficient corpus: {0}")]
    InsufficientCorpus(String),
}

/// Which information level produced a classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrategyTag {
    #[serde(rename = "zero-shot")]
    ZeroShot,
    #[serde(rename = "fs-cross")]
    FewShotCrossDomain,
    #[serde(rename = "fs-in")]
    FewShotInDomain,
}

impl StrategyTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyTag::ZeroShot => "zero-shot",
            StrategyTag::FewShotCrossDomain => "fs-cross",
            StrategyTag::FewShotInDomain => "fs-in",
        }
    }
}

impl fmt::Display for StrategyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero-shot" => Ok(StrategyTag::ZeroShot),
            "fs-cross" => Ok(StrategyTag::FewShotCrossDomain),
            "fs-in" => Ok(StrategyTag::FewShotInDomain),
            other => Err(format!(
                "unknown strategy {other:?} (expected zero-shot, fs-cross or fs-in)"
            )),
        }
    }
}

/// A correctly labeled sample shown to the model inside a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub sample_id: String,
    pub source_code: String,
    pub label: Label,
    pub cwe_ids: BTreeSet<CweId>,
}

impl TryFrom<&CodeSample> for Exemplar {
    type Error = PromptError;

    fn try_from(s: &CodeSample) -> Result<Self, Self::Error> {
        let label = s
            .ground_truth()
            .ok_or_else(|| PromptError::UnlabeledExemplar(s.id().to_string()))?;
        Ok(Exemplar {
            sample_id: s.id().to_string(),
            source_code: s.source_code().to_string(),
            label,
            cwe_ids: s.cwe_ids().clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptStrategy {
    ZeroShot,
    FewShotCrossDomain {
        exemplars: Vec<Exemplar>,
    },
    FewShotInDomain {
        cwe: CweId,
        vulnerable_example: Exemplar,
        benign_example: Exemplar,
    },
}

impl PromptStrategy {
    pub fn tag(&self) -> StrategyTag {
        match self {
            PromptStrategy::ZeroShot => StrategyTag::ZeroShot,
            PromptStrategy::FewShotCrossDomain { .. } => StrategyTag::FewShotCrossDomain,
            PromptStrategy::FewShotInDomain { .. } => StrategyTag::FewShotInDomain,
        }
    }

    pub fn context_cwe(&self) -> Option<CweId> {
        match self {
            PromptStrategy::FewShotInDomain { cwe, .. } => Some(*cwe),
            _ => None,
        }
    }

    pub fn build(&self, sample: &CodeSample, vocab: &LabelVocabulary) -> Result<Prompt, PromptError> {
        match self {
            PromptStrategy::ZeroShot => Ok(build_zero_shot(sample, vocab)),
            PromptStrategy::FewShotCrossDomain { exemplars } => build_few_shot_cross_domain(sample, exemplars, vocab),
            PromptStrategy::FewShotInDomain {
                cwe,
                vulnerable_example,
                benign_example,
            } => build_few_shot_in_domain(sample, *cwe, vulnerable_example, benign_example, vocab),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub system_text: String,
    pub user_text: String,
    /// Canonical answers, `[vulnerable, benign]`.
    pub permitted_answers: [String; 2],
}

impl Prompt {
    pub fn exemplar_blocks(&self) -> usize {
        self.user_text
            .lines()
            .filter(|l| l.starts_with(EXEMPLAR_MARKER))
            .count()
    }
}

/// Substitutes `{{NAME}}` placeholders in one pass; unknown names are left
/// untouched.
fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let name = &after[..end];
                match vars.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push_str("{{");
                        out.push_str(name);
                        out.push_str("}}");
                    }
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

fn answers(vocab: &LabelVocabulary) -> [String; 2] {
    [
        vocab.canonical(Label::Vulnerable).to_string(),
        vocab.canonical(Label::Benign).to_string(),
    ]
}

fn system_text(vocab: &LabelVocabulary) -> String {
    render(
        SYSTEM_TEMPLATE,
        &[
            ("VULNERABLE", vocab.canonical(Label::Vulnerable)),
            ("BENIGN", vocab.canonical(Label::Benign)),
        ],
    )
}

fn render_exemplars<'a>(exemplars: impl IntoIterator<Item = &'a Exemplar>, vocab: &LabelVocabulary) -> String {
    exemplars
        .into_iter()
        .enumerate()
        .map(|(i, ex)| {
            let index = (i + 1).to_string();
            render(
                EXEMPLAR_TEMPLATE,
                &[
                    ("INDEX", &index),
                    ("CODE", ex.source_code.trim_end()),
                    ("LABEL", vocab.canonical(ex.label)),
                ],
            )
        })
        .collect()
}

fn user_text(template: &str, sample: &CodeSample, examples: &str, cwe: &str, vocab: &LabelVocabulary) -> String {
    render(
        template,
        &[
            ("EXAMPLES", examples),
            ("CWE", cwe),
            ("CODE", sample.source_code()),
            ("VULNERABLE", vocab.canonical(Label::Vulnerable)),
            ("BENIGN", vocab.canonical(Label::Benign)),
        ],
    )
}

pub fn build_zero_shot(sample: &CodeSample, vocab: &LabelVocabulary) -> Prompt {
    Prompt {
        system_text: system_text(vocab),
        user_text: user_text(ZERO_SHOT_TEMPLATE, sample, "", "", vocab),
        permitted_answers: answers(vocab),
    }
}

pub fn build_few_shot_cross_domain(
    sample: &CodeSample,
    exemplars: &[Exemplar],
    vocab: &LabelVocabulary,
) -> Result<Prompt, PromptError> {
    let mut vulnerable: Vec<&Exemplar> = exemplars.iter().filter(|e| e.label == Label::Vulnerable).collect();
    let mut benign: Vec<&Exemplar> = exemplars.iter().filter(|e| e.label == Label::Benign).collect();
    if vulnerable.len() != CROSS_DOMAIN_PER_LABEL || benign.len() != CROSS_DOMAIN_PER_LABEL {
        return Err(PromptError::WrongExemplarCount {
            vulnerable: vulnerable.len(),
            benign: benign.len(),
        });
    }
    if let Some(e) = exemplars.iter().find(|e| e.sample_id == sample.id()) {
        return Err(PromptError::Leakage(e.sample_id.clone()));
    }
    vulnerable.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    benign.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let ordered = vulnerable.into_iter().zip(benign).flat_map(|(v, b)| [v, b]);
    let examples = render_exemplars(ordered, vocab);
    Ok(Prompt {
        system_text: system_text(vocab),
        user_text: user_text(CROSS_DOMAIN_TEMPLATE, sample, &examples, "", vocab),
        permitted_answers: answers(vocab),
    })
}

pub fn build_few_shot_in_domain(
    sample: &CodeSample,
    cwe: CweId,
    vulnerable_example: &Exemplar,
    benign_example: &Exemplar,
    vocab: &LabelVocabulary,
) -> Result<Prompt, PromptError> {
    if vulnerable_example.label != Label::Vulnerable {
        return Err(PromptError::WrongExemplarLabel {
            exemplar: vulnerable_example.sample_id.clone(),
            expected: Label::Vulnerable,
            found: vulnerable_example.label,
        });
    }
    if !vulnerable_example.cwe_ids.contains(&cwe) {
        return Err(PromptError::CweMismatch {
            cwe,
            exemplar: vulnerable_example.sample_id.clone(),
        });
    }
    if benign_example.label != Label::Benign {
        return Err(PromptError::WrongExemplarLabel {
            exemplar: benign_example.sample_id.clone(),
            expected: Label::Benign,
            found: benign_example.label,
        });
    }
    for ex in [vulnerable_example, benign_example] {
        if ex.sample_id == sample.id() {
            return Err(PromptError::Leakage(ex.sample_id.clone()));
        }
    }
    let examples = render_exemplars([vulnerable_example, benign_example], vocab);
    Ok(Prompt {
        system_text: system_text(vocab),
        user_text: user_text(IN_DOMAIN_TEMPLATE, sample, &examples, &cwe.to_string(), vocab),
        permitted_answers: answers(vocab),
    })
}

/// Labeled candidates outside `eval_ids`, sorted by id so selection depends
/// only on content and seed.
fn candidates<'a>(corpus: &'a [CodeSample], eval_ids: &HashSet<String>, label: Label) -> Vec<&'a CodeSample> {
    let mut pool: Vec<&CodeSample> = corpus
        .iter()
        .filter(|s| s.ground_truth() == Some(label) && !eval_ids.contains(s.id()))
        .collect();
    pool.sort_by(|a, b| a.id().cmp(b.id()));
    pool
}

/// Picks 5 vulnerable exemplars spanning at least 3 CWEs plus 5 benign ones,
/// none of them in `eval_ids`.
pub fn select_cross_domain_exemplars(
    corpus: &[CodeSample],
    eval_ids: &HashSet<String>,
    seed: u64,
) -> Result<Vec<Exemplar>, PromptError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vulnerable = candidates(corpus, eval_ids, Label::Vulnerable);
    let mut benign = candidates(corpus, eval_ids, Label::Benign);
    let pool_cwes: BTreeSet<CweId> = vulnerable.iter().flat_map(|s| s.cwe_ids().iter().copied()).collect();
    if vulnerable.len() < CROSS_DOMAIN_PER_LABEL
        || benign.len() < CROSS_DOMAIN_PER_LABEL
        || pool_cwes.len() < MIN_CROSS_DOMAIN_CWES
    {
        return Err(PromptError::InsufficientCorpus(format!(
            "need >=5 vulnerable samples over >=3 CWEs and >=5 benign samples outside the evaluation set; \
             have {} vulnerable over {} CWEs and {} benign",
            vulnerable.len(),
            pool_cwes.len(),
            benign.len()
        )));
    }
    vulnerable.shuffle(&mut rng);
    benign.shuffle(&mut rng);

    // Greedy pass: prefer samples that add an uncovered CWE, then fill in
    // shuffled order.
    let mut covered = BTreeSet::new();
    let mut chosen: Vec<&CodeSample> = Vec::with_capacity(CROSS_DOMAIN_PER_LABEL);
    for s in &vulnerable {
        if chosen.len() == CROSS_DOMAIN_PER_LABEL {
            break;
        }
        if s.cwe_ids().iter().any(|c| !covered.contains(c)) {
            covered.extend(s.cwe_ids().iter().copied());
            chosen.push(s);
        }
    }
    for s in &vulnerable {
        if chosen.len() == CROSS_DOMAIN_PER_LABEL {
            break;
        }
        if !chosen.iter().any(|c| c.id() == s.id()) {
            chosen.push(s);
        }
    }
    chosen.extend(benign.into_iter().take(CROSS_DOMAIN_PER_LABEL));
    chosen.into_iter().map(Exemplar::try_from).collect()
}

/// One vulnerable exemplar carrying `cwe` and one benign exemplar.
pub fn select_in_domain_pair(
    corpus: &[CodeSample],
    cwe: CweId,
    eval_ids: &HashSet<String>,
    seed: u64,
) -> Result<(Exemplar, Exemplar), PromptError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vulnerable: Vec<&CodeSample> = candidates(corpus, eval_ids, Label::Vulnerable)
        .into_iter()
        .filter(|s| s.cwe_ids().contains(&cwe))
        .collect();
    let benign = candidates(corpus, eval_ids, Label::Benign);
    let v = vulnerable.choose(&mut rng).ok_or_else(|| {
        PromptError::InsufficientCorpus(format!("no vulnerable {cwe} sample outside the evaluation set"))
    })?;
    let b = benign
        .choose(&mut rng)
        .ok_or_else(|| PromptError::InsufficientCorpus("no benign sample outside the evaluation set".into()))?;
    Ok((Exemplar::try_from(*v)?, Exemplar::try_from(*b)?))
}
