//! JSON-lines corpus files: loading, canonical writing, top-25 filtering and
//! summary statistics.
//!
//! Record shape, one per line:
//! `{"id": "...", "code": "...", "label": "vulnerable"|"benign", "cwes": ["CWE-79"]}`.
//! `label` may be omitted or null for unlabeled code. Unknown keys are rejected.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{validate_sample, CodeSample, CweCatalog, CweId, DomainError, Label, RawSample};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate sample id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("catalog: {0}")]
    Catalog(#[from] DomainError),
}

impl CorpusError {
    pub fn line(&self) -> Option<usize> {
        match self {
            CorpusError::Parse { line, .. } | CorpusError::DuplicateId { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    code: String,
    #[serde(default)]
    label: Option<Label>,
    #[serde(default)]
    cwes: Vec<String>,
}

impl From<&CodeSample> for Record {
    fn from(s: &CodeSample) -> Self {
        Record {
            id: s.id().to_string(),
            code: s.source_code().to_string(),
            label: s.ground_truth(),
            cwes: s.cwe_ids().iter().map(|c| c.to_string()).collect(),
        }
    }
}

/// Ordered, validated samples with a content digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    samples: Vec<CodeSample>,
    digest: String,
}

impl Corpus {
    /// Fails on the first duplicate id.
    pub fn new(samples: Vec<CodeSample>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for (i, s) in samples.iter().enumerate() {
            if !seen.insert(s.id()) {
                return Err(CorpusError::DuplicateId {
                    line: i + 1,
                    id: s.id().to_string(),
                });
            }
        }
        let digest = digest_of(&samples);
        Ok(Corpus { samples, digest })
    }

    pub fn samples(&self) -> &[CodeSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn get(&self, id: &str) -> Option<&CodeSample> {
        self.samples.iter().find(|s| s.id() == id)
    }

    pub fn ids(&self) -> HashSet<String> {
        self.samples.iter().map(|s| s.id().to_string()).collect()
    }

    /// Ground truth per id; `None` if any sample is unlabeled.
    pub fn truths(&self) -> Option<BTreeMap<String, Label>> {
        self.samples
            .iter()
            .map(|s| s.ground_truth().map(|l| (s.id().to_string(), l)))
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        canonical_lines(&self.samples)
    }
}

fn canonical_lines(samples: &[CodeSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(&Record::from(s)).expect("record serializes"));
        out.push('\n');
    }
    out
}

fn digest_of(samples: &[CodeSample]) -> String {
    hex::encode(Sha256::digest(canonical_lines(samples).as_bytes()))
}

pub fn parse_corpus(text: &str) -> Result<Corpus, CorpusError> {
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let sample = validate_sample(RawSample {
            id: rec.id,
            code: rec.code,
            label: rec.label,
            cwes: rec.cwes,
        })
        .map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(sample.id().to_string()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: sample.id().to_string(),
            });
        }
        samples.push(sample);
    }
    let digest = digest_of(&samples);
    Ok(Corpus { samples, digest })
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text)
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(corpus.to_jsonl().as_bytes()).map_err(io_err)?;
    f.sync_all().map_err(io_err)
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<CweCatalog, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(CweCatalog::parse(&text)?)
}

/// Keeps vulnerable samples tagged with a top-25 CWE and every benign sample.
pub fn filter_by_cwe(corpus: &Corpus, catalog: &CweCatalog) -> Corpus {
    let kept: Vec<CodeSample> = corpus
        .samples
        .iter()
        .filter(|s| match s.ground_truth() {
            Some(Label::Benign) => true,
            Some(Label::Vulnerable) => s.cwe_ids().iter().any(|c| catalog.contains(*c)),
            None => false,
        })
        .cloned()
        .collect();
    let digest = digest_of(&kept);
    Corpus { samples: kept, digest }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub samples: usize,
    pub vulnerable: usize,
    pub benign: usize,
    pub unlabeled: usize,
    pub prevalence: f64,
    pub distinct_cwes: usize,
    pub cwe_histogram: BTreeMap<CweId, usize>,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut stats = CorpusStats {
        samples: corpus.len(),
        vulnerable: 0,
        benign: 0,
        unlabeled: 0,
        prevalence: 0.0,
        distinct_cwes: 0,
        cwe_histogram: BTreeMap::new(),
    };
    for s in corpus.samples() {
        match s.ground_truth() {
            Some(Label::Vulnerable) => stats.vulnerable += 1,
            Some(Label::Benign) => stats.benign += 1,
            None => stats.unlabeled += 1,
        }
        for c in s.cwe_ids() {
            *stats.cwe_histogram.entry(*c).or_default() += 1;
        }
    }
    if stats.samples > 0 {
        stats.prevalence = stats.vulnerable as f64 / stats.samples as f64;
    }
    stats.distinct_cwes = stats.cwe_histogram.len();
    stats
}

impl CorpusStats {
    pub fn observed_cwes(&self) -> BTreeSet<CweId> {
        self.cwe_histogram.keys().copied().collect()
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples:       {}", self.samples)?;
        writeln!(f, "vulnerable:    {}", self.vulnerable)?;
        writeln!(f, "benign:        {}", self.benign)?;
        writeln!(f, "unlabeled:     {}", self.unlabeled)?;
        writeln!(f, "prevalence:    {:.4}", self.prevalence)?;
        writeln!(f, "distinct CWEs: {}", self.distinct_cwes)?;
        for (cwe, n) in &self.cwe_histogram {
            writeln!(f, "  {cwe:<10} {n}")?;
        }
        Ok(())
    }
}
