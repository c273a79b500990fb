//! Core value types shared across the triage pipeline: labels, CWE
//! identifiers, code samples and the answer vocabulary used to read model
//! output.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Binary verdict for a code sample. `Benign < Vulnerable` is the order used
/// for every deterministic tie-break in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Vulnerable,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Benign, Label::Vulnerable];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Vulnerable => "vulnerable",
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Benign => Label::Vulnerable,
            Label::Vulnerable => Label::Benign,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vulnerable" => Ok(Label::Vulnerable),
            "benign" => Ok(Label::Benign),
            _ => Err(DomainError::UnknownLabel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("sample id is empty")]
    EmptyId,
    #[error("sample {0}: source code is empty")]
    EmptyCode(String),
    #[error("sample {0}: benign samples cannot carry CWE ids")]
    BenignWithCwe(String),
    #[error("sample {0}: vulnerable samples need at least one CWE id")]
    VulnerableWithoutCwe(String),
    #[error("malformed CWE id {0:?} (expected CWE-<digits>)")]
    MalformedCwe(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("label vocabulary: {0}")]
    Vocabulary(String),
    #[error("CWE catalog: {0}")]
    Catalog(String),
}

/// A CWE identifier, stored by number and rendered canonically as `CWE-<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CweId(u32);

impl CweId {
    pub fn new(number: u32) -> Self {
        CweId(number)
    }

    pub fn number(self) -> u32 {
        self.0
    }
}

impl fmt::Display for CweId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CWE-{}", self.0)
    }
}

impl FromStr for CweId {
    type Err = DomainError;

    /// Accepts `CWE-787` in any letter case.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DomainError::MalformedCwe(s.to_string());
        let t = s.trim();
        if t.len() < 5 || !t[..4].eq_ignore_ascii_case("cwe-") {
            return Err(bad());
        }
        let digits = &t[4..];
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        digits.parse::<u32>().map(CweId).map_err(|_| bad())
    }
}

impl Serialize for CweId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CweId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One function of source code, the unit routed through the system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSample {
    id: String,
    source_code: String,
    ground_truth: Option<Label>,
    cwe_ids: BTreeSet<CweId>,
}

impl CodeSample {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn source_code(&self) -> &str {
        &self.source_code
    }

    pub fn ground_truth(&self) -> Option<Label> {
        self.ground_truth
    }

    pub fn cwe_ids(&self) -> &BTreeSet<CweId> {
        &self.cwe_ids
    }
}

/// Unvalidated sample fields as they arrive from a file or request body.
#[derive(Debug, Clone, Default)]
pub struct RawSample {
    pub id: String,
    pub code: String,
    pub label: Option<Label>,
    pub cwes: Vec<String>,
}

pub fn validate_sample(raw: RawSample) -> Result<CodeSample, DomainError> {
    if raw.id.trim().is_empty() {
        return Err(DomainError::EmptyId);
    }
    if raw.code.trim().is_empty() {
        return Err(DomainError::EmptyCode(raw.id));
    }
    let cwe_ids = raw
        .cwes
        .iter()
        .map(|c| c.parse::<CweId>())
        .collect::<Result<BTreeSet<_>, _>>()?;
    match raw.label {
        Some(Label::Benign) if !cwe_ids.is_empty() => return Err(DomainError::BenignWithCwe(raw.id)),
        Some(Label::Vulnerable) if cwe_ids.is_empty() => return Err(DomainError::VulnerableWithoutCwe(raw.id)),
        _ => {}
    }
    Ok(CodeSample {
        id: raw.id,
        source_code: raw.code,
        ground_truth: raw.label,
        cwe_ids,
    })
}

/// Case-folds, trims, and strips tokenizer word-boundary markers
/// (`Ġ`, `▁`, leading spaces).
pub fn normalize_surface_form(token: &str) -> String {
    token
        .trim_matches(|c: char| c.is_whitespace() || c == '\u{0120}' || c == '\u{2581}')
        .to_lowercase()
}

/// Per-label answer strings the model may emit. The first form of each label
/// is its canonical answer string used in prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    vulnerable: Vec<String>,
    benign: Vec<String>,
}

impl LabelVocabulary {
    pub fn new<I, J, S, T>(vulnerable: I, benign: J) -> Result<Self, DomainError>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let norm = |forms: Vec<String>, label: Label| -> Result<Vec<String>, DomainError> {
            let mut out: Vec<String> = Vec::new();
            for f in forms {
                let n = normalize_surface_form(&f);
                if n.is_empty() {
                    return Err(DomainError::Vocabulary(format!("empty surface form for {label}")));
                }
                if !out.contains(&n) {
                    out.push(n);
                }
            }
            if out.is_empty() {
                return Err(DomainError::Vocabulary(format!("no surface forms for {label}")));
            }
            Ok(out)
        };
        let vulnerable = norm(
            vulnerable.into_iter().map(|s| s.as_ref().to_string()).collect(),
            Label::Vulnerable,
        )?;
        let benign = norm(
            benign.into_iter().map(|s| s.as_ref().to_string()).collect(),
            Label::Benign,
        )?;
        if let Some(shared) = vulnerable.iter().find(|v| benign.contains(v)) {
            return Err(DomainError::Vocabulary(format!(
                "surface form {shared:?} maps to both labels"
            )));
        }
        Ok(LabelVocabulary { vulnerable, benign })
    }

    pub fn forms(&self, label: Label) -> &[String] {
        match label {
            Label::Vulnerable => &self.vulnerable,
            Label::Benign => &self.benign,
        }
    }

    pub fn canonical(&self, label: Label) -> &str {
        &self.forms(label)[0]
    }

    /// Label for an already-normalized token, if any.
    pub fn lookup(&self, normalized: &str) -> Option<Label> {
        if normalized.is_empty() {
            return None;
        }
        Label::ALL
            .into_iter()
            .find(|&l| self.forms(l).iter().any(|f| f == normalized))
    }
}

impl Default for LabelVocabulary {
    fn default() -> Self {
        LabelVocabulary::new(["vulnerable", "yes", "1"], ["benign", "safe", "no", "0"])
            .expect("default vocabulary is valid")
    }
}

/// A ranked top-25 list plus every CWE observed in a corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CweCatalog {
    top25: Vec<CweId>,
    observed: BTreeSet<CweId>,
}

/// MITRE's 2024 CWE Top 25 Most Dangerous Software Weaknesses, rank order.
pub const TOP25_2024: &str = include_str!("../assets/cwe_top25_2024.txt");

impl CweCatalog {
    pub fn new(top25: Vec<CweId>) -> Result<Self, DomainError> {
        if top25.len() > 25 {
            return Err(DomainError::Catalog(format!("top-25 list has {} entries", top25.len())));
        }
        let mut seen = BTreeSet::new();
        for c in &top25 {
            if !seen.insert(*c) {
                return Err(DomainError::Catalog(format!("duplicate entry {c}")));
            }
        }
        Ok(CweCatalog {
            top25,
            observed: BTreeSet::new(),
        })
    }

    /// Parses the plain-text catalog format: one CWE id per line, `#` comments.
    pub fn parse(text: &str) -> Result<Self, DomainError> {
        let mut ids = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let id = line
                .parse::<CweId>()
                .map_err(|e| DomainError::Catalog(format!("line {}: {e}", i + 1)))?;
            ids.push(id);
        }
        CweCatalog::new(ids)
    }

    pub fn top25_2024() -> Self {
        CweCatalog::parse(TOP25_2024).expect("bundled catalog is valid")
    }

    pub fn with_observed(mut self, observed: impl IntoIterator<Item = CweId>) -> Self {
        self.observed = observed.into_iter().collect();
        self
    }

    pub fn top25(&self) -> &[CweId] {
        &self.top25
    }

    pub fn observed(&self) -> &BTreeSet<CweId> {
        &self.observed
    }

    pub fn contains(&self, cwe: CweId) -> bool {
        self.top25.contains(&cwe)
    }

    /// Catalog rank of `cwe` (0 = most dangerous).
    pub fn rank(&self, cwe: CweId) -> Option<usize> {
        self.top25.iter().position(|&c| c == cwe)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(id: &str, label: Option<Label>, cwes: &[&str]) -> RawSample {
        RawSample {
            id: id.into(),
            code: "def f(): pass".into(),
            label,
            cwes: cwes.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn valid_benign_sample() {
        let s = validate_sample(raw("s1", Some(Label::Benign), &[])).unwrap();
        assert_eq!(s.id(), "s1");
        assert!(s.cwe_ids().is_empty());
    }

    #[test]
    fn benign_with_cwe_rejected() {
        let err = validate_sample(raw("s2", Some(Label::Benign), &["CWE-79"])).unwrap_err();
        assert_eq!(err, DomainError::BenignWithCwe("s2".into()));
    }

    #[test]
    fn empty_id_rejected() {
        let err = validate_sample(raw("", Some(Label::Vulnerable), &["CWE-787"])).unwrap_err();
        assert_eq!(err, DomainError::EmptyId);
    }

    #[test]
    fn other_sample_errors() {
        let mut r = raw("s3", None, &[]);
        r.code = "  ".into();
        assert!(matches!(validate_sample(r), Err(DomainError::EmptyCode(_))));
        assert!(matches!(
            validate_sample(raw("s4", Some(Label::Vulnerable), &[])),
            Err(DomainError::VulnerableWithoutCwe(_))
        ));
        assert!(matches!(
            validate_sample(raw("s5", Some(Label::Vulnerable), &["CWE-7x"])),
            Err(DomainError::MalformedCwe(_))
        ));
        // unlabeled samples are legal
        assert!(validate_sample(raw("s6", None, &[])).is_ok());
    }

    #[test]
    fn cwe_parsing_is_canonical() {
        assert_eq!("cwe-787".parse::<CweId>().unwrap().to_string(), "CWE-787");
        assert_eq!("CWE-079".parse::<CweId>().unwrap().to_string(), "CWE-79");
        for bad in ["CWE-", "CWE787", "787", "CWE-12a", "CWE--1", ""] {
            assert!(bad.parse::<CweId>().is_err(), "{bad}");
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_surface_form(" Vulnerable"), "vulnerable");
        assert_eq!(normalize_surface_form("BENIGN"), "benign");
        assert_eq!(normalize_surface_form("vulnerable"), "vulnerable");
        assert_eq!(normalize_surface_form("\u{0120}Yes"), "yes");
        assert_eq!(normalize_surface_form("  "), "");
    }

    #[test]
    fn vocabulary_rejects_overlap_after_normalization() {
        assert!(LabelVocabulary::new(["Yes"], [" yes"]).is_err());
        assert!(LabelVocabulary::new(Vec::<&str>::new(), ["no"]).is_err());
        let v = LabelVocabulary::default();
        assert_eq!(v.canonical(Label::Vulnerable), "vulnerable");
        assert_eq!(v.canonical(Label::Benign), "benign");
        assert_eq!(v.lookup("safe"), Some(Label::Benign));
        assert_eq!(v.lookup(""), None);
    }

    #[test]
    fn bundled_catalog() {
        let c = CweCatalog::top25_2024();
        assert_eq!(c.top25().len(), 25);
        assert_eq!(c.top25()[0].to_string(), "CWE-79");
        assert_eq!(c.rank("CWE-787".parse().unwrap()), Some(1));
    }

    #[test]
    fn catalog_limits() {
        let too_many: Vec<CweId> = (1..=26).map(CweId::new).collect();
        assert!(CweCatalog::new(too_many).is_err());
        assert!(CweCatalog::parse("CWE-1\ncwe-1\n").is_err());
        assert!(CweCatalog::parse("# header\n\nCWE-20 # input validation\n").is_ok());
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "\\PC{0,12}") {
            let once = normalize_surface_form(&s);
            prop_assert_eq!(normalize_surface_form(&once), once.clone());
        }

        #[test]
        fn validation_is_total(id in "[a-z0-9]{0,3}", code in "[ a-z]{0,4}",
                               label in proptest::option::of(prop_oneof![Just(Label::Benign), Just(Label::Vulnerable)]),
                               cwes in proptest::collection::vec("(CWE|cwe|XX)-[0-9]{1,3}", 0..3)) {
            let r = RawSample { id, code, label, cwes };
            if let Ok(s) = validate_sample(r) {
                prop_assert!(!s.id().is_empty());
                match s.ground_truth() {
                    Some(Label::Benign) => prop_assert!(s.cwe_ids().is_empty()),
                    Some(Label::Vulnerable) => prop_assert!(!s.cwe_ids().is_empty()),
                    None => {}
                }
            }
        }
    }
}
