//! C ABI over the triage core.
//!
//! Every fallible call returns an [`EitlStatus`]; on failure a message is
//! kept per thread and read with [`eitl_last_error`]. Strings returned to the
//! caller are owned by it and released with [`eitl_string_free`]. Corpora
//! and fixtures are opaque handles released with their `_free` functions.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use eitl_triage::confidence::{
    confidence_score, predict_label_audited, score_labels, LabelScores, TokenLogProbs, DEFAULT_FLOOR,
};
use eitl_triage::corpus::{load_corpus, Corpus};
use eitl_triage::domain::{Label, LabelVocabulary};
use eitl_triage::gateway::{register_fixture, Fixture, Gateway, MockProvider};
use eitl_triage::metrics::{accuracy, f1_macro, ConfusionCounts};
use eitl_triage::pipeline::{classify_plan, plan_classification, StrategySpec};
use eitl_triage::prompt::StrategyTag;
use eitl_triage::routing::{route_prediction, Route, Thresholds};
use eitl_triage::simulator::{run_simulation, ExpertModel, SimulationConfig, DEFAULT_PROPORTIONS};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EitlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Parse = 4,
    Io = 5,
    Classification = 6,
    Simulation = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EitlLabel {
    Benign = 0,
    Vulnerable = 1,
}

impl From<Label> for EitlLabel {
    fn from(l: Label) -> Self {
        match l {
            Label::Benign => EitlLabel::Benign,
            Label::Vulnerable => EitlLabel::Vulnerable,
        }
    }
}

impl From<EitlLabel> for Label {
    fn from(l: EitlLabel) -> Self {
        match l {
            EitlLabel::Benign => Label::Benign,
            EitlLabel::Vulnerable => Label::Vulnerable,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EitlRoute {
    Quarantine = 0,
    Deploy = 1,
    HumanReview = 2,
}

/// Label scores and decision for one sample.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EitlScores {
    pub vulnerable: f64,
    pub benign: f64,
    pub confidence: f64,
    pub predicted: EitlLabel,
    /// Non-zero when equal scores were resolved to benign.
    pub tie_broken: u8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EitlMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub f1_macro: f64,
    pub accuracy: f64,
}

/// A loaded corpus.
pub struct EitlCorpus(Corpus);

/// Canned log-probs keyed by sample id.
pub struct EitlFixture(Fixture);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

struct Failure(EitlStatus, String);

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EitlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EitlStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            EitlStatus::Panic
        }
    }
}

fn fail<T>(status: EitlStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(EitlStatus::NullPointer, format!("{name} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(EitlStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn check_out<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        fail(EitlStatus::NullPointer, format!("{name} is null"))
    } else {
        Ok(())
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(EitlStatus::NullPointer, format!("{name} is null"));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .or_else(|_| fail(EitlStatus::InvalidArgument, "output contains NUL"))
}

/// Message for the most recent failure on this thread, or NULL. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn eitl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn eitl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn eitl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Absolute gap between the two label scores.
#[no_mangle]
pub extern "C" fn eitl_confidence(vulnerable: f64, benign: f64) -> f64 {
    confidence_score(&LabelScores::new(vulnerable, benign))
}

/// Higher-scoring label; equal scores give benign.
#[no_mangle]
pub extern "C" fn eitl_predict(vulnerable: f64, benign: f64) -> EitlLabel {
    predict_label_audited(&LabelScores::new(vulnerable, benign)).0.into()
}

/// Scores a first-token top-k list with the default answer vocabulary.
/// `tokens` and `logprobs` are parallel arrays of length `n`.
#[no_mangle]
pub unsafe extern "C" fn eitl_score_tokens(
    tokens: *const *const c_char,
    logprobs: *const f64,
    n: usize,
    out: *mut EitlScores,
) -> EitlStatus {
    guard(|| {
        check_out(out, "out")?;
        let toks = slice_arg(tokens, n, "tokens")?;
        let lps = slice_arg(logprobs, n, "logprobs")?;
        let mut entries = Vec::with_capacity(n);
        for (i, (&t, &lp)) in toks.iter().zip(lps).enumerate() {
            entries.push((str_arg(t, &format!("tokens[{i}]"))?.to_string(), lp));
        }
        let raw = TokenLogProbs::new(entries).or_else(|e| fail(EitlStatus::InvalidArgument, e.to_string()))?;
        let scores = score_labels(&raw, &LabelVocabulary::default(), DEFAULT_FLOOR);
        let (label, tie) = predict_label_audited(&scores);
        *out = EitlScores {
            vulnerable: scores.vulnerable,
            benign: scores.benign,
            confidence: confidence_score(&scores),
            predicted: label.into(),
            tie_broken: u8::from(tie),
        };
        Ok(())
    })
}

/// Three-way routing of one prediction against per-label thresholds.
#[no_mangle]
pub unsafe extern "C" fn eitl_route(
    predicted: EitlLabel,
    confidence: f64,
    tau_vulnerable: f64,
    tau_benign: f64,
    out: *mut EitlRoute,
) -> EitlStatus {
    guard(|| {
        check_out(out, "out")?;
        let t = Thresholds::new(tau_vulnerable, tau_benign)
            .or_else(|e| fail(EitlStatus::InvalidArgument, e.to_string()))?;
        if !(confidence.is_finite() && confidence >= 0.0) {
            return fail(
                EitlStatus::InvalidArgument,
                format!("confidence must be finite and >= 0, got {confidence}"),
            );
        }
        *out = match route_prediction(predicted.into(), confidence, &t) {
            Route::Quarantine => EitlRoute::Quarantine,
            Route::Deploy => EitlRoute::Deploy,
            Route::HumanReview => EitlRoute::HumanReview,
        };
        Ok(())
    })
}

/// Confusion counts, F1-macro and accuracy over parallel label arrays.
#[no_mangle]
pub unsafe extern "C" fn eitl_metrics(
    predicted: *const EitlLabel,
    truth: *const EitlLabel,
    n: usize,
    out: *mut EitlMetrics,
) -> EitlStatus {
    guard(|| {
        check_out(out, "out")?;
        if n == 0 {
            return fail(EitlStatus::InvalidArgument, "need at least one sample");
        }
        let p = slice_arg(predicted, n, "predicted")?;
        let t = slice_arg(truth, n, "truth")?;
        let mut c = ConfusionCounts::default();
        for (&p, &t) in p.iter().zip(t) {
            c.record(p.into(), t.into());
        }
        *out = EitlMetrics {
            tp: c.tp as u64,
            fp: c.fp as u64,
            fn_: c.fn_ as u64,
            tn: c.tn as u64,
            f1_macro: f1_macro(&c),
            accuracy: accuracy(&c),
        };
        Ok(())
    })
}

/// Loads a JSONL corpus. On success `*out` owns a handle.
#[no_mangle]
pub unsafe extern "C" fn eitl_corpus_load(path: *const c_char, out: *mut *mut EitlCorpus) -> EitlStatus {
    guard(|| {
        check_out(out, "out")?;
        let path = str_arg(path, "path")?;
        let corpus = load_corpus(path).or_else(|e| {
            let status = if e.line().is_some() {
                EitlStatus::Parse
            } else {
                EitlStatus::Io
            };
            fail(status, format!("{path}: {e}"))
        })?;
        *out = Box::into_raw(Box::new(EitlCorpus(corpus)));
        Ok(())
    })
}

/// Number of samples, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn eitl_corpus_len(corpus: *const EitlCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.0.len())
}

/// Content digest as a newly allocated hex string, or NULL for NULL.
#[no_mangle]
pub unsafe extern "C" fn eitl_corpus_digest(corpus: *const EitlCorpus) -> *mut c_char {
    match corpus.as_ref() {
        Some(c) => CString::new(c.0.digest()).map_or(ptr::null_mut(), CString::into_raw),
        None => ptr::null_mut(),
    }
}

#[no_mangle]
pub unsafe extern "C" fn eitl_corpus_free(corpus: *mut EitlCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Loads a log-prob fixture. On success `*out` owns a handle.
#[no_mangle]
pub unsafe extern "C" fn eitl_fixture_load(path: *const c_char, out: *mut *mut EitlFixture) -> EitlStatus {
    guard(|| {
        check_out(out, "out")?;
        let path = str_arg(path, "path")?;
        let fixture = register_fixture(path).or_else(|e| fail(EitlStatus::Parse, format!("{path}: {e}")))?;
        *out = Box::into_raw(Box::new(EitlFixture(fixture)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn eitl_fixture_free(fixture: *mut EitlFixture) {
    if !fixture.is_null() {
        drop(Box::from_raw(fixture));
    }
}

/// Classifies `corpus` with `strategy` ("zero-shot", "fs-cross", "fs-in")
/// using `fixture` as the model, then sweeps review proportions and writes
/// the report CSV to `*out_csv`. `proportions` may be NULL for the default
/// grid. `seed` drives exemplar selection, random sampling and the analyst.
#[no_mangle]
pub unsafe extern "C" fn eitl_simulate_csv(
    corpus: *const EitlCorpus,
    fixture: *const EitlFixture,
    strategy: *const c_char,
    proportions: *const f64,
    n_proportions: usize,
    seed: u64,
    expert_accuracy: f64,
    n_random_repeats: usize,
    out_csv: *mut *mut c_char,
) -> EitlStatus {
    guard(|| {
        check_out(out_csv, "out_csv")?;
        let corpus = match corpus.as_ref() {
            Some(c) => &c.0,
            None => return fail(EitlStatus::NullPointer, "corpus is null"),
        };
        let fixture = match fixture.as_ref() {
            Some(f) => &f.0,
            None => return fail(EitlStatus::NullPointer, "fixture is null"),
        };
        let tag: StrategyTag = str_arg(strategy, "strategy")?
            .parse()
            .or_else(|e: String| fail(EitlStatus::InvalidArgument, e))?;
        let proportions = if proportions.is_null() {
            DEFAULT_PROPORTIONS.to_vec()
        } else {
            slice_arg(proportions, n_proportions, "proportions")?.to_vec()
        };
        let truths = match corpus.truths() {
            Some(t) => t,
            None => return fail(EitlStatus::InvalidArgument, "every corpus sample needs a label"),
        };
        let plan = plan_classification(corpus, &StrategySpec::new(tag, seed), None)
            .or_else(|e| fail(EitlStatus::Classification, e.to_string()))?;
        let gateway = Gateway::new(Arc::new(MockProvider::new(fixture.clone())), 4);
        let outcome = classify_plan(&plan, &gateway);
        if let Some(first) = outcome.failures.first() {
            return fail(
                EitlStatus::Classification,
                format!("{} samples failed; first: {first}", outcome.failures.len()),
            );
        }
        let cfg = SimulationConfig {
            proportions,
            seed,
            expert: ExpertModel {
                accuracy: expert_accuracy,
                seed,
            },
            n_random_repeats,
            ..Default::default()
        };
        let classified = [(tag, outcome.results)].into_iter().collect();
        let report =
            run_simulation(&classified, &truths, &cfg).or_else(|e| fail(EitlStatus::Simulation, e.to_string()))?;
        *out_csv = into_c_string(report.to_csv())?;
        Ok(())
    })
}
