//! Seeded synthetic corpora and log-prob fixtures so every pipeline stage can
//! run without the external dataset or a live model.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::confidence::TokenLogProbs;
use crate::corpus::Corpus;
use crate::domain::{validate_sample, CodeSample, CweCatalog, CweId, Label, RawSample};
use crate::gateway::Fixture;

/// CWEs outside the 2024 top 25, used to pad synthetic corpora.
const EXTRA_CWES: [u32; 40] = [
    1333, 611, 601, 732, 295, 327, 330, 384, 209, 117, 113, 134, 250, 276, 319, 326, 345, 347, 362, 367, 377, 390, 426,
    444, 459, 521, 522, 532, 552, 565, 613, 614, 639, 643, 668, 676, 697, 703, 754, 835,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub prevalence: f64,
    pub n_cwes: usize,
    /// How many of the CWEs come from the top-25 catalog.
    pub n_top25: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// 1,096 functions, ~10% vulnerable, 37 CWEs of which 7 are top-25.
    fn default() -> Self {
        SynthConfig {
            n_samples: 1096,
            prevalence: 0.10,
            n_cwes: 37,
            n_top25: 7,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_vulnerable(&self) -> usize {
        ((self.prevalence * self.n_samples as f64 + 0.5).floor() as usize).min(self.n_samples)
    }

    /// The CWE pool, top-25 entries first.
    pub fn cwe_pool(&self) -> Vec<CweId> {
        let top = CweCatalog::top25_2024();
        let n_top = self.n_top25.min(self.n_cwes).min(top.top25().len());
        let mut pool: Vec<CweId> = top.top25()[..n_top].to_vec();
        pool.extend(EXTRA_CWES.iter().take(self.n_cwes - n_top).map(|&n| CweId::new(n)));
        pool
    }
}

const BENIGN_BODIES: [&str; 6] = [
    "    total = 0\n    for item in {arg}:\n        total += item\n    return total",
    "    if not {arg}:\n        return None\n    return {arg}.strip().lower()",
    "    result = dict()\n    for k, v in {arg}.items():\n        result[k] = v * 2\n    return result",
    "    with open(CONFIG_PATH) as fh:\n        return json.load(fh).get({arg!r}, DEFAULT)",
    "    return sorted(set({arg}))",
    "    logger.info('processing %d entries', len({arg}))\n    return [x for x in {arg} if x]",
];

const VULNERABLE_BODIES: [&str; 6] = [
    "    cursor.execute(\"SELECT * FROM users WHERE name = '%s'\" % {arg})\n    return cursor.fetchall()",
    "    return open(os.path.join(BASE_DIR, {arg})).read()",
    "    os.system('convert ' + {arg})",
    "    return pickle.loads({arg})",
    "    return '<div>' + {arg} + '</div>'",
    "    return eval({arg})",
];

fn code_for(idx: usize, vulnerable: bool, rng: &mut ChaCha8Rng) -> String {
    let bodies = if vulnerable { &VULNERABLE_BODIES } else { &BENIGN_BODIES };
    let body = bodies[rng.random_range(0..bodies.len())];
    let arg = ["data", "payload", "path", "query", "values", "request_arg"][rng.random_range(0..6)];
    format!(
        "def handler_{idx:04}({arg}):\n{}",
        body.replace("{arg!r}", &format!("'{arg}'")).replace("{arg}", arg)
    )
}

/// Generates a labeled corpus whose vulnerable count is
/// `floor(prevalence * n + 0.5)` and which uses every CWE of the pool when
/// there are at least as many vulnerable samples as CWEs.
pub fn generate_corpus(cfg: &SynthConfig) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = cfg.cwe_pool();
    let n_vuln = cfg.n_vulnerable();
    let mut is_vuln: Vec<bool> = (0..cfg.n_samples).map(|i| i < n_vuln).collect();
    is_vuln.shuffle(&mut rng);

    let mut vuln_seen = 0usize;
    let samples: Vec<CodeSample> = is_vuln
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut cwes = BTreeSet::new();
            if v && !pool.is_empty() {
                cwes.insert(pool[vuln_seen % pool.len()]);
                if rng.random_bool(0.15) {
                    cwes.insert(pool[rng.random_range(0..pool.len())]);
                }
                vuln_seen += 1;
            }
            let label = if v && !cwes.is_empty() {
                Label::Vulnerable
            } else {
                Label::Benign
            };
            validate_sample(RawSample {
                id: format!("fn-{i:04}"),
                code: code_for(i, v, &mut rng),
                label: Some(label),
                cwes: cwes.iter().map(|c| c.to_string()).collect(),
            })
            .expect("synthetic samples are valid")
        })
        .collect();
    Corpus::new(samples).expect("synthetic ids are unique")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    /// Probability that the model's top answer is correct.
    pub model_accuracy: f64,
    /// Probability that the losing label is missing from the top-k list.
    pub absent_rate: f64,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            model_accuracy: 0.8,
            absent_rate: 0.1,
            seed: 0,
        }
    }
}

const NOISE_TOKENS: [&str; 5] = ["The", "maybe", "\n", "This", "**"];

fn surface(label: Label, rng: &mut ChaCha8Rng) -> String {
    let forms: &[&str] = match label {
        Label::Vulnerable => &["vulnerable", " Vulnerable", "VULNERABLE", "Yes"],
        Label::Benign => &["benign", " Benign", "BENIGN", "safe"],
    };
    forms[rng.random_range(0..forms.len())].to_string()
}

/// Synthetic first-token log-probs for every sample of a labeled corpus.
/// Correct answers tend to have a wide gap to the runner-up and wrong
/// answers a narrow one, so low confidence signals likely errors.
pub fn generate_fixture(corpus: &Corpus, cfg: &FixtureConfig) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut fixture = Fixture::default();
    for s in corpus.samples() {
        let truth = s.ground_truth().unwrap_or(Label::Benign);
        let correct = rng.random_bool(cfg.model_accuracy);
        let answer = if correct { truth } else { truth.flipped() };
        let top = -rng.random_range(0.0..0.3);
        let gap = if correct {
            rng.random_range(2.0..18.0)
        } else {
            rng.random_range(0.0..6.0)
        };
        let mut entries = vec![(surface(answer, &mut rng), top)];
        if !rng.random_bool(cfg.absent_rate) {
            entries.push((surface(answer.flipped(), &mut rng), top - gap));
        }
        for _ in 0..rng.random_range(0..3) {
            let noise = NOISE_TOKENS[rng.random_range(0..NOISE_TOKENS.len())];
            entries.push((noise.to_string(), -rng.random_range(1.0..25.0)));
        }
        let lp = TokenLogProbs::new(entries).expect("synthetic logprobs are valid");
        fixture.insert(s.id(), lp);
    }
    fixture
}
