//! Naive reference computations, written without the library's helpers.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FLOOR: f64 = -100.0;
const VULNERABLE_FORMS: [&str; 3] = ["vulnerable", "yes", "1"];
const BENIGN_FORMS: [&str; 4] = ["benign", "safe", "no", "0"];

fn normalize(token: &str) -> String {
    let strip = |c: char| c.is_whitespace() || c == 'Ġ' || c == '▁';
    let chars: Vec<char> = token.chars().collect();
    let mut start = 0;
    let mut end = chars.len();
    while start < end && strip(chars[start]) {
        start += 1;
    }
    while end > start && strip(chars[end - 1]) {
        end -= 1;
    }
    chars[start..end].iter().collect::<String>().to_lowercase()
}

/// (vulnerable score, benign score): best matching log-prob per label,
/// never below the floor.
pub fn label_scores(entries: &[(String, f64)]) -> (f64, f64) {
    let mut v = vec![FLOOR];
    let mut b = vec![FLOOR];
    for (tok, lp) in entries {
        let n = normalize(tok);
        if VULNERABLE_FORMS.contains(&n.as_str()) {
            v.push(*lp);
        } else if BENIGN_FORMS.contains(&n.as_str()) {
            b.push(*lp);
        }
    }
    v.sort_by(|x, y| y.partial_cmp(x).unwrap());
    b.sort_by(|x, y| y.partial_cmp(x).unwrap());
    (v[0], b[0])
}

/// Confidence as the difference of the two largest scores after sorting.
pub fn confidence(scores: &[f64]) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap());
    s[0] - s[1]
}

/// `true` for vulnerable; the benign label wins ties.
pub fn predicts_vulnerable(v: f64, b: f64) -> bool {
    let mut s = [(v, 1u8), (b, 0u8)];
    // Benign sorts first among equals.
    s.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
    s[0].1 == 1
}

/// Round-half-up of `q * n` by counting up.
pub fn budget(n: usize, q: f64) -> usize {
    let mut k = 0;
    while k < n && (k as f64 + 0.5) <= q * n as f64 {
        k += 1;
    }
    k
}

/// Per-class F1 averaged, by enumerating every pair.
pub fn f1_macro_and_accuracy(pred: &[bool], truth: &[bool]) -> (f64, f64) {
    let n = pred.len();
    let mut f1s = Vec::new();
    for class in [true, false] {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for i in 0..n {
            match (pred[i] == class, truth[i] == class) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let r = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
        f1s.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    let correct = (0..n).filter(|&i| pred[i] == truth[i]).count();
    ((f1s[0] + f1s[1]) / 2.0, correct as f64 / n as f64)
}

pub struct Item {
    pub id: String,
    pub predicted_vulnerable: bool,
    pub confidence: f64,
    pub truly_vulnerable: bool,
}

/// Ids chosen by the lowest-confidence sampler.
pub fn uq_pick(items: &[Item], k: usize) -> Vec<String> {
    let mut order: Vec<&Item> = items.iter().collect();
    for i in 0..order.len() {
        for j in i + 1..order.len() {
            let (a, b) = (order[i], order[j]);
            if b.confidence < a.confidence || (b.confidence == a.confidence && b.id < a.id) {
                order.swap(i, j);
            }
        }
    }
    order.iter().take(k).map(|it| it.id.clone()).collect()
}

/// Ids chosen by the seeded random sampler.
pub fn random_pick(items: &[Item], k: usize, seed: u64) -> Vec<String> {
    let mut ids: Vec<String> = items.iter().map(|it| it.id.clone()).collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(u64, String)> = ids.into_iter().map(|id| (rng.next_u64(), id)).collect();
    keyed.sort();
    keyed.into_iter().take(k).map(|(_, id)| id).collect()
}

/// (f1, accuracy, corrected) with a perfect analyst on `picked`.
pub fn review_outcome(items: &[Item], picked: &[String]) -> (f64, f64, usize) {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut corrected = 0;
    for it in items {
        let reviewed = picked.contains(&it.id);
        if reviewed && it.predicted_vulnerable != it.truly_vulnerable {
            corrected += 1;
        }
        pred.push(if reviewed {
            it.truly_vulnerable
        } else {
            it.predicted_vulnerable
        });
        truth.push(it.truly_vulnerable);
    }
    let (f1, acc) = f1_macro_and_accuracy(&pred, &truth);
    (f1, acc, corrected)
}

/// Builds zero-shot items straight from corpus and fixture JSONL text.
pub fn items_from_files(corpus: &str, fixture: &str) -> Vec<Item> {
    let mut truth: BTreeMap<String, bool> = BTreeMap::new();
    for line in corpus.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        truth.insert(v["id"].as_str().unwrap().to_string(), v["label"] == "vulnerable");
    }
    let mut items = Vec::new();
    for line in fixture.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let id = v["sample_id"].as_str().unwrap().to_string();
        let entries: Vec<(String, f64)> = v["logprobs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| (p[0].as_str().unwrap().to_string(), p[1].as_f64().unwrap()))
            .collect();
        let (sv, sb) = label_scores(&entries);
        items.push(Item {
            truly_vulnerable: truth[&id],
            id,
            predicted_vulnerable: predicts_vulnerable(sv, sb),
            confidence: confidence(&[sv, sb]),
        });
    }
    items
}

/// The default zero-shot sweep: proportions 0..0.75, random then uq, one
/// random repeat seeded from the first draw of seed 0, perfect analyst.
pub fn default_sweep_csv(items: &[Item]) -> String {
    let mut out = String::from("strategy,sampler,proportion,f1_macro,accuracy,n_reviewed,n_corrected\n");
    let repeat_seed = ChaCha8Rng::seed_from_u64(0).next_u64();
    for sampler in ["random", "uq"] {
        for q in [0.0, 0.10, 0.25, 0.50, 0.75] {
            let k = budget(items.len(), q);
            let picked = if sampler == "uq" {
                uq_pick(items, k)
            } else {
                random_pick(items, k, repeat_seed)
            };
            let (f1, acc, corrected) = review_outcome(items, &picked);
            out.push_str(&format!(
                "zero-shot,{sampler},{q:.6},{f1:.6},{acc:.6},{},{corrected}\n",
                picked.len()
            ));
        }
    }
    out
}
