//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod support;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::process::{Command, Stdio};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use eitl_triage::cli::classify_corpus;
use eitl_triage::confidence::{
    confidence_score, predict_label, score_labels, ClassificationResult, LabelScores, TokenLogProbs, DEFAULT_FLOOR,
};
use eitl_triage::corpus::{corpus_stats, filter_by_cwe, load_corpus, write_corpus, Corpus};
use eitl_triage::domain::{CweCatalog, Label, LabelVocabulary};
use eitl_triage::gateway::{Fixture, Gateway, MockProvider};
use eitl_triage::metrics::{accuracy, confusion_counts, f1_macro};
use eitl_triage::pipeline::{plan_classification, StrategySpec};
use eitl_triage::prompt::{PromptStrategy, StrategyTag};
use eitl_triage::routing::{random_budget, route_by_budget, Thresholds};
use eitl_triage::service::{ServiceError, TriageService};
use eitl_triage::simulator::{run_cell, run_simulation, ExpertModel, Sampler, SamplerChoice, SimulationConfig};
use eitl_triage::synth::{generate_corpus, generate_fixture, FixtureConfig, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{golden_dir, oracle};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn result(id: &str, predicted: Label, confidence: f64) -> ClassificationResult {
    let scores = match predicted {
        Label::Vulnerable => LabelScores::new(0.0, -confidence),
        Label::Benign => LabelScores::new(-confidence, 0.0),
    };
    ClassificationResult {
        sample_id: id.to_string(),
        predicted,
        scores,
        confidence,
        strategy: StrategyTag::ZeroShot,
        context_cwe: None,
        tie_broken: false,
        raw: TokenLogProbs::new(vec![("x".into(), 0.0)]).unwrap(),
    }
}

fn random_scores(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let v = -rng.random_range(0.0..100.0);
    let b = if rng.random_bool(0.05) {
        v
    } else {
        -rng.random_range(0.0..100.0)
    };
    (v, b)
}

fn eq1_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vocab = LabelVocabulary::default();
    let tokens = [
        "vulnerable",
        " Yes",
        "ĠBENIGN",
        "▁safe",
        "no",
        "1",
        "0",
        "The",
        "maybe",
        "\n",
    ];
    let mut ties = 0;
    for i in 0..1000 {
        // Score map given directly.
        let (v, b) = random_scores(&mut rng);
        let s = LabelScores::new(v, b);
        let want_c = oracle::confidence(&[v, b]);
        let want_v = oracle::predicts_vulnerable(v, b);
        ensure(confidence_score(&s) == want_c, || {
            format!("map {i}: confidence {} != {want_c}", confidence_score(&s))
        })?;
        ensure((predict_label(&s) == Label::Vulnerable) == want_v, || {
            format!("map {i}: argmax mismatch")
        })?;
        ties += usize::from(v == b);

        // Score map derived from a raw top-k token list.
        let n = rng.random_range(1..8);
        let entries: Vec<(String, f64)> = (0..n)
            .map(|_| {
                let lp = if rng.random_bool(0.1) {
                    -rng.random_range(100.0..200.0)
                } else {
                    -rng.random_range(0.0..30.0)
                };
                (tokens[rng.random_range(0..tokens.len())].to_string(), lp)
            })
            .collect();
        let (ov, ob) = oracle::label_scores(&entries);
        let got = score_labels(&TokenLogProbs::new(entries).unwrap(), &vocab, DEFAULT_FLOOR);
        ensure(got == LabelScores::new(ov, ob), || {
            format!("tokens {i}: {got:?} != ({ov}, {ob})")
        })?;
        ensure(confidence_score(&got) == oracle::confidence(&[ov, ob]), || {
            format!("tokens {i}: confidence")
        })?;
        ensure(
            (predict_label(&got) == Label::Vulnerable) == oracle::predicts_vulnerable(ov, ob),
            || format!("tokens {i}: argmax"),
        )?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "1000 maps + 1000 token lists exact ({ties} ties), {elapsed:.2?}"
    ))
}

fn shift_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..500 {
        let (v, b) = random_scores(&mut rng);
        let s = LabelScores::new(v, b);
        let c = rng.random_range(-5.0..=5.0);
        let t = s.shifted(c);
        let d = (confidence_score(&t) - confidence_score(&s)).abs();
        worst = worst.max(d);
        ensure(d <= 1e-9, || format!("map {i}: confidence moved by {d}"))?;
        ensure(predict_label(&t) == predict_label(&s), || {
            format!("map {i}: argmax changed under shift {c}")
        })?;
    }
    Ok(format!("500 maps, max drift {worst:.1e}"))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for set in 0..500 {
        let n = rng.random_range(1..200);
        let p_v = rng.random_range(0.0..1.0);
        let mut preds = BTreeMap::new();
        let mut truths = BTreeMap::new();
        let (mut pv, mut tv) = (Vec::new(), Vec::new());
        for i in 0..n {
            let p = rng.random_bool(p_v);
            let t = rng.random_bool(p_v);
            let id = format!("s{i:03}");
            preds.insert(id.clone(), if p { Label::Vulnerable } else { Label::Benign });
            truths.insert(id, if t { Label::Vulnerable } else { Label::Benign });
            pv.push(p);
            tv.push(t);
        }
        let counts = confusion_counts(&preds, &truths).map_err(|e| e.to_string())?;
        let (f1, acc) = oracle::f1_macro_and_accuracy(&pv, &tv);
        let d = (f1_macro(&counts) - f1).abs().max((accuracy(&counts) - acc).abs());
        worst = worst.max(d);
        ensure(d <= 1e-12, || format!("set {set}: off by {d}"))?;
    }
    // tp=1, fp=1, fn=1, tn=3
    let labels = [
        (true, true),
        (true, false),
        (false, true),
        (false, false),
        (false, false),
        (false, false),
    ];
    let to_label = |x: bool| if x { Label::Vulnerable } else { Label::Benign };
    let preds: BTreeMap<String, Label> = labels
        .iter()
        .enumerate()
        .map(|(i, p)| (i.to_string(), to_label(p.0)))
        .collect();
    let truths: BTreeMap<String, Label> = labels
        .iter()
        .enumerate()
        .map(|(i, p)| (i.to_string(), to_label(p.1)))
        .collect();
    let c = confusion_counts(&preds, &truths).map_err(|e| e.to_string())?;
    ensure((f1_macro(&c) - 0.625).abs() <= 1e-12, || {
        format!("hand case f1 {}", f1_macro(&c))
    })?;
    ensure((accuracy(&c) - 0.667).abs() < 5e-4, || {
        format!("hand case accuracy {}", accuracy(&c))
    })?;
    Ok(format!(
        "500 sets, max error {worst:.1e}; hand case 0.625 / {:.3}",
        accuracy(&c)
    ))
}

fn binom(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn perfect_separation() -> Outcome {
    let start = Instant::now();
    // 10 vulnerable, 30 benign; 4 missed vulnerable + 4 false alarms hold
    // the 8 lowest confidences.
    let mut results = Vec::new();
    let mut truths = BTreeMap::new();
    for i in 0..40 {
        let id = format!("p{i:02}");
        let truth = if i < 10 { Label::Vulnerable } else { Label::Benign };
        let wrong = i < 4 || (10..14).contains(&i);
        let (pred, conf) = if wrong {
            (
                truth.flipped(),
                0.1 * (1 + (i % 10)) as f64 + if i >= 10 { 0.05 } else { 0.0 },
            )
        } else {
            (truth, 2.0 + i as f64)
        };
        results.push(result(&id, pred, conf));
        truths.insert(id, truth);
    }
    let perfect = ExpertModel { accuracy: 1.0, seed: 0 };
    for q in [0.20, 0.25, 0.30, 0.40, 0.50, 0.60, 0.75, 0.90, 1.0] {
        let m = run_cell(&results, &truths, SamplerChoice::Uq, q, &perfect).map_err(|e| e.to_string())?;
        ensure(m.f1_macro == 1.0, || format!("UQ F1 {} at q={q}", m.f1_macro))?;
    }
    let mut total = 0.0;
    for seed in 0..100 {
        total += run_cell(&results, &truths, SamplerChoice::Random { seed }, 0.20, &perfect)
            .map_err(|e| e.to_string())?
            .f1_macro;
    }
    let mean = total / 100.0;

    // Exact expectation by enumerating how many of each error kind a uniform
    // 8-of-40 draw corrects.
    let mut expected = 0.0;
    for a in 0..=4u64 {
        for b in 0..=4u64 {
            if a + b > 8 {
                continue;
            }
            let p = binom(4, a) * binom(4, b) * binom(32, 8 - a - b) / binom(40, 8);
            let mut pv = Vec::new();
            let mut tv = Vec::new();
            for i in 0..40u64 {
                let truth = i < 10;
                let missed = i < 4 && i >= a;
                let false_alarm = (10..14).contains(&i) && i - 10 >= b;
                pv.push(if missed || false_alarm { !truth } else { truth });
                tv.push(truth);
            }
            expected += p * oracle::f1_macro_and_accuracy(&pv, &tv).0;
        }
    }
    ensure(mean < 1.0, || format!("random mean F1 {mean}"))?;
    ensure((mean - expected).abs() < 0.05, || {
        format!("random mean {mean} far from exact {expected}")
    })?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "UQ F1 = 1 for q >= 0.20; random mean {mean:.4} (exact expectation {expected:.4}), {elapsed:.2?}"
    ))
}

fn monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = vec![0.0, 0.10, 0.25, 0.50, 0.75, 1.0];
    for f in 0..200 {
        let n = rng.random_range(2..120);
        let mut results = Vec::new();
        let mut truths = BTreeMap::new();
        for i in 0..n {
            let id = format!("m{i:03}");
            let truth = if rng.random_bool(0.3) {
                Label::Vulnerable
            } else {
                Label::Benign
            };
            let pred = if rng.random_bool(0.7) { truth } else { truth.flipped() };
            let conf = (rng.random_range(0..50) as f64) / 4.0;
            results.push(result(&id, pred, conf));
            truths.insert(id, truth);
        }
        let classified = BTreeMap::from([(StrategyTag::ZeroShot, results)]);
        let cfg = SimulationConfig {
            proportions: grid.clone(),
            samplers: vec![Sampler::Uq],
            seed: f,
            ..Default::default()
        };
        let report = run_simulation(&classified, &truths, &cfg).map_err(|e| e.to_string())?;
        let ms: Vec<_> = report.rows.iter().map(|r| r.metrics.expect("cell succeeds")).collect();
        for w in ms.windows(2) {
            ensure(w[1].f1_macro >= w[0].f1_macro && w[1].accuracy >= w[0].accuracy, || {
                format!("fixture {f}: {:?} -> {:?}", w[0], w[1])
            })?;
        }
    }
    Ok("200 fixtures, F1-macro and accuracy non-decreasing over {0,.1,.25,.5,.75,1}".into())
}

fn classify_all(corpus: &Corpus) -> Result<BTreeMap<StrategyTag, Vec<ClassificationResult>>, String> {
    let gw = Gateway::new(
        Arc::new(MockProvider::new(generate_fixture(corpus, &FixtureConfig::default()))),
        4,
    );
    let tags = [
        StrategyTag::ZeroShot,
        StrategyTag::FewShotCrossDomain,
        StrategyTag::FewShotInDomain,
    ];
    let out = classify_corpus(corpus, &tags, 0, None, None, &gw).map_err(|e| e.to_string())?;
    ensure(out.failures.is_empty(), || format!("{} failures", out.failures.len()))?;
    let mut grouped: BTreeMap<StrategyTag, Vec<ClassificationResult>> = BTreeMap::new();
    for r in out.results {
        grouped.entry(r.strategy).or_default().push(r);
    }
    Ok(grouped)
}

fn full_review_limit() -> Outcome {
    let corpus = generate_corpus(&SynthConfig {
        n_samples: 300,
        seed: 6,
        ..Default::default()
    });
    let classified = classify_all(&corpus)?;
    let cfg = SimulationConfig {
        proportions: vec![1.0],
        n_random_repeats: 3,
        ..Default::default()
    };
    let report = run_simulation(&classified, &corpus.truths().unwrap(), &cfg).map_err(|e| e.to_string())?;
    ensure(report.rows.len() == 6, || format!("{} rows", report.rows.len()))?;
    for r in &report.rows {
        let m = r.metrics.ok_or("missing metrics")?;
        ensure(m.f1_macro == 1.0 && m.accuracy == 1.0, || {
            format!("{} {}: {m:?}", r.strategy, r.sampler)
        })?;
    }
    Ok("3 strategies x 2 samplers all 1.0 at q = 1".into())
}

fn golden_sweep() -> Outcome {
    let start = Instant::now();
    let dir = golden_dir();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let results = tmp.path().join("results.jsonl");
    let sweep = tmp.path().join("sweep.csv");
    let bin = env!("CARGO_BIN_EXE_eitl-triage");
    let status = Command::new(bin)
        .args(["classify", "--strategy", "zero-shot", "--provider", "mock", "--input"])
        .arg(dir.join("corpus.jsonl"))
        .arg("--fixture")
        .arg(dir.join("fixture.jsonl"))
        .arg("--out")
        .arg(&results)
        .status()
        .map_err(|e| e.to_string())?;
    ensure(status.success(), || format!("classify exited {status}"))?;
    let status = Command::new(bin)
        .args(["simulate", "--results"])
        .arg(&results)
        .arg("--truths")
        .arg(dir.join("corpus.jsonl"))
        .arg("--out")
        .arg(&sweep)
        .status()
        .map_err(|e| e.to_string())?;
    ensure(status.success(), || format!("simulate exited {status}"))?;
    let got = fs::read(&sweep).map_err(|e| e.to_string())?;
    let want = fs::read(dir.join("sweep.csv")).map_err(|e| e.to_string())?;
    ensure(got == want, || "CSV differs from golden".into())?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("{} bytes byte-equal, {elapsed:.2?}", got.len()))
}

fn budget_arithmetic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for pair in 0..1000 {
        let n = rng.random_range(0..300);
        let mut q = [rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)];
        if pair % 10 == 0 {
            // Exact half-way points.
            q[0] = if n > 0 {
                (rng.random_range(0..n) as f64 + 0.5) / n as f64
            } else {
                0.5
            };
        }
        q.sort_by(f64::total_cmp);
        let results: Vec<ClassificationResult> = (0..n)
            .map(|i| result(&format!("b{i:03}"), Label::Benign, rng.random_range(0..20) as f64))
            .collect();
        let seed = rng.random::<u64>();
        let mut prev_uq = BTreeSet::new();
        let mut prev_rand = BTreeSet::new();
        for &qi in &q {
            let want = oracle::budget(n, qi);
            ensure(want == (qi * n as f64 + 0.5).floor() as usize, || {
                format!("oracle disagrees at n={n} q={qi}")
            })?;
            let uq = route_by_budget(&results, qi).map_err(|e| e.to_string())?;
            let rd = random_budget(&results, qi, seed).map_err(|e| e.to_string())?;
            ensure(uq.len() == want && rd.len() == want, || {
                format!("n={n} q={qi}: sizes {} / {} != {want}", uq.len(), rd.len())
            })?;
            ensure(prev_uq.is_subset(&uq) && prev_rand.is_subset(&rd), || {
                format!("n={n}: not nested at q={qi}")
            })?;
            prev_uq = uq;
            prev_rand = rd;
        }
    }
    Ok("1000 (N, q) pairs: sizes round half up, selections nested".into())
}

fn prompt_structure() -> Outcome {
    let corpus = generate_corpus(&SynthConfig {
        n_samples: 120,
        prevalence: 0.3,
        n_top25: 10,
        seed: 9,
        ..Default::default()
    });
    let vocab = LabelVocabulary::default();
    let mut prompts = 0;
    for seed in 0..100 {
        for tag in [StrategyTag::FewShotCrossDomain, StrategyTag::FewShotInDomain] {
            let plan = plan_classification(&corpus, &StrategySpec::new(tag, seed), None).map_err(|e| e.to_string())?;
            let eval: HashSet<&str> = plan.items.iter().map(|(s, _)| s.id()).collect();
            ensure(plan.held_out.iter().all(|id| !eval.contains(id.as_str())), || {
                format!("seed {seed}: held-out id evaluated")
            })?;
            for (sample, strategy) in &plan.items {
                let prompt = strategy.build(sample, &vocab).map_err(|e| e.to_string())?;
                prompts += 1;
                let exemplars = match strategy {
                    PromptStrategy::FewShotCrossDomain { exemplars } => {
                        ensure(prompt.exemplar_blocks() == 10, || {
                            format!("{} blocks", prompt.exemplar_blocks())
                        })?;
                        let v: Vec<_> = exemplars.iter().filter(|e| e.label == Label::Vulnerable).collect();
                        ensure(v.len() == 5 && exemplars.len() == 10, || "not 5 + 5".into())?;
                        let cwes: BTreeSet<_> = v.iter().flat_map(|e| e.cwe_ids.iter()).collect();
                        ensure(cwes.len() >= 3, || format!("only {} CWEs", cwes.len()))?;
                        exemplars.iter().collect::<Vec<_>>()
                    }
                    PromptStrategy::FewShotInDomain {
                        cwe,
                        vulnerable_example,
                        benign_example,
                    } => {
                        ensure(prompt.exemplar_blocks() == 2, || {
                            format!("{} blocks", prompt.exemplar_blocks())
                        })?;
                        ensure(vulnerable_example.cwe_ids.contains(cwe), || {
                            "vulnerable exemplar lacks CWE".into()
                        })?;
                        ensure(benign_example.label == Label::Benign, || {
                            "benign exemplar mislabeled".into()
                        })?;
                        vec![vulnerable_example, benign_example]
                    }
                    PromptStrategy::ZeroShot => return Err("unexpected zero-shot item".into()),
                };
                for e in exemplars {
                    ensure(!eval.contains(e.sample_id.as_str()), || {
                        format!("seed {seed}: exemplar {} is also evaluated", e.sample_id)
                    })?;
                }
            }
        }
    }
    Ok(format!(
        "100 selections per few-shot strategy, {prompts} prompts, no leakage"
    ))
}

fn ingest_round_trip() -> Outcome {
    let cfg = SynthConfig::default();
    let corpus = generate_corpus(&cfg);
    let stats = corpus_stats(&corpus);
    ensure(
        stats.samples == 1096 && stats.vulnerable == 110 && stats.distinct_cwes == 37,
        || format!("{stats:?}"),
    )?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = tmp.path().join("a.jsonl");
    let b = tmp.path().join("b.jsonl");
    write_corpus(&corpus, &a).map_err(|e| e.to_string())?;
    let loaded = load_corpus(&a).map_err(|e| e.to_string())?;
    write_corpus(&loaded, &b).map_err(|e| e.to_string())?;
    let again = load_corpus(&b).map_err(|e| e.to_string())?;
    ensure(
        loaded.digest() == corpus.digest() && again.digest() == corpus.digest(),
        || "digest drift".into(),
    )?;
    ensure(fs::read(&a).unwrap() == fs::read(&b).unwrap(), || {
        "rewritten bytes differ".into()
    })?;

    let top: HashSet<u32> = [
        79, 787, 89, 352, 22, 125, 78, 416, 862, 434, 94, 20, 77, 287, 269, 502, 200, 863, 918, 119, 476, 798, 190,
        400, 306,
    ]
    .into_iter()
    .collect();
    let mut want = BTreeSet::new();
    for line in fs::read_to_string(&a).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let in_top = v["cwes"].as_array().unwrap().iter().any(|c| {
            let n: u32 = c.as_str().unwrap()[4..].parse().unwrap();
            top.contains(&n)
        });
        if v["label"] == "benign" || in_top {
            want.insert(v["id"].as_str().unwrap().to_string());
        }
    }
    let filtered = filter_by_cwe(&loaded, &CweCatalog::top25_2024());
    let got: BTreeSet<String> = filtered.samples().iter().map(|s| s.id().to_string()).collect();
    ensure(got == want, || {
        format!("filter kept {} vs oracle {}", got.len(), want.len())
    })?;
    Ok(format!(
        "1096 samples / 110 vulnerable / 37 CWEs, digest stable; top-25 filter keeps {} = oracle",
        got.len()
    ))
}

fn service_state_machine() -> Outcome {
    let corpus = generate_corpus(&SynthConfig {
        n_samples: 150,
        seed: 11,
        ..Default::default()
    });
    let gw = Gateway::new(
        Arc::new(MockProvider::new(generate_fixture(&corpus, &FixtureConfig::default()))),
        4,
    );
    let svc = Arc::new(TriageService::in_memory().map_err(|e| e.to_string())?);
    let (run, _) = svc
        .create_run_with(
            &corpus,
            &StrategySpec::new(StrategyTag::ZeroShot, 0),
            None,
            Thresholds::new(1e6, 1e6).map_err(|e| e.to_string())?,
            &gw,
            serde_json::json!("mock"),
            None,
        )
        .map_err(|e| e.to_string())?;
    let queue = svc.next_pending(&run.run_id, 100).map_err(|e| e.to_string())?;
    ensure(queue.len() == 100, || format!("queue has {}", queue.len()))?;
    let mut handles = Vec::new();
    for rec in queue {
        let barrier = Arc::new(Barrier::new(2));
        for verdict in [Label::Vulnerable, Label::Benign] {
            let (svc, barrier, run_id, id) = (
                svc.clone(),
                barrier.clone(),
                run.run_id.clone(),
                rec.sample.id().to_string(),
            );
            handles.push(thread::spawn(move || {
                barrier.wait();
                let outcome = svc.submit_review(&run_id, &id, verdict, "racer");
                (id, outcome)
            }));
        }
    }
    let mut per_sample: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for h in handles {
        let (id, res) = h.join().map_err(|_| "thread panicked")?;
        let slot = per_sample.entry(id).or_default();
        match res {
            Ok(_) => slot.0 += 1,
            Err(ServiceError::AlreadyReviewed(_)) => slot.1 += 1,
            Err(e) => return Err(format!("unexpected error {e}")),
        }
    }
    ensure(
        per_sample.len() == 100 && per_sample.values().all(|&c| c == (1, 1)),
        || {
            format!(
                "outcomes {:?}",
                per_sample.values().filter(|c| **c != (1, 1)).collect::<Vec<_>>()
            )
        },
    )?;
    let restart = restart_after_kill()?;
    Ok(format!(
        "100 racing pairs: 1 success + 1 already-reviewed each; {restart}"
    ))
}

/// Creates a run through a served process, kills it without shutdown, and
/// reads the records back from a fresh process on the same store.
fn restart_after_kill() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus_path = tmp.path().join("corpus.jsonl");
    let fixture_path = tmp.path().join("fixture.jsonl");
    let store = tmp.path().join("triage.db");
    let corpus = generate_corpus(&SynthConfig {
        n_samples: 80,
        seed: 12,
        ..Default::default()
    });
    write_corpus(&corpus, &corpus_path).map_err(|e| e.to_string())?;
    fs::write(
        &fixture_path,
        generate_fixture(&corpus, &FixtureConfig::default()).to_jsonl(),
    )
    .map_err(|e| e.to_string())?;

    let start_server = || -> Result<(std::process::Child, String), String> {
        let mut child = Command::new(env!("CARGO_BIN_EXE_eitl-triage"))
            .args(["serve", "--port", "0", "--store"])
            .arg(&store)
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| e.to_string())?;
        let mut line = String::new();
        BufReader::new(child.stderr.take().unwrap())
            .read_line(&mut line)
            .map_err(|e| e.to_string())?;
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .ok_or(format!("banner {line:?}"))?
            .to_string();
        Ok((child, base))
    };
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();

    let (mut child, base) = start_server()?;
    let body = serde_json::json!({
        "corpus_ref": corpus_path,
        "strategy": {"tag": "zero-shot"},
        "thresholds": {"tau_vulnerable": 5.0, "tau_benign": 5.0},
        "provider": {"kind": "mock", "fixture": fixture_path},
    });
    let mut resp = agent
        .post(format!("{base}/api/v1/runs"))
        .header("content-type", "application/json")
        .send(body.to_string())
        .map_err(|e| e.to_string())?;
    ensure(resp.status().as_u16() == 201, || {
        format!("create returned {}", resp.status())
    })?;
    let desc: serde_json::Value = serde_json::from_str(&resp.body_mut().read_to_string().map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let run_id = desc["run_id"].as_str().ok_or("no run id")?.to_string();
    let before = agent
        .get(format!("{base}/api/v1/runs/{run_id}/records"))
        .call()
        .map_err(|e| e.to_string())?
        .body_mut()
        .read_to_string()
        .map_err(|e| e.to_string())?;
    child.kill().map_err(|e| e.to_string())?;
    child.wait().map_err(|e| e.to_string())?;

    let (mut child, base) = start_server()?;
    let after = agent
        .get(format!("{base}/api/v1/runs/{run_id}/records"))
        .call()
        .map_err(|e| e.to_string())?
        .body_mut()
        .read_to_string()
        .map_err(|e| e.to_string())?;
    let _ = child.kill();
    let _ = child.wait();
    let n = serde_json::from_str::<serde_json::Value>(&after)
        .map_err(|e| e.to_string())?
        .as_array()
        .map_or(0, |a| a.len());
    ensure(before == after && n == 80, || {
        format!("after restart: {n} records, identical = {}", before == after)
    })?;
    Ok(format!("after SIGKILL and restart all {n} records retained"))
}

fn exactly_one_call() -> Outcome {
    // One synthetic corpus split into 200 evaluated samples and a disjoint
    // 100-sample exemplar pool.
    let all = generate_corpus(&SynthConfig {
        n_samples: 300,
        prevalence: 0.2,
        seed: 13,
        ..Default::default()
    });
    let corpus = Corpus::new(all.samples()[..200].to_vec()).map_err(|e| e.to_string())?;
    let pool = Corpus::new(all.samples()[200..].to_vec()).map_err(|e| e.to_string())?;
    let fixture: Fixture = generate_fixture(&corpus, &FixtureConfig::default());

    let mock = Arc::new(MockProvider::new(fixture.clone()));
    let gw = Gateway::new(mock.clone(), 8);
    let svc = TriageService::in_memory().map_err(|e| e.to_string())?;
    let spec = StrategySpec::new(StrategyTag::ZeroShot, 0);
    let t = Thresholds::new(2.0, 2.0).map_err(|e| e.to_string())?;
    svc.create_run_with(&corpus, &spec, None, t, &gw, serde_json::json!("m"), None)
        .map_err(|e| e.to_string())?;
    ensure(mock.calls() == 200, || {
        format!("create_run made {} calls", mock.calls())
    })?;
    svc.create_run_with(&corpus, &spec, None, t, &gw, serde_json::json!("m"), None)
        .map_err(|e| e.to_string())?;
    ensure(mock.calls() == 200, || {
        format!("repeat create_run made {} calls", mock.calls() - 200)
    })?;

    let mock = Arc::new(MockProvider::new(fixture.clone()));
    let gw = Gateway::new(mock.clone(), 8);
    let out = classify_corpus(&corpus, &[StrategyTag::ZeroShot], 0, None, None, &gw).map_err(|e| e.to_string())?;
    ensure(mock.calls() == 200 && out.results.len() == 200, || {
        format!("classify made {} calls", mock.calls())
    })?;

    // Few-shot with a separate exemplar pool still evaluates every sample once.
    let mock = Arc::new(MockProvider::new(fixture));
    let gw = Gateway::new(mock.clone(), 8);
    classify_corpus(&corpus, &[StrategyTag::FewShotCrossDomain], 0, None, Some(&pool), &gw)
        .map_err(|e| e.to_string())?;
    ensure(mock.calls() == 200, || {
        format!("fs-cross with pool made {} calls", mock.calls())
    })?;
    Ok("create_run, idempotent repeat, classify and pooled fs-cross: calls == 200 == corpus size".into())
}

fn main() {
    let started = Instant::now();
    let criteria: [Criterion; 12] = [
        ("confidence and argmax match the sort-based oracle", eq1_oracle),
        ("confidence and argmax are shift invariant", shift_invariance),
        ("F1-macro and accuracy match confusion enumeration", metrics_oracle),
        ("perfect-separation fixture", perfect_separation),
        ("UQ sweep is monotone in the review proportion", monotonicity),
        ("full review with a perfect analyst is perfect", full_review_limit),
        ("golden sweep through classify + simulate", golden_sweep),
        ("budget size and nesting", budget_arithmetic),
        ("prompt structure and exemplar leakage", prompt_structure),
        ("ingest round trip and top-25 filter", ingest_round_trip),
        ("service review state machine and durability", service_state_machine),
        ("exactly one provider call per sample", exactly_one_call),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("PASS  {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL  {name}: panicked");
            }
        }
    }
    println!(
        "{} of {} criteria passed in {:.2?}",
        criteria.len() - failed,
        criteria.len(),
        started.elapsed()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
