//! Acceptance checks, one line per criterion. Criterion 9 talks to a real
//! endpoint and only runs when RELMINE_LIVE_ENDPOINT is set; it never fails
//! the suite.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use relmine::decision::{self, DecisionCase, VerifiedCandidate, THETA_GRID};
use relmine::grouping::{balanced_sizes, default_group_count, group_relations_traced, SimilarityMatrix};
use relmine::llm::{decode_response, Backend, CompletionParams, RemoteBackend, RemoteConfig};
use relmine::metrics::{special_avg_f1, EvalPair};
use relmine::pipeline::{balance_na, run_corpus, LabeledSample, Mode, Provenance, RunSettings};
use relmine::prompt::PromptTemplates;
use relmine::schema::load_corpus;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn sizes_profile(groups: &[Vec<String>]) -> Vec<usize> {
    let mut s: Vec<usize> = groups.iter().map(Vec::len).collect();
    s.sort_unstable();
    s
}

fn criterion_1() -> Outcome {
    let t = tacred();
    ensure!(t.total_labels() == 42, "tacred has {} labels", t.total_labels());
    let g = auto_groups(&t);
    ensure!(g.k == 7, "tacred k = {}", g.k);
    ensure!(sizes_profile(&g.groups) == [5, 6, 6, 6, 6, 6, 6], "tacred sizes {:?}", sizes_profile(&g.groups));
    g.check_against(&t).map_err(|e| e.to_string())?;
    let s = semeval();
    ensure!(s.total_labels() == 19, "semeval has {} labels", s.total_labels());
    let g = auto_groups(&s);
    ensure!(g.k == 3 && sizes_profile(&g.groups) == [6, 6, 6], "semeval k = {}, sizes {:?}", g.k, sizes_profile(&g.groups));
    ensure!(default_group_count(5) == 1, "floor clamp");
    Ok("TACRED k=7 sizes 6x6+5, SemEval k=3 sizes 3x6".into())
}

fn random_similarity(n: usize, rng: &mut ChaCha8Rng) -> SimilarityMatrix {
    let mut rows = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            // coarse values create ties
            let v = (rng.random_range(0..=20) as f64) / 20.0;
            rows[i][j] = v;
            rows[j][i] = v;
        }
    }
    SimilarityMatrix::from_rows(rows).unwrap()
}

fn criterion_2() -> Outcome {
    let m = SimilarityMatrix::from_rows(vec![
        vec![1.0, 0.9, 0.1, 0.4],
        vec![0.9, 1.0, 0.3, 0.2],
        vec![0.1, 0.3, 1.0, 0.8],
        vec![0.4, 0.2, 0.8, 1.0],
    ])
    .unwrap();
    let abcd: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
    let (g, _) = group_relations_traced(&m, &abcd, 2).map_err(|e| e.to_string())?;
    let as_sets: BTreeSet<BTreeSet<String>> = g.groups.iter().map(|x| x.iter().cloned().collect()).collect();
    let want: BTreeSet<BTreeSet<String>> = [vec!["A", "D"], vec!["B", "C"]]
        .iter()
        .map(|x| x.iter().map(|s| s.to_string()).collect())
        .collect();
    ensure!(as_sets == want, "hand trace gave {:?}", g.groups);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let s = random_similarity(8, &mut rng);
        let names: Vec<String> = (0..8).map(|i| format!("r{i}")).collect();
        let (_, trace) = group_relations_traced(&s, &names, 3).map_err(|e| e.to_string())?;
        let (a, b) = (trace.seeds.0, trace.seeds.1.ok_or("no second seed")?);
        let best = (0..8)
            .flat_map(|i| (i + 1..8).map(move |j| (i, j)))
            .map(|(i, j)| 1.0 - s.get(i, j))
            .fold(f64::MIN, f64::max);
        ensure!(1.0 - s.get(a, b) == best, "seeds ({a},{b}) do not maximize 1 - S");
    }

    for _ in 0..1000 {
        let n = rng.random_range(1..=30);
        let k = rng.random_range(1..=n);
        let s = random_similarity(n, &mut rng);
        let names: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
        let (g, _) = group_relations_traced(&s, &names, k).map_err(|e| e.to_string())?;
        let mut all: Vec<&String> = g.groups.iter().flatten().collect();
        all.sort();
        all.dedup();
        ensure!(all.len() == n && g.groups.iter().map(Vec::len).sum::<usize>() == n, "not a partition (n={n}, k={k})");
        let mut want = balanced_sizes(n, k);
        want.sort_unstable();
        let big = n.div_ceil(k);
        let expected_big = n % k;
        let got = sizes_profile(&g.groups);
        ensure!(got == want, "sizes {got:?} (n={n}, k={k})");
        if expected_big > 0 {
            ensure!(got.iter().filter(|&&x| x == big).count() == expected_big, "wrong number of large groups");
        }
    }
    Ok("hand trace {A,D},{B,C}; 100 seed checks; 1000 partition/balance checks".into())
}

/// Independent statement of the three-case rule.
fn oracle(cands: &[VerifiedCandidate], theta: f64, na: &str) -> Option<(DecisionCase, Vec<String>)> {
    let yes: Vec<&VerifiedCandidate> = cands.iter().filter(|c| c.affirmed).collect();
    if yes.is_empty() {
        return Some((DecisionCase::WithoutYes, vec![na.to_string()]));
    }
    if yes.len() == 1 {
        return Some((DecisionCase::SingleYes, vec![yes[0].relation.clone()]));
    }
    let mut kept: Vec<(f64, String)> = yes
        .iter()
        .filter(|c| c.confidence >= 1.0 - theta)
        .map(|c| (c.confidence, c.relation.clone()))
        .collect();
    if kept.is_empty() {
        return None;
    }
    kept.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    Some((DecisionCase::MultiYes, kept.into_iter().map(|(_, r)| r).collect()))
}

fn random_candidates(rng: &mut ChaCha8Rng) -> Vec<VerifiedCandidate> {
    const CONF: [f64; 8] = [0.85, 0.9, 0.95, 0.98, 0.99, 0.995, 0.999, 1.0];
    let n = rng.random_range(0..=6);
    let mut names: Vec<usize> = (0..8).collect();
    (0..n)
        .map(|_| {
            let idx = names.remove(rng.random_range(0..names.len()));
            let confidence = if rng.random_bool(0.5) {
                CONF[rng.random_range(0..CONF.len())]
            } else {
                rng.random_range(0.5..=1.0)
            };
            VerifiedCandidate {
                relation: format!("rel{idx}"),
                affirmed: rng.random_bool(0.6),
                confidence,
                group_index: None,
            }
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut compared = 0;
    let mut multi = 0;
    for _ in 0..10_000 {
        let cands = random_candidates(&mut rng);
        let mut previous: Option<BTreeSet<String>> = None;
        for &theta in &THETA_GRID {
            let d = decision::decide(&cands, theta, "NA").map_err(|e| e.to_string())?;
            match oracle(&cands, theta, "NA") {
                Some((case, labels)) => {
                    ensure!(d.case == case && d.labels == labels && !d.fallback, "mismatch at theta {theta}: {cands:?} -> {d:?}");
                    compared += 1;
                    multi += (case == DecisionCase::MultiYes) as usize;
                }
                None => ensure!(d.fallback && d.labels.len() == 1, "expected fallback: {d:?}"),
            }
            if d.case == DecisionCase::MultiYes {
                let confident: BTreeSet<String> = if d.fallback { BTreeSet::new() } else { d.labels.iter().cloned().collect() };
                if let Some(prev) = &previous {
                    ensure!(prev.is_subset(&confident), "retained set shrank as theta grew: {prev:?} -> {confident:?}");
                }
                previous = Some(confident);
            }
        }
    }
    Ok(format!("{compared} oracle comparisons ({multi} multi-Yes), monotone over the grid"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let tokens = rng.random_range(1..=20);
        let mut content = Vec::new();
        let mut direct = 0.0;
        for _ in 0..tokens {
            let alts = rng.random_range(1..=5);
            let lps: Vec<f64> = (0..alts).map(|_| -rng.random_range(0.0..8.0f64)).collect();
            let sampled = lps[rng.random_range(0..alts)];
            direct += lps.iter().cloned().fold(f64::MIN, f64::max).exp();
            let top: Vec<serde_json::Value> = lps.iter().map(|lp| serde_json::json!({"token": "t", "logprob": lp})).collect();
            content.push(serde_json::json!({"token": "t", "logprob": sampled, "top_logprobs": top}));
        }
        direct /= tokens as f64;
        let body = serde_json::json!({
            "choices": [{"message": {"content": "x"}, "finish_reason": "stop", "logprobs": {"content": content}}]
        });
        let resp = decode_response(&body.to_string()).map_err(|e| e.to_string())?;
        let c = decision::confidence(&resp).map_err(|e| e.to_string())?;
        ensure!((c - direct).abs() <= 1e-12, "confidence {c} vs direct {direct}");
        ensure!(c > 0.0 && c <= 1.0, "confidence {c} outside (0, 1]");
    }
    Ok("1000 wire responses within 1e-12 of direct evaluation".into())
}

fn criterion_5() -> Outcome {
    let examples = [
        (EvalPair::new(["A"], ["A"]), 1.0),
        (EvalPair::new(["A", "B"], ["A"]), 2.0 / 3.0),
        (EvalPair::new(["B"], ["A"]), 1e-10),
    ];
    for (pair, want) in &examples {
        let got = special_avg_f1(std::slice::from_ref(pair)).map_err(|e| e.to_string())?;
        ensure!(got == *want, "{pair:?}: {got} != {want}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels = ["L0", "L1", "L2", "L3", "L4", "L5"];
    let mut pairs = Vec::new();
    let mut brute = Vec::new();
    let mut floors = 0;
    for _ in 0..1000 {
        let pm: u32 = rng.random_range(0..64);
        let rm: u32 = rng.random_range(1..64);
        let pick = |m: u32| labels.iter().enumerate().filter(|(i, _)| m >> i & 1 == 1).map(|(_, l)| *l).collect::<Vec<_>>();
        pairs.push(EvalPair::new(pick(pm), pick(rm)));
        let inter = (pm & rm).count_ones() as f64;
        let f = if inter == 0.0 {
            floors += 1;
            1e-10
        } else {
            let p = inter / pm.count_ones() as f64;
            let r = inter / rm.count_ones() as f64;
            2.0 * p * r / (p + r)
        };
        let one = special_avg_f1(std::slice::from_ref(pairs.last().unwrap())).map_err(|e| e.to_string())?;
        ensure!((one - f).abs() < 1e-15, "pred mask {pm:b} ref mask {rm:b}: {one} vs {f}");
        brute.push(f);
    }
    let mean = brute.iter().sum::<f64>() / brute.len() as f64;
    let got = special_avg_f1(&pairs).map_err(|e| e.to_string())?;
    ensure!((got - mean).abs() < 1e-12, "mean {got} vs {mean}");
    Ok(format!("worked examples exact; 1000 random pairs ({floors} floor cases) match"))
}

fn run_mock(mode: Mode, script: Vec<(relmine::llm::MockKey, relmine::llm::MockReply)>) -> Result<relmine::pipeline::RunStats, String> {
    let schema = tacred();
    let groups = auto_groups(&schema);
    let backend = mock(script);
    let settings = RunSettings {
        mode,
        ..Default::default()
    };
    let out = run_corpus(&[sentence("s")], &schema, Some(&groups).filter(|_| mode == Mode::Mbre), &PromptTemplates::builtin(), &backend, &settings)
        .map_err(|e| e.to_string())?;
    ensure!(out.stats.records == 1 && out.stats.failures.is_empty(), "run failed: {:?}", out.stats.failures);
    Ok(out.stats)
}

fn criterion_6() -> Outcome {
    let schema = tacred();
    let n = schema.total_labels();
    let multi_only = run_mock(Mode::Multi, vec![multi_all("s", "per:title")])?;
    ensure!(multi_only.calls_total == 1 && multi_only.calls_multi == 1, "multi mode made {} calls", multi_only.calls_total);
    let binary_only = run_mock(Mode::Binary, all_binary_script("s", &schema, &[("per:title", 0.99)]))?;
    ensure!(binary_only.calls_total == 41 && binary_only.calls_binary == 41, "binary mode made {} calls", binary_only.calls_total);
    let groups = auto_groups(&schema);
    let worst = run_mock(Mode::Mbre, worst_case_mbre_script("s", &groups))?;
    let typical_mbre = run_mock(
        Mode::Mbre,
        (0..groups.k).map(|g| multi("s", g, if g == 0 { &groups.groups[0][0] } else { "no_relation" })).chain([binary("s", &groups.groups[0][0], true, 0.99)]).collect(),
    )?;
    ensure!(worst.calls_multi == 7 && worst.calls_total == 14, "worst-case mbre made {} calls", worst.calls_total);
    ensure!(typical_mbre.calls_total == 8, "typical mbre made {} calls", typical_mbre.calls_total);
    let bound = 2 * (n / 6);
    ensure!(worst.calls_total as usize <= bound && bound * 3 <= n, "bound 2*floor(N/6) = {bound} vs N = {n}");
    let reduction = 1.0 - worst.calls_total as f64 / binary_only.calls_total as f64;
    ensure!(reduction >= 0.65, "reduction {reduction}");
    Ok(format!("calls per pair: multi 1, binary 41, mbre worst 14 / typical 8 ({:.1}% fewer than binary)", reduction * 100.0))
}

fn relmine_bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_relmine"))
        .args(args)
        .env_remove("RELMINE_ENDPOINT")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "relmine {:?} failed: {}", args, String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn criterion_7() -> Outcome {
    let data = data_dir().join("mbre10");
    let corpus = data.join("corpus.jsonl").display().to_string();
    let script = data.join("script.jsonl").display().to_string();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |d: &Path, f: &str| d.join(f).display().to_string();
    let mut outputs = Vec::new();
    for (i, workers) in ["1", "4", "1", "4"].iter().enumerate() {
        let dir = tmp.path().join(format!("run{i}"));
        fs::create_dir(&dir).map_err(|e| e.to_string())?;
        relmine_bin(&[
            "run", "--mode", "mbre", "--schema", "bundled:semeval", "--corpus", &corpus, "--mock-script", &script,
            "--run-id", "mbre10", "--max-parallel", workers, "--out-dataset", &p(&dir, "data.jsonl"),
            "--out-trace", &p(&dir, "trace.jsonl"), "--out-stats", &p(&dir, "stats.json"),
        ])?;
        let read = |f: &str| fs::read(dir.join(f)).map_err(|e| e.to_string());
        outputs.push((read("data.jsonl")?, read("trace.jsonl")?, read("stats.json")?));
    }
    ensure!(outputs.iter().all(|o| *o == outputs[0]), "outputs differ between runs or worker counts");
    let golden = fs::read(data.join("expected_dataset.jsonl")).map_err(|e| e.to_string())?;
    ensure!(outputs[0].0 == golden, "dataset differs from the golden file");

    let sweep = tmp.path().join("sweep");
    let grid = THETA_GRID.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",");
    relmine_bin(&[
        "sweep-theta", "--trace", &p(&tmp.path().join("run0"), "trace.jsonl"), "--grid", &grid, "--schema",
        "bundled:semeval", "--out-dir", &sweep.display().to_string(),
    ])?;
    let reports = fs::read_dir(&sweep)
        .map_err(|e| e.to_string())?
        .filter(|e| e.as_ref().is_ok_and(|e| e.file_name().to_string_lossy().starts_with("theta_")))
        .count();
    ensure!(reports == 5, "{reports} sweep reports");
    Ok("dataset/trace/stats identical over 4 runs (workers 1 and 4), golden match, 5 sweep reports with no backend".into())
}

fn criterion_8() -> Outcome {
    let mk = |i: usize, r: &str| LabeledSample {
        sentence_id: format!("s{i}"),
        sentence: "A met B.".into(),
        head: "A".into(),
        tail: "B".into(),
        relation: r.into(),
        provenance: Provenance {
            run_id: "x".into(),
            mode: Mode::Mbre,
            theta: 0.01,
            model: "m".into(),
            case: DecisionCase::SingleYes,
        },
    };
    let mut samples = Vec::new();
    for i in 0..16 {
        samples.push(mk(i, if i < 4 { "r1" } else if i < 6 { "r2" } else { "NA" }));
    }
    let a = balance_na(&samples, "NA", &mut ChaCha8Rng::seed_from_u64(8));
    let b = balance_na(&samples, "NA", &mut ChaCha8Rng::seed_from_u64(8));
    let non_na = a.iter().filter(|s| s.relation != "NA").count();
    let na = a.len() - non_na;
    ensure!(non_na == 6 && na == 3, "{non_na} non-NA + {na} NA");
    ensure!(a == b, "seeded selection not stable");
    Ok("6 non-NA + 3 NA, stable under a fixed seed".into())
}

fn criterion_9() -> Result<Option<String>, String> {
    let Ok(endpoint) = std::env::var("RELMINE_LIVE_ENDPOINT") else {
        return Ok(None);
    };
    let mut cfg = RemoteConfig::new(endpoint);
    cfg.api_key = std::env::var("RELMINE_API_KEY").ok();
    cfg.max_in_flight = 4;
    let backend = RemoteBackend::new(cfg);
    let params = CompletionParams {
        model: std::env::var("RELMINE_LIVE_MODEL").unwrap_or_else(|_| "default".into()),
        ..Default::default()
    };
    let schema = semeval();
    let groups = auto_groups(&schema);
    let corpus: Vec<_> = load_corpus(data_dir().join("mbre10/corpus.jsonl"))
        .map_err(|e| e.to_string())?
        .into_iter()
        .filter(|s| s.id != "s07")
        .take(5)
        .collect();
    let settings = RunSettings {
        params,
        workers: 4,
        ..Default::default()
    };
    let started = Instant::now();
    let out = run_corpus(&corpus, &schema, Some(&groups), &PromptTemplates::builtin(), &backend as &dyn Backend, &settings)
        .map_err(|e| e.to_string())?;
    ensure!(out.stats.failures.is_empty(), "failures: {:?}", out.stats.failures);
    for r in &out.records {
        for c in r.group_candidates.iter().filter_map(|g| g.confidence).chain(r.verified.iter().map(|v| v.confidence)) {
            ensure!(c > 0.0 && c <= 1.0, "confidence {c}");
        }
    }
    Ok(Some(format!(
        "{} records, {} calls, {} malformed, {:.1}s",
        out.records.len(),
        out.stats.calls_total,
        out.stats.malformed_responses,
        started.elapsed().as_secs_f64()
    )))
}

fn run(n: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
    let ms = started.elapsed().as_millis();
    match result {
        Ok(detail) => {
            println!("criterion {n} [{name}]: PASS ({detail}; {ms} ms)");
            true
        }
        Err(e) => {
            println!("criterion {n} [{name}]: FAIL ({e})");
            false
        }
    }
}

fn main() {
    let checks: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "group-count rule", criterion_1),
        (2, "grouping algorithm", criterion_2),
        (3, "decision oracle", criterion_3),
        (4, "confidence formula", criterion_4),
        (5, "special average F1", criterion_5),
        (6, "call accounting", criterion_6),
        (7, "end-to-end determinism", criterion_7),
        (8, "NA balancing", criterion_8),
    ];
    let mut failed = 0;
    for (n, name, f) in checks {
        if !run(n, name, f) {
            failed += 1;
        }
    }
    match panic::catch_unwind(criterion_9).unwrap_or_else(|_| Err("panicked".into())) {
        Ok(None) => println!("criterion 9 [live endpoint]: SKIP (set RELMINE_LIVE_ENDPOINT to run; non-gating)"),
        Ok(Some(detail)) => println!("criterion 9 [live endpoint]: PASS ({detail})"),
        Err(e) => println!("criterion 9 [live endpoint]: FAIL, non-gating ({e})"),
    }
    println!("acceptance: {} of 8 gating criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
