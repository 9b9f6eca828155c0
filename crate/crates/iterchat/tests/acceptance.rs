//! Acceptance checks. Prints one PASS/FAIL line per check and exits non-zero
//! if any check fails.

use std::collections::BTreeSet;
use std::net::TcpListener;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use iterchat::jsonl::to_jsonl_string;
use iterchat::pipeline;
use iterchat_core::dataset::{explode, replay, DialogueTurn, MultiTurnDialogue};
use iterchat_core::extractor::{
    build_prompt, count_user_lines, extract_dialogue_iterative, input_section, trajectory_states, DemoExample,
    PromptInput, EXAMPLE_HEADING,
};
use iterchat_core::metrics::{bleu1, evaluate_corpus, fed, Gold, Prediction};
use iterchat_core::prompts::PromptSet;
use iterchat_core::sampler::{check_generated, sample_dialogue, SamplerConfig};
use iterchat_core::{
    apply_gain, diff_states, parse_schema, ApplyMode, ExtractionMode, ParseStatus, PreferenceSchema, PreferenceState,
    SlotDefinition, TemplateBackend,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn hotel() -> PreferenceSchema {
    parse_schema(include_str!("fixtures/hotel.json")).unwrap()
}

fn sampler_config(seed: u64, record_count: usize) -> SamplerConfig {
    let mut config: SamplerConfig = serde_json::from_str(include_str!("fixtures/sampler.json")).unwrap();
    config.seed = seed;
    config.record_count = record_count;
    config
}

const SLOTS: usize = 10;
const VALUES: [&str; 6] = ["red", "blue", "green", "less than $50", "acme", "None"];

fn ten_slot_schema() -> PreferenceSchema {
    let slots =
        (0..SLOTS).map(|i| SlotDefinition::closed(&format!("slot{i}"), "test slot", i % 3 != 0, &VALUES)).collect();
    PreferenceSchema::new("test", "1", slots).unwrap()
}

fn random_state(rng: &mut impl Rng) -> PreferenceState {
    let mut state = PreferenceState::new();
    for i in 0..SLOTS {
        if rng.random_bool(0.5) {
            continue;
        }
        let count = if i % 3 == 0 { 1 } else { rng.random_range(1..=3) };
        let values: BTreeSet<&str> = (0..count).map(|_| VALUES[rng.random_range(0..VALUES.len())]).collect();
        let values: Vec<&str> = values.into_iter().collect();
        state.add_values(&format!("slot{i}"), &values);
    }
    state
}

fn synthetic_dialogues(count: usize, seed: u64) -> Result<Vec<MultiTurnDialogue>, String> {
    let schema = hotel();
    let config = sampler_config(seed, 1);
    let prompts = PromptSet::default();
    let mut rng = StdRng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let turns = rng.random_range(5..=10);
            sample_dialogue(&schema, &config, &TemplateBackend, &prompts, &format!("syn{i:04}"), turns, &mut rng)
                .map_err(|e| format!("dialogue {i}: {e}"))
        })
        .collect()
}

fn decomposition_identity() -> Outcome {
    let schema = hotel();
    let prompts = PromptSet::default();
    let dialogues = synthetic_dialogues(120, 11)?;
    let mut turns = 0;
    for d in &dialogues {
        ensure!((5..=10).contains(&d.turns.len()), "{} has {} turns", d.dialogue_id, d.turns.len());
        let results = extract_dialogue_iterative(d, &schema, &[], &TemplateBackend, &prompts)
            .map_err(|e| format!("{}: {e}", d.dialogue_id))?;
        let predicted = trajectory_states(&results);
        for (t, (pred, turn)) in predicted.iter().zip(&d.turns).enumerate() {
            let gold = turn.gold_state.as_ref().ok_or("unlabeled turn")?;
            ensure!(
                pred == gold,
                "{} turn {}: predicted {} gold {}",
                d.dialogue_id,
                t + 1,
                pred.canonicalize(),
                gold.canonicalize()
            );
        }
        turns += d.turns.len();
    }
    Ok(format!("{} dialogues, {turns} turns reproduced", dialogues.len()))
}

fn apply_diff_round_trip() -> Outcome {
    let schema = ten_slot_schema();
    let mut rng = StdRng::seed_from_u64(2);
    let mut failures = 0;
    for _ in 0..10_000 {
        let (old, new) = (random_state(&mut rng), random_state(&mut rng));
        for (slot, values) in new.iter() {
            ensure!(
                schema.validate_assignment(slot, values).valid,
                "generated state outside schema: {}",
                new.canonicalize()
            );
        }
        if apply_gain(&old, &diff_states(&old, &new), ApplyMode::Strict).as_ref() != Ok(&new) {
            failures += 1;
        }
    }
    ensure!(failures == 0, "{failures} of 10000 pairs failed");
    Ok("10000 pairs, 0 failures".into())
}

fn explode_replay_identity() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let mut records_checked = 0;
    for i in 0..1000 {
        let turns = (0..rng.random_range(1..=10))
            .map(|_| DialogueTurn::new("How can I help?", "I would like that.", Some(random_state(&mut rng))))
            .collect();
        let dialogue = MultiTurnDialogue { dialogue_id: format!("d{i}"), domain_name: "test".into(), turns };
        let records = explode(&dialogue).map_err(|e| format!("d{i}: {e}"))?;
        for r in &records {
            r.check_labels(ApplyMode::Strict).map_err(|e| format!("{}: {e}", r.record_id))?;
        }
        let replayed = replay(&records).map_err(|e| format!("d{i}: {e}"))?;
        ensure!(Some(&replayed) == dialogue.final_state(), "d{i}: replay differs from final gold state");
        records_checked += records.len();
    }
    Ok(format!("1000 dialogues, {records_checked} records strict-consistent"))
}

fn naive_distance(a: &[&str], b: &[&str]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = naive_distance(ra, rb) + usize::from(x != y);
            sub.min(naive_distance(ra, b) + 1).min(naive_distance(a, rb) + 1)
        }
    }
}

fn brute_force_micro(pairs: &[(PreferenceState, PreferenceState)]) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in pairs {
        for slot in (0..SLOTS).map(|i| format!("slot{i}")) {
            for v in VALUES {
                match (p.contains(&slot, v), g.contains(&slot, v)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
        }
    }
    let precision = match (tp + fp, fn_) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (n, _) => tp as f64 / n as f64,
    };
    let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    (precision, recall, f1)
}

fn metric_oracles() -> Outcome {
    const WORDS: [&str; 5] = ["red", "blue", "price", "=", ";"];
    let mut rng = StdRng::seed_from_u64(4);
    for i in 0..10_000 {
        let mut seq =
            || -> Vec<&str> { (0..rng.random_range(0..=8)).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect() };
        let (a, b) = (seq(), seq());
        let expected = naive_distance(&a, &b);
        let got = fed(&a.join(" "), &b.join(" "));
        ensure!(got == expected, "pair {i}: fed {got} != oracle {expected} for {a:?} / {b:?}");
    }

    let bp = |c: f64, r: f64| if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    let cases: [(&[&str], &[&str], f64); 6] = [
        (&["i", "like", "red"], &["i", "like", "red", "wine"], bp(3.0, 4.0)),
        (&["i", "like", "red"], &["i", "like", "red"], 1.0),
        (&["red", "red", "red"], &["red", "blue"], 1.0 / 3.0),
        (&["a", "b", "c", "d"], &["a", "b"], 2.0 / 4.0),
        (&["x", "y"], &["a", "b", "c"], 0.0),
        (&["a", "b"], &["b", "a", "a", "c"], bp(2.0, 4.0)),
    ];
    for (cand, reference, expected) in cases {
        let got = bleu1(cand, reference).map_err(|e| e.to_string())?;
        ensure!((got - expected).abs() < 1e-9, "bleu1({cand:?}, {reference:?}) = {got}, expected {expected}");
    }
    let headline = bleu1(&["i", "like", "red"], &["i", "like", "red", "wine"]).unwrap();
    ensure!((headline - 0.7165313105737893).abs() < 1e-9, "headline case {headline}");

    for c in 0..1000 {
        let pairs: Vec<_> =
            (0..rng.random_range(1..=8)).map(|_| (random_state(&mut rng), random_state(&mut rng))).collect();
        let preds: Vec<Prediction> = pairs
            .iter()
            .enumerate()
            .map(|(i, (p, _))| Prediction { record_id: i.to_string(), state: p.clone(), parse_status: ParseStatus::Ok })
            .collect();
        let golds: Vec<Gold> =
            pairs.iter().enumerate().map(|(i, (_, g))| Gold { record_id: i.to_string(), state: g.clone() }).collect();
        let corpus = evaluate_corpus(&preds, &golds).map_err(|e| e.to_string())?.corpus;
        let expected = brute_force_micro(&pairs);
        ensure!(
            (corpus.micro_precision, corpus.micro_recall, corpus.micro_f1) == expected,
            "corpus {c}: got ({}, {}, {}) expected {expected:?}",
            corpus.micro_precision,
            corpus.micro_recall,
            corpus.micro_f1
        );
    }
    Ok(format!("10000 FED pairs exact, BLEU-1 headline {headline:.10}, 1000 micro-F1 corpora exact"))
}

fn sampler_validity_and_determinism() -> Outcome {
    let schema = hotel();
    let config = sampler_config(7, 1000);
    let prompts = PromptSet::default();
    let run = |jobs| {
        pipeline::generate(&schema, &config, &TemplateBackend, &prompts, jobs)
            .map(|(records, _)| records)
            .map_err(|e| e.to_string())
    };
    let first = run(1)?;
    ensure!(first.len() == 1000, "generated {} records", first.len());
    for r in &first {
        check_generated(r, &schema)?;
    }
    let (a, b) = (to_jsonl_string(&first), to_jsonl_string(&run(4)?));
    ensure!(a == b, "two runs under seed 7 differ");
    Ok(format!("1000 valid records, identical runs ({} bytes)", a.len()))
}

fn prompt_fidelity() -> Outcome {
    let schema = hotel();
    let prompts = PromptSet::default();
    let (records, _) = pipeline::generate(&schema, &sampler_config(5, 60), &TemplateBackend, &prompts, 1)
        .map_err(|e| e.to_string())?;
    let demos: Vec<DemoExample> =
        records[..2].iter().map(DemoExample::from_record).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    for r in &records[2..] {
        let messages =
            build_prompt(ExtractionMode::IterChat, &schema, &demos, PromptInput::Record(&r.unlabeled()), &prompts)
                .map_err(|e| e.to_string())?;
        let user = &messages[1].content;
        ensure!(user.matches(EXAMPLE_HEADING).count() == 2, "{}: expected 2 demonstrations", r.record_id);
        let input = input_section(user);
        ensure!(count_user_lines(input) == 1, "{}: {} user turns in input", r.record_id, count_user_lines(input));
        let history = serde_json::to_string(&r.history_preference).unwrap();
        ensure!(input.contains(&format!("History Preference: {history}")), "{}: history not serialized", r.record_id);
        let gain = serde_json::to_string(r.state_gain.as_ref().unwrap()).unwrap();
        ensure!(!input.contains(&gain), "{}: label leaked into input", r.record_id);
    }

    let dialogues = synthetic_dialogues(40, 6)?;
    let demos: Vec<DemoExample> =
        dialogues[..2].iter().map(DemoExample::from_dialogue).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    for d in &dialogues[2..] {
        let messages = build_prompt(ExtractionMode::MultiTurn, &schema, &demos, PromptInput::Dialogue(d), &prompts)
            .map_err(|e| e.to_string())?;
        let user = &messages[1].content;
        ensure!(user.matches(EXAMPLE_HEADING).count() == 2, "{}: expected 2 demonstrations", d.dialogue_id);
        let input = input_section(user);
        ensure!(
            count_user_lines(input) == d.turns.len(),
            "{}: {} of {} turns",
            d.dialogue_id,
            count_user_lines(input),
            d.turns.len()
        );
        for t in &d.turns {
            ensure!(input.contains(t.user_utterance.trim()), "{}: missing turn {:?}", d.dialogue_id, t.user_utterance);
        }
        ensure!(!input.contains("History Preference"), "{}: multi-turn input carries history", d.dialogue_id);
    }
    Ok(format!(
        "{} iterchat prompts with 1 turn, {} multi-turn prompts with all turns, K=2",
        records.len() - 2,
        dialogues.len() - 2
    ))
}

struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(schema: &Path, journal: &Path) -> Result<Self, String> {
        let port = TcpListener::bind("127.0.0.1:0").and_then(|l| l.local_addr()).map_err(|e| e.to_string())?.port();
        let child = Command::new(env!("CARGO_BIN_EXE_iterchat"))
            .args(["serve", "--schema", schema.to_str().unwrap(), "--journal", journal.to_str().unwrap()])
            .args(["--addr", &format!("127.0.0.1:{port}")])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let server = Server { child, base: format!("http://127.0.0.1:{port}") };
        let deadline = Instant::now() + Duration::from_secs(15);
        while Instant::now() < deadline {
            if reqwest::blocking::get(format!("{}/api/schema", server.base)).is_ok_and(|r| r.status().is_success()) {
                return Ok(server);
            }
            thread::sleep(Duration::from_millis(50));
        }
        Err("server did not come up".into())
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn get(&self, path: &str) -> Result<Value, String> {
        reqwest::blocking::get(self.url(path)).and_then(|r| r.json()).map_err(|e| e.to_string())
    }

    fn post(&self, path: &str, body: Value) -> Result<(u16, Value), String> {
        let response =
            reqwest::blocking::Client::new().post(self.url(path)).json(&body).send().map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        Ok((status, response.json().map_err(|e| e.to_string())?))
    }

    fn upload(&self, dataset_id: &str, records: &str) -> Result<(), String> {
        let response = reqwest::blocking::Client::new()
            .post(self.url(&format!("/api/datasets?dataset_id={dataset_id}")))
            .body(records.to_string())
            .send()
            .map_err(|e| e.to_string())?;
        ensure!(response.status().as_u16() == 201, "upload returned {}", response.status());
        Ok(())
    }

    /// Every task view plus stats, as served.
    fn snapshot(&self) -> Result<Value, String> {
        let mut tasks = Vec::new();
        for ds in self.get("/api/datasets")?.as_array().ok_or("datasets not a list")? {
            let id = ds["dataset_id"].as_str().ok_or("dataset id")?;
            for n in 1..=ds["task_count"].as_u64().ok_or("task count")? {
                tasks.push(self.get(&format!("/api/tasks/{id}-{n:05}"))?);
            }
        }
        Ok(json!({ "tasks": tasks, "stats": self.get("/api/stats")? }))
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn service_durability() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let schema = fixture("hotel.json");
    let (records, _) = pipeline::generate(&hotel(), &sampler_config(9, 20), &TemplateBackend, &PromptSet::default(), 1)
        .map_err(|e| e.to_string())?;
    let journal = dir.path().join("journal.jsonl");

    let server = Server::start(&schema, &journal)?;
    server.upload("batch", &to_jsonl_string(&records))?;
    let mut submitted = 0;
    for i in 0..14 {
        let annotator = format!("annotator-{}", i % 3);
        let (_, body) = server.post("/api/tasks/lease", json!({ "annotator_id": annotator }))?;
        let task = &body["task"];
        if i >= 11 {
            continue;
        }
        let gain = task["record"]["state_gain"].clone();
        let (status, outcome) = server.post(
            &format!("/api/tasks/{}/submit", task["task_id"].as_str().ok_or("task id")?),
            json!({ "annotator_id": annotator, "state_gain": gain }),
        )?;
        ensure!(status == 200, "submit returned {status}: {outcome}");
        submitted += 1;
    }
    let before = server.snapshot()?;
    server.kill();

    let server = Server::start(&schema, &journal)?;
    let after = server.snapshot()?;
    ensure!(before == after, "state after restart differs");
    ensure!(
        after["stats"]["overall"]["completed"] == submitted,
        "completed count {}",
        after["stats"]["overall"]["completed"]
    );
    server.kill();

    let server = Server::start(&schema, &dir.path().join("contended.jsonl"))?;
    server.upload("single", &to_jsonl_string(&records[..1]))?;
    let barrier = Arc::new(Barrier::new(32));
    let url = server.url("/api/tasks/lease");
    let handles: Vec<_> = (0..32)
        .map(|i| {
            let (barrier, url) = (barrier.clone(), url.clone());
            thread::spawn(move || -> Result<bool, String> {
                let client = reqwest::blocking::Client::new();
                barrier.wait();
                let body: Value = client
                    .post(&url)
                    .json(&json!({ "annotator_id": format!("racer-{i}") }))
                    .send()
                    .and_then(|r| r.json())
                    .map_err(|e| e.to_string())?;
                Ok(!body["task"].is_null())
            })
        })
        .collect();
    let mut granted = 0;
    for h in handles {
        granted += usize::from(h.join().map_err(|_| "lease thread panicked")??);
    }
    ensure!(granted == 1, "{granted} of 32 concurrent leases granted");
    Ok(format!("{} tasks identical after SIGKILL restart, 1 of 32 concurrent leases granted", records.len()))
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let run = |args: &[&str]| -> Result<String, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_iterchat")).args(args).output().map_err(|e| e.to_string())?;
        ensure!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    };
    let (schema, data, pred) = (path("schema.json"), path("data.jsonl"), path("pred.jsonl"));
    let config = fixture("sampler.json");
    run(&["schema", "draft", "--domain", "shopping", "--backend", "template", "--out", &schema])?;
    run(&[
        "--seed",
        "7",
        "generate",
        "--schema",
        &schema,
        "--config",
        config.to_str().unwrap(),
        "--count",
        "200",
        "--out",
        &data,
    ])?;
    run(&[
        "--jobs",
        "4",
        "extract",
        "--schema",
        &schema,
        "--in",
        &data,
        "--backend",
        "echo",
        "--k",
        "2",
        "--demos",
        &data,
        "--out",
        &pred,
    ])?;
    let report: Value =
        serde_json::from_str(&run(&["eval", "--pred", &pred, "--gold", &data])?).map_err(|e| e.to_string())?;
    let corpus = &report["corpus"];
    ensure!(corpus["record_count"] == 200, "scored {} records", corpus["record_count"]);
    ensure!(corpus["em_rate"] == 1.0, "em_rate {}", corpus["em_rate"]);
    ensure!(corpus["mean_fed"] == 0.0, "mean_fed {}", corpus["mean_fed"]);
    Ok("200 records, em_rate 1.0, mean_fed 0.0".into())
}

struct Check {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let checks = [
        Check { name: "decomposition identity", budget: Some(Duration::from_secs(10)), run: decomposition_identity },
        Check { name: "apply/diff round trip", budget: Some(Duration::from_secs(5)), run: apply_diff_round_trip },
        Check { name: "explode/replay identity", budget: None, run: explode_replay_identity },
        Check { name: "metric oracles", budget: None, run: metric_oracles },
        Check { name: "sampler validity and determinism", budget: None, run: sampler_validity_and_determinism },
        Check { name: "few-shot prompt fidelity", budget: None, run: prompt_fidelity },
        Check { name: "service durability", budget: None, run: service_durability },
        Check { name: "end-to-end dry run", budget: Some(Duration::from_secs(30)), run: end_to_end },
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for check in &checks {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check.run)).unwrap_or_else(|p| {
            Err(format!(
                "panicked: {}",
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ))
        });
        let elapsed = started.elapsed();
        let outcome = match (outcome, check.budget) {
            (Ok(_), Some(budget)) if elapsed > budget => Err(format!("took {elapsed:.2?}, budget {budget:?}")),
            (outcome, _) => outcome,
        };
        match outcome {
            Ok(detail) => println!("PASS  {:<34} {detail} ({elapsed:.2?})", check.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {:<34} {detail} ({elapsed:.2?})", check.name);
            }
        }
    }
    println!("{} of {} acceptance checks passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
