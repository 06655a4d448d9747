//! Command-line behaviour: artifacts, error reporting and rerunnability.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use diatool::corpus::{parse_corpus, CorpusFormat};
use diatool::dialogue::{Message, Role};
use diatool::evaluation::{transcript_to_json, TranscriptLine};

fn diatool(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diatool"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn diatool")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = diatool(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("report on stdout")
}

fn err(dir: &Path, args: &[&str]) -> (i32, Value) {
    let out = diatool(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let e: Value = serde_json::from_slice(&out.stderr).expect("error JSON on stderr");
    (out.status.code().unwrap(), e)
}

fn bundled_corpus() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mini_corpus.json")
}

/// A scratch directory laid out like the repository root.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("data")).unwrap();
    fs::copy(bundled_corpus(), dir.path().join("data/mini_corpus.json")).unwrap();
    dir
}

#[test]
fn pair_with_default_config_on_bundled_corpus() {
    let ws = workspace();
    let report = ok(ws.path(), &["pair", "--config", "default"]);
    let dataset = fs::read_to_string(ws.path().join("out/dataset.jsonl")).unwrap();
    let build = &report["result"]["build"];
    assert_eq!(build["total"].as_u64().unwrap() as usize, dataset.lines().count());
    assert!(build["stats"]["tasks"]["hard"]["relevance"]["chosen_mean"].as_f64() == Some(1.0));
    assert!(ws.path().join("out/reports/pair.json").exists());
    assert_eq!(report["report"], "pair");
    assert_eq!(report["inputs"]["corpus"].as_str().unwrap().len(), 40);

    let (code, e) = err(ws.path(), &["pair"]);
    assert_eq!((code, e["error"].as_str().unwrap()), (1, "exists"));
    let again = ok(ws.path(), &["pair", "--force"]);
    assert_eq!(again, report);
    assert_eq!(fs::read_to_string(ws.path().join("out/dataset.jsonl")).unwrap(), dataset);

    let (_, e) = err(ws.path(), &["pair", "--force", "--strict"]);
    assert_eq!(e["error"], "pairing");
}

#[test]
fn bundled_corpus_regenerates_exactly() {
    let ws = tempfile::tempdir().unwrap();
    let out = ws.path().join("mini.json");
    ok(ws.path(), &["synth", "--n-easy", "60", "--n-hard", "60", "--seeds-only", out.to_str().unwrap()]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(bundled_corpus()).unwrap());
}

#[test]
fn ingest_classifies_and_reserializes() {
    let ws = workspace();
    let report = ok(ws.path(), &["ingest", "--out", "copy.jsonl"]);
    let r = &report["result"];
    assert_eq!(r["records"], 120);
    assert_eq!(r["valid"], 120);
    assert_eq!(r["type1_strata"]["easy"], 60);
    let copy = fs::read_to_string(ws.path().join("copy.jsonl")).unwrap();
    let original = fs::read_to_string(bundled_corpus()).unwrap();
    assert_eq!(
        parse_corpus(&copy, CorpusFormat::Jsonl).unwrap(),
        parse_corpus(&original, CorpusFormat::JsonArray).unwrap()
    );

    fs::write(ws.path().join("broken.jsonl"), "{\"messages\": [\n").unwrap();
    let (_, e) = err(ws.path(), &["ingest", "--corpus", "broken.jsonl"]);
    assert_eq!(e["error"], "corpus");
}

#[test]
fn errors_are_machine_readable() {
    let ws = tempfile::tempdir().unwrap();
    let (code, e) = err(ws.path(), &["stats", "--dataset", "missing.jsonl"]);
    assert_eq!((code, e["error"].as_str().unwrap()), (1, "io"));
    assert!(e["message"].as_str().unwrap().contains("missing.jsonl"));

    let (code, e) = err(ws.path(), &["pair", "--bogus"]);
    assert_eq!((code, e["error"].as_str().unwrap()), (2, "usage"));

    fs::write(ws.path().join("cfg.json"), r#"{"paths": {"dataset": "same", "reports": "same"}}"#).unwrap();
    let (_, e) = err(ws.path(), &["--config", "cfg.json", "gradcheck", "--pairs", "1"]);
    assert_eq!(e["error"], "config");

    let (_, e) = err(ws.path(), &["gradcheck", "--pairs", "20", "--tolerance", "1e-30"]);
    assert_eq!(e["error"], "gradcheck");
}

#[test]
fn config_file_and_seed_flag_are_resolved_into_reports() {
    let ws = tempfile::tempdir().unwrap();
    fs::write(ws.path().join("cfg.json"), r#"{"seed": 7, "train": {"epochs": 5}}"#).unwrap();
    let r = ok(ws.path(), &["--config", "cfg.json", "gradcheck", "--pairs", "10"]);
    assert_eq!(r["config"]["seed"], 7);
    let r = ok(ws.path(), &["--config", "cfg.json", "--seed", "9", "gradcheck", "--pairs", "10"]);
    assert_eq!(r["config"]["seed"], 9);
    assert!(r["result"]["summary"]["max_rel_error"].as_f64().unwrap() < 1e-6);
}

#[test]
fn train_eval_and_variants_on_mini_corpus() {
    let ws = workspace();
    let p = ws.path();
    ok(p, &["synth", "--out-dir", "syn"]);
    ok(p, &["pair"]);
    let stats = ok(p, &["stats"]);
    assert!(stats["result"]["pairs"].as_u64().unwrap() > 0);
    ok(p, &["sft", "--corpus", "syn/sft_corpus.jsonl", "--out", "sft.json"]);
    ok(p, &["sft", "--chat-prior", "--out", "chat.json"]);
    let a = ok(p, &["dpo-train", "--ref", "sft.json", "--out", "a.json", "--no-phi", "--no-psi", "--rho", "0"]);
    let b = ok(p, &["dpo-train", "--ref", "sft.json", "--out", "b.json", "--variant", "no-phi-psi-rho"]);
    assert_eq!(a["result"]["loss"], b["result"]["loss"]);
    assert_eq!(fs::read(p.join("a.json")).unwrap(), fs::read(p.join("b.json")).unwrap());
    let adam = ok(p, &["dpo-train", "--ref", "sft.json", "--init", "chat.json", "--out", "c.json", "--adam", "--epochs", "2"]);
    assert_eq!(adam["result"]["epochs"].as_array().unwrap().len(), 2);

    let (_, e) = err(p, &["dpo-train", "--ref", "sft.json", "--out", "d.json", "--no-phi", "--gamma", "1.5"]);
    assert_eq!(e["error"], "objective");

    let ev = ok(p, &["eval", "--policy", "a.json", "--benchmark", "syn/benchmark.jsonl", "--out", "eval.json"]);
    for key in ["Call", "Completion", "Slot", "Relevance", "Micro Avg.", "Macro Avg."] {
        let v = ev["result"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
}

fn transcripts(gold: &[diatool::dialogue::Trajectory], answer: impl Fn(&Message) -> Message) -> String {
    gold.iter()
        .map(|g| TranscriptLine {
            gold: g.clone(),
            predicted: g.messages.iter().filter(|m| m.role == Role::Assistant).map(&answer).collect(),
        })
        .map(|t| transcript_to_json(&t).to_string() + "\n")
        .collect()
}

#[test]
fn transcript_mode_judges_messages() {
    let ws = tempfile::tempdir().unwrap();
    let p = ws.path();
    ok(p, &["synth", "--out-dir", "syn"]);
    let bench = parse_corpus(&fs::read_to_string(p.join("syn/benchmark.jsonl")).unwrap(), CorpusFormat::Jsonl).unwrap();
    let bench = &bench[..40];

    fs::write(p.join("gold.jsonl"), transcripts(bench, |m| m.clone())).unwrap();
    let r = ok(p, &["eval", "--transcripts", "gold.jsonl"]);
    assert_eq!(r["result"]["Macro Avg."], 1.0);

    fs::write(p.join("refuse.jsonl"), transcripts(bench, |_| Message::assistant("Sorry, I cannot help with that."))).unwrap();
    let r = ok(p, &["eval", "--transcripts", "refuse.jsonl"]);
    assert_eq!(r["result"]["Call"], 0.0);
    assert_eq!(r["result"]["Relevance"], 1.0);
}

#[test]
fn score_matches_across_precisions() {
    let ws = tempfile::tempdir().unwrap();
    let p = ws.path();
    fs::write(
        p.join("lr.jsonl"),
        "{\"pair_id\":\"a\",\"chosen\":[0.5,0.1],\"rejected\":[-0.2]}\n{\"pair_id\":\"b\",\"chosen\":[0.0],\"rejected\":[0.0,0.0,0.0]}\n",
    )
    .unwrap();
    ok(p, &["score", "--log-ratios", "lr.jsonl", "--out", "s64.jsonl"]);
    ok(p, &["score", "--log-ratios", "lr.jsonl", "--out", "s32.jsonl", "--f32"]);
    let read = |n: &str| -> Vec<Value> {
        fs::read_to_string(p.join(n)).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    };
    let (a, b) = (read("s64.jsonl"), read("s32.jsonl"));
    // s_c = 0.3·0.5 + 0.2·0.1, s_r = −0.1, ρ = 2.
    assert!((a[0]["margin"].as_f64().unwrap() + 1.73).abs() < 1e-12);
    assert!((a[1]["loss"].as_f64().unwrap() - (1.0 + 2f64.exp()).ln()).abs() < 1e-12);
    for (x, y) in a.iter().zip(&b) {
        assert!((x["loss"].as_f64().unwrap() - y["loss"].as_f64().unwrap()).abs() < 1e-6);
    }
}
