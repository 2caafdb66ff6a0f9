mod common;

use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use common::*;
use ragforge::synth::{validate_export_line, ExportFormat};
use ragforge::workflow::{collapse_stream, StreamEvent, WorkflowTrace};
use serde_json::Value;

fn ragforge(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ragforge"))
        .arg("--ragforge-config")
        .arg(toy_dir().join("ragforge.toml"))
        .arg("--data-dir")
        .arg(data)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn setup(data: &Path) {
    let docs = toy_dir().join("docs");
    ok(&ragforge(data, &["kb", "ingest", "--kb", "toy", "--path", docs.to_str().unwrap(), "--chunk-size", "32", "--embedder", "bow-64"]));
    let built: Value = serde_json::from_str(&ok(&ragforge(data, &["kb", "build", "--kb", "toy", "--batch-size", "5"]))).unwrap();
    assert_eq!(built["n_chunks"], 22);
    assert_eq!(built["dim"], 64);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ragforge(dir.path(), &["run", "--query", "x"]).status.code(), Some(1));
    assert_eq!(ragforge(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(ragforge(dir.path(), &["search", "--kb", "toy"]).status.code(), Some(1));
    assert_eq!(ragforge(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = ragforge(dir.path(), &["run", "--kb", "ghost", "--query", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = ragforge(dir.path(), &["kb", "stat", "--kb", "ghost"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ingest_build_search_run_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path();
    setup(data);

    let stat: Value = serde_json::from_str(&ok(&ragforge(data, &["kb", "stat", "--kb", "toy"]))).unwrap();
    assert_eq!(stat["index_state"], "ready");
    assert_eq!(stat["n_documents"], 10);

    let hits: Vec<Value> = ok(&ragforge(data, &["search", "--kb", "toy", "--query", "When is a sale by auction complete?", "-k", "4"]))
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(hits.len(), 4);
    assert_eq!(hits[0]["chunk_id"], "auction#1");
    let approx = ok(&ragforge(data, &["search", "--kb", "toy", "--query", "auction", "--approx", "--n-probes", "5"]));
    assert_eq!(approx.lines().count(), 10);

    let vanilla: Value = serde_json::from_str(&ok(&ragforge(
        data,
        &["run", "--workflow-config", toy_dir().join("vanilla.toml").to_str().unwrap(), "--query", "When is a sale by auction complete?", "--run-id", "cli-v"],
    )))
    .unwrap();
    assert!(vanilla["final_answer"].as_str().unwrap().starts_with("Based on auction#1"));
    assert!(data.join("traces/cli-v.jsonl").is_file());

    let streamed = ok(&ragforge(
        data,
        &["run", "--workflow", "deepnote", "--kb", "toy", "-k", "3", "--query", "When is a sale by auction complete?", "--stream", "--run-id", "cli-d"],
    ));
    let events: Vec<StreamEvent> = streamed.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(matches!(events.last(), Some(StreamEvent::Done { run_id, .. }) if run_id == "cli-d"));
    let trace_text = std::fs::read_to_string(data.join("traces/cli-d.jsonl")).unwrap();
    let trace_events: Vec<ragforge::workflow::TraceEvent> =
        trace_text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(collapse_stream(&events), trace_events);

    let report: Value = serde_json::from_str(&ok(&ragforge(
        data,
        &["eval", "retrieval", "--kb", "toy", "--dataset", toy_dir().join("qa.jsonl").to_str().unwrap(), "-k", "10", "--run-id", "cli-e"],
    )))
    .unwrap();
    // recompute every metric from the reported rankings
    let qa = toy_qa();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), qa.len());
    let (mut mrr, mut ndcg, mut recall) = (0.0, 0.0, 0.0);
    for (row, ex) in rows.iter().zip(&qa) {
        assert_eq!(row["example_id"], ex.example_id);
        let ranked: Vec<&str> = row["ranked_chunk_ids"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        let gold: HashSet<&str> = ex.gold_chunk_ids.iter().map(String::as_str).collect();
        let rel: Vec<bool> = ranked.iter().take(10).map(|id| gold.contains(id)).collect();
        let rr = rel.iter().position(|r| *r).map_or(0.0, |p| 1.0 / (p as f64 + 1.0));
        let dcg: f64 = rel.iter().enumerate().filter(|(_, r)| **r).map(|(i, _)| 1.0 / (i as f64 + 2.0).log2()).sum();
        let idcg: f64 = (0..gold.len().min(10)).map(|i| 1.0 / (i as f64 + 2.0).log2()).sum();
        let rc = rel.iter().filter(|r| **r).count() as f64 / gold.len() as f64;
        assert!((row["metrics"]["mrr@10"].as_f64().unwrap() - rr).abs() < 1e-12);
        mrr += rr;
        ndcg += dcg / idcg;
        recall += rc;
    }
    let n = qa.len() as f64;
    assert!((report["metrics"]["mrr@10"].as_f64().unwrap() - mrr / n).abs() < 1e-12);
    assert!((report["metrics"]["ndcg@10"].as_f64().unwrap() - ndcg / n).abs() < 1e-12);
    assert!((report["metrics"]["recall@10"].as_f64().unwrap() - recall / n).abs() < 1e-12);

    let out_path = data.join("gen-report.json");
    let summary: Value = serde_json::from_str(&ok(&ragforge(
        data,
        &["eval", "generation", "--kb", "toy", "--dataset", toy_dir().join("qa.jsonl").to_str().unwrap(),
          "--workflow-config", toy_dir().join("deepnote.toml").to_str().unwrap(), "--metrics", "rouge_l,exact_match",
          "--out", out_path.to_str().unwrap()],
    )))
    .unwrap();
    let keys: Vec<&String> = summary["metrics"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["exact_match", "rouge_l"]);
    assert!(out_path.is_file());
}

#[test]
fn synth_commands_write_records_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path();
    setup(data);
    let synth = toy_dir().join("synth.toml");
    let s = synth.to_str().unwrap();
    let queries = data.join("queries.jsonl");
    let q_export = data.join("queries-export.jsonl");
    ok(&ragforge(data, &["synth", "queries", "--kb", "toy", "--config", s, "--out", queries.to_str().unwrap(), "--export", q_export.to_str().unwrap()]));
    let negatives = data.join("negatives.jsonl");
    let n_export = data.join("negatives-export.jsonl");
    ok(&ragforge(
        data,
        &["synth", "negatives", "--kb", "toy", "--config", s, "--input", queries.to_str().unwrap(),
          "--out", negatives.to_str().unwrap(), "--export", n_export.to_str().unwrap()],
    ));
    for line in std::fs::read_to_string(&n_export).unwrap().lines() {
        validate_export_line(line, ExportFormat::RetrievalJsonl).unwrap();
    }
    for line in std::fs::read_to_string(&negatives).unwrap().lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let pos: HashSet<&str> = v["positive_chunk_ids"].as_array().unwrap().iter().map(|x| x.as_str().unwrap()).collect();
        assert!(v["negative_chunk_ids"].as_array().unwrap().iter().all(|n| !pos.contains(n.as_str().unwrap())));
    }
    let ddr = data.join("ddr.jsonl");
    let d_export = data.join("ddr-export.jsonl");
    ok(&ragforge(
        data,
        &["synth", "ddr", "--kb", "toy", "--config", s, "--input", toy_dir().join("qa.jsonl").to_str().unwrap(),
          "--out", ddr.to_str().unwrap(), "--export", d_export.to_str().unwrap()],
    ));
    for line in std::fs::read_to_string(&d_export).unwrap().lines() {
        validate_export_line(line, ExportFormat::DpoJsonl).unwrap();
    }
    let sft = data.join("sft.jsonl");
    let s_export = data.join("sft-export.jsonl");
    let summary: Value = serde_json::from_str(&ok(&ragforge(
        data,
        &["synth", "kbalign", "--kb", "toy", "--config", s, "--out", sft.to_str().unwrap(), "--export", s_export.to_str().unwrap()],
    )))
    .unwrap();
    assert_eq!(summary["records"], 6);
    for line in std::fs::read_to_string(&s_export).unwrap().lines() {
        validate_export_line(line, ExportFormat::SftJsonl).unwrap();
    }
    // ddr requires --input
    assert_eq!(ragforge(data, &["synth", "ddr", "--kb", "toy", "--out", "x.jsonl"]).status.code(), Some(1));
}

#[test]
fn serve_reports_its_port() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_ragforge"))
        .args(["serve", "--port", "0", "--config"])
        .arg(toy_dir().join("ragforge.toml"))
        .arg("--data-dir")
        .arg(dir.path())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    assert!(first.starts_with("listening on http://127.0.0.1:"), "{first}");
    let port: u16 = lines.next().unwrap().unwrap().strip_prefix("port ").unwrap().parse().unwrap();
    assert_ne!(port, 0);
    let body = reqwest::blocking::get(format!("http://127.0.0.1:{port}/v1/health")).unwrap().text().unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(body, r#"{"status":"ok"}"#);
}

#[test]
fn persisted_trace_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path();
    setup(data);
    let v: Value = serde_json::from_str(&ok(&ragforge(data, &["run", "--kb", "toy", "--query", "How is a contract formed?", "--run-id", "rt"]))).unwrap();
    let trace: WorkflowTrace = serde_json::from_value(v["trace"].clone()).unwrap();
    let stored = ragforge::workflow::TraceStore::new(data.join("traces")).load("rt").unwrap();
    assert_eq!(stored, trace);
}
