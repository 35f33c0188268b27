use std::path::Path;
use std::process::{Command, Output};

use exbank_core::ab::{AbReport, EvaluatorRecord};
use serde_json::Value;

fn exbank(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exbank"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn exbank")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = exbank(args, cwd);
    assert!(out.status.success(), "exbank {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &Path) {
    ok(&["synth", "--out", "corpus.jsonl", "--per-language", "40", "--seed", "3"], dir);
    ok(&["ingest", "--corpus", "corpus.jsonl", "--holdout", "fa=10,it=10", "--out", "split"], dir);
    ok(&["build-bank", "--split", "split", "--provider", "hashed:d=128", "--out", "bank.bin"], dir);
}

fn first_test_id(dir: &Path) -> String {
    let line = std::fs::read_to_string(dir.join("split/test.jsonl")).unwrap();
    let v: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    v["article_id"].as_str().unwrap().to_string()
}

#[test]
fn ingest_writes_split_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    for f in [
        "master.jsonl",
        "bank.jsonl",
        "test.jsonl",
        "annotations.jsonl",
        "static.jsonl",
        "test_ids.json",
        "split.json",
        "pipeline_report.txt",
    ] {
        assert!(dir.join("split").join(f).exists(), "{f} missing");
    }
    let ids: Vec<String> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("split/test_ids.json")).unwrap()).unwrap();
    assert_eq!(ids.len(), 20);
}

#[test]
fn retrieve_and_render_use_the_bank() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let id = first_test_id(dir);
    let hits = ok(&["retrieve", "--bank", "bank.bin", "--split", "split", "--query-id", &id, "--k", "2"], dir);
    assert_eq!(hits.lines().count(), 2);
    assert!(!hits.contains(&format!("\t{id}\t")));

    let m1 = ok(
        &["render", "--condition", "M1", "--article-id", &id, "--split", "split", "--bank", "bank.bin", "--k", "2"],
        dir,
    );
    let a1 = ok(
        &["render", "--condition", "A1", "--article-id", &id, "--split", "split", "--bank", "bank.bin", "--k", "2"],
        dir,
    );
    let exemplars = |s: &str| s.lines().find(|l| l.starts_with("# exemplars:")).unwrap().to_string();
    assert_eq!(exemplars(&m1), exemplars(&a1));
    assert_ne!(m1, a1);

    let b0 = ok(&["render", "--condition", "B0", "--article-id", &id, "--split", "split"], dir);
    assert!(b0.contains("# exemplars: -"));
    let missing = exbank(&["render", "--condition", "A1", "--article-id", &id, "--split", "split"], dir);
    assert!(!missing.status.success());
}

#[test]
fn run_evaluate_and_ab_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    ok(&["run", "--split", "split", "--bank", "bank.bin", "--out", "run", "--k", "2"], dir);
    ok(&["evaluate", "--run", "run", "--split", "split", "--out", "eval"], dir);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 16);
    assert!(std::fs::read_to_string(dir.join("eval/report.md")).unwrap().contains("| A1 |"));

    ok(&["assignments", "--split", "split", "--evaluators", "fa=2,it=5", "--run", "run", "--out", "ab"], dir);
    // fill every questionnaire, preferring whichever side is on the right
    let export = std::fs::read_to_string(dir.join("ab/rating_export.jsonl")).unwrap();
    let mut filled = String::new();
    for line in export.lines() {
        let mut v: Value = serde_json::from_str(line).unwrap();
        v["scores_left"] = serde_json::json!({"overall": 2, "grounding": 2, "cultural_nuance": 2, "nongeneric": 2});
        v["scores_right"] = serde_json::json!({"overall": 3, "grounding": 3, "cultural_nuance": 3, "nongeneric": 3});
        serde_json::from_value::<EvaluatorRecord>(v.clone()).unwrap();
        filled.push_str(&v.to_string());
        filled.push('\n');
    }
    std::fs::write(dir.join("ratings.jsonl"), filled).unwrap();
    ok(&["ab-report", "--ratings", "ratings.jsonl", "--provenance", "ab/provenance.jsonl", "--out", "ab.json"], dir);
    let report: AbReport = serde_json::from_str(&std::fs::read_to_string(dir.join("ab.json")).unwrap()).unwrap();
    let json = serde_json::to_value(&report).unwrap();
    assert!(json.to_string().contains("\"B1\"") && json.to_string().contains("\"M1\""));

    ok(
        &[
            "evaluate",
            "--run",
            "run",
            "--split",
            "split",
            "--out",
            "eval2",
            "--ratings",
            "ratings.jsonl",
            "--provenance",
            "ab/provenance.jsonl",
        ],
        dir,
    );
    let full: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("eval2/report.json")).unwrap()).unwrap();
    assert!(full.get("ab").is_some());
}

#[test]
fn indivisible_assignment_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let out = exbank(&["assignments", "--split", "split", "--evaluators", "fa=3,it=5", "--out", "ab"], dir);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fa"));
}

#[test]
fn prepare_curation_fills_a_data_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    ok(&["run", "--split", "split", "--bank", "bank.bin", "--out", "run", "--conditions", "A1", "--k", "2"], dir);
    ok(&["prepare-curation", "--data", "data", "--split", "split", "--bank", "bank.bin", "--run", "run"], dir);
    let data = dir.join("data");
    assert!(data.join("server.toml").exists());
    assert!(data.join("bank/CURRENT").exists());
    assert_eq!(std::fs::read_to_string(data.join("queue.jsonl")).unwrap().lines().count(), 20);
    // the template parses as a server config once tokens are added
    let config = std::fs::read_to_string(data.join("server.toml")).unwrap();
    exbank_server::ServerConfig::parse(&config).unwrap();
}

#[test]
fn delimited_corpus_with_format_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut csv = String::from("id,doc,lang,body,tag,sev,spans,why,who,gender\n");
    for i in 0..6 {
        let lang = if i % 2 == 0 { "fa" } else { "it" };
        csv.push_str(&format!(
            "r{i},a{i},{lang},words for article {i},Problematic,high,words||article,because {i},ann{i},F\n"
        ));
    }
    std::fs::write(dir.join("corpus.csv"), csv).unwrap();
    std::fs::write(
        dir.join("format.toml"),
        r#"layout = "delimited"
meta_fields = ["gender"]
[fields]
record_id = "id"
article_id = "doc"
language = "lang"
article_text = "body"
label = "tag"
severity = "sev"
span_text = "spans"
rationale = "why"
annotator_id = "who"
"#,
    )
    .unwrap();
    let out = ok(
        &["ingest", "--corpus", "corpus.csv", "--format", "format.toml", "--holdout", "fa=1,it=1", "--out", "split"],
        dir,
    );
    assert!(out.contains("6 total, 6 kept"), "{out}");
    let master = std::fs::read_to_string(dir.join("split/master.jsonl")).unwrap();
    assert_eq!(master.lines().count(), 6);
    assert!(master.contains("\"gender\":\"F\""));
}
