mod common;

use std::process::Command;

use common::*;
use persona_refinery::prompts::{bindings, PromptRegistry, TemplateId};
use persona_refinery::simworld::ReleaseRate;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_persona-refinery"));
    c.env("RUST_LOG", "error");
    c
}

#[test]
fn render_prompt_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.json");
    std::fs::write(
        &path,
        r#"{"persona":"You are Ann.","content":"Topic: tea.\nPosition: pro"}"#,
    )
    .unwrap();
    let out = bin()
        .args(["render-prompt", "--template", "instr_debate", "--bindings"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let expected = PromptRegistry::builtin()
        .render(
            TemplateId::InstrDebate,
            &bindings([
                ("persona", "You are Ann."),
                ("content", "Topic: tea.\nPosition: pro"),
            ]),
        )
        .unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), expected);

    std::fs::write(&path, r#"{"content":"x"}"#).unwrap();
    let out = bin()
        .args(["render-prompt", "--template", "instr_debate", "--bindings"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("persona"));
}

#[test]
fn validate_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_dataset(dir.path(), "good.jsonl", &sim_records(2, 1));
    let out = bin()
        .args(["validate", "--scenario", "debate", "--dataset"])
        .arg(&good)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("2 valid records"));

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        "{\"id\":\"a\",\"scenario\":\"debate\",\"content\":\"\",\"ground_truth\":\"x\"}\n",
    )
    .unwrap();
    let out = bin()
        .args(["validate", "--scenario", "debate", "--dataset"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("content"));
}

#[test]
fn run_resume_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path(), "d.jsonl", &sim_records(3, 9));
    let m = sim_manifest(dir.path(), &data, ReleaseRate::Limited(2), 2);
    let manifest = dir.path().join("manifest.json");
    std::fs::write(&manifest, serde_json::to_string_pretty(&m).unwrap()).unwrap();

    let out = bin()
        .args(["run", "--manifest"])
        .arg(&manifest)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("3 completed"));

    let out = bin()
        .args(["run", "--manifest"])
        .arg(&manifest)
        .output()
        .unwrap();
    assert!(
        !out.status.success(),
        "fresh run must not overwrite a journal"
    );

    let out = bin()
        .args(["run", "--resume", "--manifest"])
        .arg(&manifest)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 entries written"));

    let report = dir.path().join("report");
    let out = bin()
        .args(["aggregate", "--out"])
        .arg(&report)
        .arg("--journal")
        .arg(&m.journal_path)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(report.join("comparison.tsv").exists());
    assert!(report.join("curve_debate_structured.tsv").exists());
}
