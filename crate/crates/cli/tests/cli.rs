//! End-to-end CLI checks against the built binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_relsynth"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn bench_synth_eval_audit_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let bench = tmp.path().join("bench");
    let out1 = tmp.path().join("run1");
    let out2 = tmp.path().join("run2");

    assert_ok(&run(&[
        "bench",
        "--profile",
        "two_cluster_households",
        "--size",
        "300",
        "--seed",
        "5",
        "--out",
        bench.to_str().unwrap(),
    ]));
    assert!(bench.join("schema.toml").exists());
    assert!(bench.join("data/person.csv").exists());
    assert!(bench.join("planted.json").exists());

    let schema = bench.join("schema.toml");
    let data = bench.join("data");
    let synth_args = |out: &Path| {
        vec![
            "synth".to_string(),
            "--schema".to_string(),
            schema.display().to_string(),
            "--data".to_string(),
            data.display().to_string(),
            "--out".to_string(),
            out.display().to_string(),
            "--epsilon".to_string(),
            "3.2".to_string(),
            "--seed".to_string(),
            "7".to_string(),
        ]
    };
    let o1 = bin().args(synth_args(&out1)).output().unwrap();
    assert_ok(&o1);
    let o2 = bin().args(synth_args(&out2)).output().unwrap();
    assert_ok(&o2);

    // Determinism contract: identical flags and seed give byte-identical trees.
    assert_eq!(read_tree(&out1), read_tree(&out2));

    // Ground truth against itself: mean relative error is exactly zero.
    let eval = run(&[
        "eval",
        "--schema",
        schema.to_str().unwrap(),
        "--truth",
        data.to_str().unwrap(),
        "--synth",
        data.to_str().unwrap(),
        "--queries",
        "50",
        "--seed",
        "3",
    ]);
    assert_ok(&eval);
    let text = String::from_utf8_lossy(&eval.stdout);
    assert!(text.contains(": 0.000000"), "self-eval not zero: {text}");

    // Audit: reported totals stay within the budget and match the closed form.
    let audit = run(&[
        "audit",
        "--ledger",
        out1.join("bundle").to_str().unwrap(),
    ]);
    assert_ok(&audit);
    let text = String::from_utf8_lossy(&audit.stdout);
    assert!(text.contains("within budget"), "{text}");
    assert!(text.contains("closed-form total"), "{text}");

    // Eval report file is written when requested.
    let report = tmp.path().join("report.json");
    assert_ok(&run(&[
        "eval",
        "--schema",
        schema.to_str().unwrap(),
        "--truth",
        data.to_str().unwrap(),
        "--synth",
        out1.join("synthetic").to_str().unwrap(),
        "--queries",
        "20",
        "--seed",
        "3",
        "--out",
        report.to_str().unwrap(),
    ]));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["queries"], 20);
}

#[test]
fn errors_are_single_line_and_categorized() {
    let out = run(&[
        "synth",
        "--schema",
        "/nonexistent/schema.toml",
        "--data",
        "/nonexistent",
        "--out",
        "/tmp/never",
        "--epsilon",
        "1.0",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    assert!(lines[0].starts_with("error:io:"), "stderr: {stderr}");

    let out = run(&["bench", "--profile", "bogus", "--out", "/tmp/never"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:args:"), "stderr: {stderr}");
}

#[test]
fn bad_schema_reports_schema_category() {
    let tmp = tempfile::tempdir().unwrap();
    let schema = tmp.path().join("schema.toml");
    // Cyclic FK graph.
    std::fs::write(
        &schema,
        r#"
[[relation]]
name = "a"
privacy_class = "primary_private"
primary_key = "id"

[[relation.attribute]]
name = "x"
domain_size = 2

[[relation.foreign_key]]
column = "b_id"
references = "b"
max_multiplicity = 2

[[relation]]
name = "b"
privacy_class = "secondary_private"
primary_key = "id"

[[relation.attribute]]
name = "x"
domain_size = 2

[[relation.foreign_key]]
column = "a_id"
references = "a"
max_multiplicity = 2
"#,
    )
    .unwrap();
    let out = run(&[
        "synth",
        "--schema",
        schema.to_str().unwrap(),
        "--data",
        tmp.path().to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
        "--epsilon",
        "1.0",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:schema:"), "stderr: {stderr}");
}
