// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::{tempdir, TempDir};

fn seka(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seka"))
        .args(args)
        .env("SEKA_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = seka(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempdir().unwrap();
        std::fs::write(
            dir.path().join("model.json"),
            r#"{"n_layers":2,"n_query_heads":4,"n_kv_heads":2,"d_model":32,"d_k":8,"max_seq":96,"seed":3}"#,
        )
        .unwrap();
        std::fs::write(
            dir.path().join("prompts.txt"),
            "Context: The **ferry captain** counted passengers at noon.\nQuestion: Who counted?\n\nno highlights in this one\n",
        )
        .unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Samples, bank and selection.
    fn bank(&self) {
        ok(&["gen-data", "--n", "12", "--seed", "5", "--out", s(&self.p("samples.json"))]);
        ok(&[
            "learn-bank", "--model", s(&self.p("model.json")), "--samples", s(&self.p("samples.json")),
            "--gamma", "0.9", "--out", s(&self.p("bank.json")),
        ]);
        ok(&["select-heads", "--bank", s(&self.p("bank.json")), "--delta-min", "0", "--out", s(&self.p("sel.json"))]);
    }

    fn seka_args<'a>(&'a self, g_pos: &'a str, g_neg: &'a str) -> Vec<String> {
        [
            "--model", s(&self.p("model.json")), "--bank", s(&self.p("bank.json")),
            "--selection", s(&self.p("sel.json")), "--g-pos", g_pos, "--g-neg", g_neg,
        ]
        .iter()
        .map(|x| x.to_string())
        .collect()
    }
}

#[test]
fn gen_data_is_deterministic() {
    let f = Fixture::new();
    ok(&["gen-data", "--n", "7", "--seed", "9", "--out", s(&f.p("a.json"))]);
    ok(&["gen-data", "--n", "7", "--seed", "9", "--out", s(&f.p("b.json"))]);
    ok(&["gen-data", "--n", "7", "--seed", "10", "--out", s(&f.p("c.json"))]);
    let read = |n| std::fs::read(f.p(n)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    assert_ne!(read("a.json"), read("c.json"));
}

#[test]
fn full_pipeline() {
    let f = Fixture::new();
    f.bank();

    let mut args = vec!["steer".to_string()];
    args.extend(f.seka_args("1.5", "-0.5"));
    args.extend(["--prompt-file".into(), s(&f.p("prompts.txt")).into(), "--top".into(), "3".into()]);
    let out = ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.contains("prompt 0:"));
    assert!(out.contains("mass baseline"));
    assert_eq!(out.matches("next id").count(), 3);
    assert!(out.contains("no highlighted tokens; skipped"));

    let samples: serde_json::Value = serde_json::from_slice(&std::fs::read(f.p("samples.json")).unwrap()).unwrap();
    let s0 = &samples["samples"][0];
    let dataset = serde_json::json!({
        "name": "qa",
        "pairs": [{
            "neutral_prompt": format!("Context: {}", s0["context1"].as_str().unwrap()),
            "positive_prompt": format!("Question: {}\nContext: {}", s0["question1"].as_str().unwrap(), s0["context1"].as_str().unwrap()),
            "span_texts": [s0["answer1"]],
        }],
    });
    std::fs::write(f.p("dataset.json"), dataset.to_string()).unwrap();
    for name in ["first", "second"] {
        ok(&[
            "learn-expert", "--model", s(&f.p("model.json")), "--dataset", s(&f.p("dataset.json")),
            "--name", name, "--K", "2", "--bank", s(&f.p("experts.json")),
        ]);
    }
    let bank: serde_json::Value = serde_json::from_slice(&std::fs::read(f.p("experts.json")).unwrap()).unwrap();
    assert_eq!(bank.to_string().matches("\"first\"").count(), 1);
    assert_eq!(bank.to_string().matches("\"second\"").count(), 1);

    let out = ok(&[
        "route", "--model", s(&f.p("model.json")), "--expert-bank", s(&f.p("experts.json")),
        "--selection", s(&f.p("sel.json")), "--g", "-0.25", "--prompt-file", s(&f.p("prompts.txt")),
    ]);
    assert!(out.contains("mass baseline"));

    let out = ok(&[
        "verify", "--model", s(&f.p("model.json")), "--bank", s(&f.p("bank.json")),
        "--expert-bank", s(&f.p("experts.json")), "--suite", "all",
    ]);
    assert!(out.contains("all invariants hold"));
    ok(&["verify", "--model", s(&f.p("model.json")), "--bank", s(&f.p("bank.json")), "--suite", "routing"]);

    ok(&["export-heatmap", "--bank", s(&f.p("bank.json")), "--out", s(&f.p("heat.csv"))]);
    assert_eq!(std::fs::read_to_string(f.p("heat.csv")).unwrap().lines().count(), 5);
    ok(&[
        "export-pca", "--model", s(&f.p("model.json")), "--samples", s(&f.p("samples.json")),
        "--layer", "1", "--kv-head", "0", "--out", s(&f.p("pca.csv")),
    ]);
    assert!(std::fs::read_to_string(f.p("pca.csv")).unwrap().contains("MEAN_SHIFT"));

    let mut args = vec!["bench".to_string()];
    args.extend(f.seka_args("1", "0"));
    args.extend(["--prompt-file".into(), s(&f.p("prompts.txt")).into(), "--repeat".into(), "1".into()]);
    let out = ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.contains("overhead"));
}

#[test]
fn zero_gain_steering_leaves_mass_unchanged() {
    let f = Fixture::new();
    f.bank();
    let mut args = vec!["steer".to_string()];
    args.extend(f.seka_args("0", "0"));
    args.extend(["--prompt-file".into(), s(&f.p("prompts.txt")).into()]);
    let out = ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let line = out.lines().find(|l| l.contains("mass baseline")).unwrap();
    let nums: Vec<&str> = line.split_whitespace().filter(|w| w.parse::<f64>().is_ok()).collect();
    assert_eq!(nums.len(), 2);
    assert_eq!(nums[0], nums[1]);
    for l in out.lines().filter(|l| l.trim_start().starts_with("layer ")) {
        for cell in l.split_whitespace().filter(|w| w.contains("->")) {
            let (a, b) = cell.split_once("->").unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn usage_errors() {
    let out = seka(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("usage"));
    assert_eq!(seka(&["gen-data", "--n", "3"]).status.code(), Some(2));
    assert_eq!(seka(&["--help"]).status.code(), Some(0));

    let f = Fixture::new();
    assert_eq!(seka(&["gen-data", "--n", "0", "--seed", "1", "--out", s(&f.p("x.json"))]).status.code(), Some(2));
    assert_eq!(seka(&["export-heatmap", "--bank", s(&f.p("missing.json")), "--out", s(&f.p("h.csv"))]).status.code(), Some(3));
}
