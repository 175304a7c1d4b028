//! End-to-end checks of the `figlm` binary on a small run directory.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Mutex, OnceLock};

use serde_json::Value;

/// Commands share one run directory and its manifest, so they run one at a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn figlm(args: &[&str]) -> Output {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    Command::new(env!("CARGO_BIN_EXE_figlm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = figlm(args);
    assert!(
        out.status.success(),
        "figlm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// A trained run directory shared by every test in this file.
fn run_dir() -> &'static Path {
    static DIR: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    &DIR.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let d = dir.to_str().unwrap();
        ok(&["synth", "--out-dir", d, "--seed", "3", "--n-labelled", "2000", "--n-unlabelled", "300"]);
        ok(&[
            "train", "--out-dir", d, "--seed", "3", "--self-train", "soft", "--gen-epochs", "3", "--max-st-iters", "2",
        ]);
        (tmp, dir)
    })
    .1
}

fn dir_arg() -> &'static str {
    run_dir().to_str().unwrap()
}

#[test]
fn help_lists_every_flag() {
    let expected: &[(&str, &[&str])] = &[
        ("synth", &["--config", "--out-dir", "--seed", "--n-labelled", "--n-unlabelled", "--metaphor-rate", "--token-mode"]),
        (
            "train",
            &["--self-train", "--ablate", "--ident-epochs", "--gen-epochs", "--st-epochs", "--max-st-iters", "--tau", "--lr", "--batch-size", "--labelled", "--unlabelled"],
        ),
        ("generate", &["--target", "--targets-file", "--beam-size", "--mode", "--k", "--max-new-tokens", "--ablate", "--output"]),
        ("detect", &["--input", "--checkpoint", "--output"]),
        ("visualize", &["--sentence", "--target", "--format", "--checkpoint", "--output"]),
        ("evaluate", &["--ablate", "--targets-file", "--n-targets", "--scorer-epochs", "--classifier-epochs", "--beam-size"]),
    ];
    for (cmd, flags) in expected {
        let help = ok(&[cmd, "--help"]);
        for flag in *flags {
            assert!(help.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
    let top = ok(&["--help"]);
    for cmd in ["synth", "train", "generate", "detect", "visualize", "evaluate"] {
        assert!(top.contains(cmd));
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let fresh = tmp.path().join("never");
    let f = fresh.to_str().unwrap();
    assert_eq!(code(&figlm(&["synth", "--out-dir", f, "--bogus"])), 1);
    assert_eq!(code(&figlm(&["frobnicate"])), 1);
    assert_eq!(code(&figlm(&["generate", "--out-dir", f])), 1);
    assert_eq!(code(&figlm(&["synth", "--out-dir", f, "--metaphor-rate", "1.5"])), 1);
    assert_eq!(code(&figlm(&["train", "--out-dir", f, "--tau", "0"])), 1);

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"epochs": 3}}"#).unwrap();
    let out = figlm(&["synth", "--out-dir", f, "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid config"));
    // Validation happens before anything is written.
    assert!(!fresh.exists());
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    let out = figlm(&["generate", "--out-dir", d, "--target", "s1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
    assert_eq!(code(&figlm(&["train", "--out-dir", d])), 2);
}

#[test]
fn synth_is_reproducible_and_sized() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = |p: &Path| -> Vec<String> {
        ["synth", "--out-dir", p.to_str().unwrap(), "--seed", "5", "--n-labelled", "10000", "--n-unlabelled", "50"]
            .map(String::from)
            .to_vec()
    };
    let stats: Value = serde_json::from_str(&ok(&args(&a).iter().map(String::as_str).collect::<Vec<_>>())).unwrap();
    ok(&args(&b).iter().map(String::as_str).collect::<Vec<_>>());
    for f in ["labelled.jsonl", "unlabelled.jsonl", "vocab.json", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(stats["labelled"]["n_sentences"], 10000);
    assert_eq!(stats["unlabelled"]["n_sentences"], 50);
    let metaphors = jsonl(&a.join("labelled.jsonl")).iter().filter(|v| v["label"] == 1).count();
    assert!((4800..=5200).contains(&metaphors), "{metaphors} metaphors");
}

#[test]
fn train_reports_every_epoch_and_round() {
    let lines = jsonl(&run_dir().join("train_report.jsonl"));
    // 3 identifier epochs, 3 generator epochs, 2 soft rounds.
    assert_eq!(lines.len(), 3 + 3 + 2);
    let phases: Vec<&str> = lines.iter().map(|l| l["phase"].as_str().unwrap()).collect();
    assert_eq!(phases[..3], ["identify"; 3]);
    assert_eq!(phases[3..6], ["generate"; 3]);
    assert_eq!(phases[6..], ["self_train"; 2]);
    for f in ["identifier.ckpt", "generator.ckpt"] {
        assert!(run_dir().join(f).is_file());
    }
}

#[test]
fn manifest_checksums_match_the_files() {
    use sha2::{Digest, Sha256};
    let m: Value = serde_json::from_str(&std::fs::read_to_string(run_dir().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 3);
    assert!(m["commands"]["train"]["train"].is_object());
    let files = m["files"].as_object().unwrap();
    assert!(files.contains_key("generator.ckpt"));
    for (name, sum) in files {
        let Ok(bytes) = std::fs::read(run_dir().join(name)) else {
            continue;
        };
        // Files rewritten by a later test may legitimately differ; the trained ones may not.
        if ["generator.ckpt", "identifier.ckpt", "labelled.jsonl", "vocab.json"].contains(&name.as_str()) {
            assert_eq!(hex::encode(Sha256::digest(&bytes)), sum.as_str().unwrap(), "{name}");
        }
    }
}

#[test]
fn generate_writes_beam_size_lines() {
    let out = "gen_s1.jsonl";
    ok(&["generate", "--out-dir", dir_arg(), "--seed", "3", "--target", "s1", "--beam-size", "12", "--output", out]);
    let lines = jsonl(&run_dir().join(out));
    assert_eq!(lines.len(), 12);
    assert!(lines.iter().all(|l| l["target"] == "s1" && l["mode"] == "beam"));
    let scores: Vec<f64> = lines.iter().map(|l| l["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    ok(&["generate", "--out-dir", dir_arg(), "--seed", "3", "--target", "s1", "--beam-size", "1", "--output", "b1.jsonl"]);
    ok(&["generate", "--out-dir", dir_arg(), "--seed", "3", "--target", "s1", "--mode", "greedy", "--output", "g.jsonl"]);
    let (b1, g) = (jsonl(&run_dir().join("b1.jsonl")), jsonl(&run_dir().join("g.jsonl")));
    assert_eq!(b1.len(), 1);
    assert_eq!(b1[0]["text"], g[0]["text"]);
}

#[test]
fn detect_scores_every_line_and_matches_the_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let other = tmp.path().join("other");
    ok(&["synth", "--out-dir", other.to_str().unwrap(), "--seed", "77", "--n-labelled", "400", "--n-unlabelled", "1"]);
    let input = other.join("labelled.jsonl");
    ok(&["detect", "--out-dir", dir_arg(), "--seed", "3", "--input", input.to_str().unwrap(), "--output", "det.jsonl"]);
    let gold = jsonl(&input);
    let scored = jsonl(&run_dir().join("det.jsonl"));
    assert_eq!(scored.len(), gold.len());
    let mut correct = 0;
    for (g, s) in gold.iter().zip(&scored) {
        assert_eq!(g["text"], s["text"]);
        assert_eq!(g["label"], s["label"]);
        let p = s["meta_prob"].as_f64().unwrap();
        assert!(p > 0.0 && p < 1.0);
        if (p > 0.5) == (g["label"] == 1) {
            correct += 1;
        }
    }
    let acc = correct as f64 / gold.len() as f64;
    assert!(acc >= 0.95, "detect accuracy {acc}");
}

#[test]
fn visualize_agrees_with_detect() {
    let sentence = "f3 s2 like o4 f1";
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("one.jsonl");
    std::fs::write(&input, format!("{{\"text\":\"{sentence}\"}}\n")).unwrap();
    ok(&["detect", "--out-dir", dir_arg(), "--seed", "3", "--input", input.to_str().unwrap(), "--output", "one.jsonl"]);
    let p = jsonl(&run_dir().join("one.jsonl"))[0]["meta_prob"].as_f64().unwrap();

    ok(&["visualize", "--out-dir", dir_arg(), "--seed", "3", "--sentence", sentence, "--format", "json", "--output", "v.json"]);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(run_dir().join("v.json")).unwrap()).unwrap();
    let tokens: Vec<&str> = v["tokens"].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();
    assert_eq!(tokens, ["s2", "<delim>", "f3", "s2", "like", "o4", "f1", "<eos>"]);
    for key in ["p", "importance", "weights"] {
        assert!(v[key].is_array(), "{key}");
    }
    assert_eq!(v["p"].as_array().unwrap().len(), tokens.len() + 1);
    assert_eq!(v["weights"].as_array().unwrap().len(), tokens.len());
    assert!((v["meta_score"].as_f64().unwrap() - p).abs() < 1e-12);

    ok(&["visualize", "--out-dir", dir_arg(), "--seed", "3", "--sentence", sentence, "--output", "v.html"]);
    let html = std::fs::read_to_string(run_dir().join("v.html")).unwrap();
    assert_eq!(html.matches("class=\"tok\"").count(), tokens.len());
    for t in ["f3", "like", "o4", "f1"] {
        assert_eq!(html.matches(&format!(">{t}</span>")).count(), 1, "{t}");
    }
    assert!(html.contains(&format!("Meta Score: <span class=\"meta-score\">{p:.4}</span>")));
}

#[test]
fn evaluate_writes_a_complete_report() {
    let out = ok(&["evaluate", "--out-dir", dir_arg(), "--seed", "3", "--n-targets", "10"]);
    let report: Value = serde_json::from_str(&out).unwrap();
    for key in ["ppl", "dist1", "dist2", "meta"] {
        assert!(report[key].is_f64(), "{key}");
    }
    assert_eq!(report["n_evaluated"], 120);
    assert_eq!(report["config"]["ablation"], "");
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(run_dir().join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(saved, report);
    // Scorer and classifier are cached, so a rerun reproduces the report exactly.
    let again: Value = serde_json::from_str(&ok(&["evaluate", "--out-dir", dir_arg(), "--seed", "3", "--n-targets", "10"])).unwrap();
    assert_eq!(again, report);
}
