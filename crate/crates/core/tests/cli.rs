//! Command-line behaviour: exit codes, error records, rerunnability and the
//! per-command contracts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;
use ykd::model::checkpoint::load_checkpoint;

fn ykd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ykd")).args(args).env("RUST_LOG", "error").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ykd(args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Exit code and the parsed single-line error record.
fn failure(args: &[&str]) -> (i32, serde_json::Value) {
    let out = ykd(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().filter(|l| l.starts_with('{')).collect();
    assert_eq!(lines.len(), 1, "expected one JSON error line, got: {stderr}");
    let record: serde_json::Value = serde_json::from_str(lines[0]).expect("error line is JSON");
    (out.status.code().expect("exit code"), record)
}

/// Small data set, a base model and a ykd increment, built once.
struct Fixture {
    _dir: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, rel: &str) -> String {
        self.root.join(rel).to_string_lossy().into_owned()
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let f = Fixture { _dir: dir, root };
        ok(&["generate", "--images", "32", "--eval-images", "8", "--seed", "5", "--out", &f.path("data")]);
        ok(&["train-base", "--data", &f.path("data/train"), "--seed", "5", "--set", "epochs=1", "--out", &f.path("base")]);
        ok(&[
            "increment", "--checkpoint", &f.path("base/ckpt_step0"), "--data", &f.path("data/train"), "--seed", "5", "--set", "epochs=1", "--set",
            "lr=0.005", "--out", &f.path("inc"),
        ]);
        f
    })
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_two_with_json() {
    let (code, rec) = failure(&[]);
    assert_eq!(code, 2);
    assert_eq!(rec["error"], "usage");
    let (code, _) = failure(&["sideways", "--out", "x"]);
    assert_eq!(code, 2);
    let (code, _) = failure(&["train-base", "--out", "x"]);
    assert_eq!(code, 2, "missing --data");
}

#[test]
fn help_and_version_exit_zero() {
    assert!(String::from_utf8_lossy(&ok(&["--help"]).stdout).contains("increment"));
    ok(&["--version"]);
}

#[test]
fn missing_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("eval").to_string_lossy().into_owned();
    let (code, rec) = failure(&["evaluate", "--checkpoint", "/nonexistent/ckpt", "--data", "/nonexistent/data", "--out", &out]);
    assert_eq!(code, 1);
    assert!(rec["message"].as_str().unwrap().contains("/nonexistent"), "{rec}");
}

#[test]
fn bad_override_is_invalid_input() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_string_lossy().into_owned();
    let (code, rec) = failure(&["train-base", "--data", &f.path("data/train"), "--set", "kd.rpn=0", "--out", &out]);
    assert_eq!(code, 1);
    assert_eq!(rec["error"], "invalid_input");
}

#[test]
fn generate_refuses_existing_output() {
    let f = fixture();
    let (code, _) = failure(&["generate", "--images", "4", "--out", &f.path("data")]);
    assert_eq!(code, 1);
}

#[test]
fn training_is_rerunnable() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "train-base", "--data", &f.path("data/train"), "--seed", "9", "--deterministic", "--set", "epochs=1", "--out", &out.to_string_lossy(),
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    let strip = |files: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
        // the manifest records the output path itself
        files.into_iter().filter(|(p, _)| p != Path::new("run_manifest.json")).collect()
    };
    let (ta, tb) = (strip(tree_bytes(&a)), strip(tree_bytes(&b)));
    assert!(ta.iter().any(|(p, _)| p.ends_with("manifest.json")));
    assert_eq!(ta, tb);
}

#[test]
fn increment_adds_a_branch_unless_finetuning() {
    let f = fixture();
    let ykd_state = load_checkpoint(Path::new(&f.path("inc/ckpt_step1"))).unwrap();
    assert_eq!(ykd_state.fes.len(), 2);
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_string_lossy().into_owned();
    ok(&[
        "increment", "--checkpoint", &f.path("base/ckpt_step0"), "--data", &f.path("data/train"), "--mode", "finetune", "--set", "epochs=1",
        "--out", &out,
    ]);
    let state = load_checkpoint(&tmp.path().join("ckpt_step1")).unwrap();
    assert_eq!(state.fes.len(), 1);
    assert_eq!(state.last_head().domain, vec![1, 2, 3, 4]);
}

#[test]
fn increment_onto_known_classes_fails() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_string_lossy().into_owned();
    // under 2-1 the next step is class 3, which the 3-class base already has
    let (code, rec) = failure(&[
        "increment", "--checkpoint", &f.path("base/ckpt_step0"), "--data", &f.path("data/train"), "--scenario", "2-1", "--out", &out,
    ]);
    assert_eq!(code, 1);
    assert_eq!(rec["error"], "invalid_input", "{rec}");
}

#[test]
fn evaluate_writes_reports_and_composes() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("all");
    ok(&["evaluate", "--checkpoint", &f.path("inc/ckpt_step1"), "--data", &f.path("data/eval"), "--out", &out.to_string_lossy()]);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows[0], "class_id");
    for group in ["base", "new", "all"] {
        assert!(rows.contains(&group), "{group} row missing from {csv}");
    }
    let jsonl = fs::read_to_string(out.join("detections.jsonl")).unwrap();
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["image_id", "class_id", "score", "box", "mask_rle", "branch"] {
            assert!(v.get(key).is_some(), "{key} missing");
        }
    }
    let composed = tmp.path().join("compose");
    ok(&[
        "evaluate", "--checkpoint", &f.path("inc/ckpt_step1"), "--data", &f.path("data/eval"), "--compose", "0:1", "--out",
        &composed.to_string_lossy(),
    ]);
    assert!(composed.join("report.csv").is_file());
    let (code, _) = failure(&[
        "evaluate", "--checkpoint", &f.path("inc/ckpt_step1"), "--data", &f.path("data/eval"), "--compose", "7:1", "--out",
        &tmp.path().join("bad").to_string_lossy(),
    ]);
    assert_eq!(code, 1);
}

#[test]
fn averaging_at_the_later_endpoint_matches_plain_evaluation() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let plain = tmp.path().join("plain");
    let avg = tmp.path().join("avg");
    ok(&["evaluate", "--checkpoint", &f.path("inc/ckpt_step1"), "--data", &f.path("data/eval"), "--out", &plain.to_string_lossy()]);
    ok(&[
        "average", "--earlier", &f.path("base/ckpt_step0"), "--checkpoint", &f.path("inc/ckpt_step1"), "--weights", "0,1;0.5,0.5", "--data",
        &f.path("data/eval"), "--out", &avg.to_string_lossy(),
    ]);
    assert_eq!(fs::read(plain.join("report.csv")).unwrap(), fs::read(avg.join("eval_w0_1/report.csv")).unwrap());
    let sweep = fs::read_to_string(avg.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("w_i,w_j,base,intermediary,new,all"));
    assert_eq!(sweep.lines().count(), 3);

    let plots = tmp.path().join("plots");
    let out = ok(&["plot", "--input", &avg.join("sweep.csv").to_string_lossy(), "--out", &plots.to_string_lossy()]);
    let written: Vec<String> = String::from_utf8_lossy(&out.stdout).lines().map(String::from).collect();
    // one chart per group present in the sweep (no intermediary group in 3-1)
    assert_eq!(written.len(), 3, "{written:?}");
    for g in ["base", "new", "all"] {
        assert!(plots.join(format!("sweep_{g}.svg")).is_file());
    }
}

#[test]
fn cka_needs_both_steps() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cka");
    ok(&["cka", "--checkpoint", &f.path("inc/ckpt_step1"), "--data", &f.path("data/eval"), "--steps", "0,1", "--out", &out.to_string_lossy()]);
    assert!(fs::read_to_string(out.join("cka.csv")).unwrap().starts_with("class_id,images,cka"));
    let (code, rec) = failure(&[
        "cka", "--checkpoint", &f.path("base/ckpt_step0"), "--data", &f.path("data/eval"), "--steps", "0,1", "--out",
        &tmp.path().join("bad").to_string_lossy(),
    ]);
    assert_eq!(code, 1);
    assert!(rec["message"].as_str().unwrap().contains("step 1"), "{rec}");
}

#[test]
fn run_manifest_is_keyed_by_command() {
    let f = fixture();
    let text = fs::read_to_string(f.root.join("inc/run_manifest.json")).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let entry = doc.as_object().unwrap().values().next().unwrap();
    assert!(entry.get("tool_version").is_some());
    assert!(entry.get("git_hash").is_some());
}
