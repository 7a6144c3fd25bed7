use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use zeroddi::run::hash_path;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_zeroddi"))
}

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["zeroddi"];
    argv.extend_from_slice(args);
    zeroddi::cli::run(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_CONFIG: &str = "epochs = 2\nd_v = 16\nd_n = 16\nd_r = 12\nN = 6\nd_t = 16\nbatch_size = 64\nlearning_rate = 0.001\n";

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn synth(&self, name: &str) -> PathBuf {
        let out = self.path(name);
        assert_eq!(run(&["synth", "--out", s(&out), "--d-t", "16", "--instances-per-class", "20"]), 0);
        out
    }

    fn config(&self) -> PathBuf {
        let p = self.path("tiny.cfg");
        std::fs::write(&p, TINY_CONFIG).unwrap();
        p
    }
}

#[test]
fn synth_is_reproducible() {
    let r = Run::new();
    let (a, b) = (r.synth("a"), r.synth("b"));
    assert_eq!(hash_path(&a).unwrap(), hash_path(&b).unwrap());
    assert!(a.join("manifest.json").is_file());
    assert!(!a.join(".lock").exists());
}

#[test]
fn usage_errors_exit_2() {
    let out = bin().args(["eval", "--checkpoint", "x", "--data", "y", "--out", "z", "--fold", "9"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[usage]:") && err.lines().count() == 1, "{err}");
    let out = bin().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_data_exits_3() {
    let r = Run::new();
    let data = r.synth("d");
    let graphs = data.join("graphs.jsonl");
    let mut text = std::fs::read_to_string(&graphs).unwrap();
    text.push_str("{\"drug_id\": \"broken\", \"atom_codes\": [1], \"bonds\": [[0, 5]]}\n");
    std::fs::write(&graphs, text).unwrap();
    let out = bin().args(["prepare", "--data", s(&data), "--out", s(&r.path("p"))]).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[validation]"));
}

#[test]
fn missing_file_exits_1() {
    let r = Run::new();
    let out = bin().args(["prepare", "--data", s(&r.path("nope")), "--out", s(&r.path("p"))]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]"));
}

#[test]
fn gradcheck_passes_and_corruption_is_caught() {
    let r = Run::new();
    assert_eq!(run(&["gradcheck", "--scope", "losses", "--out", s(&r.path("ok"))]), 0);
    let out = bin().args(["gradcheck", "--scope", "brl", "--corrupt", "--out", s(&r.path("bad"))]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[gradcheck]") && err.contains("brl."), "{err}");
}

#[test]
fn locked_directory_is_refused() {
    let r = Run::new();
    let out = r.path("locked");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".lock"), "").unwrap();
    assert_eq!(run(&["synth", "--out", s(&out)]), 1);
}

#[test]
fn resample_reaches_the_target_ratio() {
    let r = Run::new();
    let data = r.synth("d");
    let out = r.path("rs");
    assert_eq!(run(&["resample", "--data", s(&data), "--out", s(&out), "--rho", "3", "--min-count", "5"]), 0);
    let back = zeroddi::formats::load_dataset(&out).unwrap();
    let counts = back.dataset.class_counts();
    let (max, min) = (*counts.values().max().unwrap(), *counts.values().min().unwrap());
    assert!(max <= 3 * min && min >= 5);
}

#[test]
fn train_resume_and_eval_reports() {
    let r = Run::new();
    let data = r.synth("d");
    let cfg = r.config();
    let full = r.path("full");
    assert_eq!(run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&full), "--select-folds"]), 0);
    for f in ["model.zdck", "history.jsonl", "steps.jsonl", "config.cfg", "manifest.json", "best_fold0.zdck"] {
        assert!(full.join(f).is_file(), "{f}");
    }
    let hist = std::fs::read_to_string(full.join("history.jsonl")).unwrap();
    assert_eq!(hist.lines().count(), 2);
    for line in hist.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        for k in ["epoch", "align", "cla", "ins", "total", "wall_ms"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    let half = r.path("half");
    assert_eq!(run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&half), "--epochs", "1"]), 0);
    let resumed = r.path("resumed");
    let ck = half.join("model.zdck");
    assert_eq!(run(&["train", "--resume", s(&ck), "--epochs", "2", "--data", s(&data), "--out", s(&resumed)]), 0);
    assert_eq!(
        std::fs::read(full.join("model.zdck")).unwrap(),
        std::fs::read(resumed.join("model.zdck")).unwrap(),
        "resumed training diverged from the uninterrupted run"
    );

    for (mode, fold) in [("czsl", "all"), ("gzsl", "all"), ("gzsl", "pooled"), ("czsl", "1")] {
        let out = r.path(&format!("eval_{mode}_{fold}"));
        let code = run(&[
            "eval", "--checkpoint", s(&full), "--data", s(&data), "--out", s(&out), "--mode", mode, "--fold", fold,
            "--predictions",
        ]);
        assert_eq!(code, 0);
        let rep: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
        assert_eq!(rep["mode"], mode);
        for f in rep["folds"].as_array().unwrap() {
            let u = &f["unseen"];
            let a = |k: &str| u[k].as_f64().unwrap();
            assert!(a("acc_at1") <= a("acc_at3") && a("acc_at3") <= a("acc_at5"));
            if mode == "gzsl" {
                assert!(a("acc_at1") <= f["binary"]["acc_bi_unseen"].as_f64().unwrap());
                let s1 = f["seen"]["acc_at1"].as_f64().unwrap();
                let h = f["h_at1"].as_f64().unwrap();
                let want = if s1 + a("acc_at1") == 0.0 { 0.0 } else { 2.0 * s1 * a("acc_at1") / (s1 + a("acc_at1")) };
                assert!((h - want).abs() <= 0.02, "{h} vs {want}");
            }
        }
        let preds: Vec<_> = std::fs::read_dir(&out)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("predictions_"))
            .collect();
        assert_eq!(preds.len(), rep["folds"].as_array().unwrap().len());
    }
}

#[test]
fn attention_dump_has_one_row_per_substructure() {
    let r = Run::new();
    let data = r.synth("d");
    let cfg = r.config();
    let tr = r.path("t");
    assert_eq!(run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&tr), "--epochs", "1"]), 0);
    let ds = zeroddi::formats::load_dataset(&data).unwrap().dataset;
    let inst = &ds.instances[0];
    let out = r.path("att");
    let pair = format!("{},{}", inst.drug1, inst.drug2);
    let ck = tr.join("model.zdck");
    assert_eq!(
        run(&["inspect-attention", "--checkpoint", s(&ck), "--data", s(&data), "--pair", &pair, "--ddie", &inst.ddie, "--out", s(&out)]),
        0
    );
    let text = std::fs::read_to_string(out.join("attention.tsv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for row in rows {
        let sum: f64 = row.split('\t').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}
