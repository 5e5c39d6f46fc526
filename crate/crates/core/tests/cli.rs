//! End-to-end checks of the `protoseg` binary: outputs, determinism and the
//! exit-code contract (0 ok, 1 usage/config, 2 data, 3 verification).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protoseg::data::read_label_volume;
use protoseg::report::ReportRow;
use tempfile::TempDir;

fn protoseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn ok(args: &[&str]) -> Output {
    let o = protoseg(args);
    assert_eq!(o.status.code(), Some(0), "{args:?} failed:\n{}", text(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn phantoms(root: &TempDir, name: &str, count: usize, size: usize, seed: u64) -> PathBuf {
    let dir = root.path().join(name);
    ok(&[
        "gen-phantoms",
        "--out",
        s(&dir),
        "--count",
        &count.to_string(),
        "--size",
        &size.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    dir
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

/// One optimiser step of a narrow model; returns the final checkpoint.
fn tiny_checkpoint(root: &TempDir, data: &Path) -> PathBuf {
    let out = root.path().join("run");
    ok(&[
        "train",
        "--data",
        s(data),
        "--out",
        s(&out),
        "--steps",
        "1",
        "--base-channels",
        "2",
        "--no-augment",
    ]);
    let ckpt = out.join("final.ckpt");
    assert!(ckpt.exists());
    ckpt
}

#[test]
fn gen_phantoms_writes_cases_deterministically() {
    let root = TempDir::new().unwrap();
    let a = phantoms(&root, "a", 3, 16, 9);
    let b = phantoms(&root, "b", 3, 16, 9);
    let cases: Vec<PathBuf> = files(&a).into_iter().filter(|p| p.is_dir()).collect();
    assert_eq!(cases.len(), 3);
    for case in &cases {
        let names = files(case);
        assert_eq!(names.len(), 5, "{names:?}");
        let id = case.file_name().unwrap().to_str().unwrap();
        for suffix in ["t1", "t1ce", "t2", "flair", "seg"] {
            assert!(case.join(format!("{id}_{suffix}.nii.gz")).exists());
        }
        for f in names {
            let twin = b.join(f.strip_prefix(&a).unwrap());
            assert_eq!(fs::read(&f).unwrap(), fs::read(twin).unwrap(), "{f:?} differs");
        }
    }
    assert!(a.join("manifest.txt").exists());
    assert!(a.join("run_manifest.json").exists());
}

#[test]
fn odd_phantom_size_warns_but_succeeds() {
    let root = TempDir::new().unwrap();
    let dir = root.path().join("p");
    let o = ok(&["gen-phantoms", "--out", s(&dir), "--count", "1", "--size", "30"]);
    assert!(text(&o).to_lowercase().contains("warn"), "{}", text(&o));
}

#[test]
fn identity_evaluation_is_perfect() {
    let root = TempDir::new().unwrap();
    let data = phantoms(&root, "d", 3, 16, 1);
    let out = root.path().join("eval");
    ok(&["evaluate", "--data", s(&data), "--out", s(&out), "--identity"]);
    let rows: Vec<ReportRow> = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3 * 3 + 3);
    assert!(rows.iter().all(|r| r.dice == 1.0 && r.hd95 == 0.0));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), rows.len() + 1);
}

#[test]
fn verify_runs_only_requested_suite() {
    let root = TempDir::new().unwrap();
    let out = root.path().join("v");
    let o = ok(&["verify", "--suite", "metrics", "--instances", "10", "--out", s(&out)]);
    let t = text(&o);
    assert!(t.contains("metrics/"));
    assert!(!t.contains("gradients/") && !t.contains("oracles/"));
    assert!(out.join("run_manifest.json").exists());
}

#[test]
fn injected_fault_fails_verification_with_exit_3() {
    let o = protoseg(&["verify", "--suite", "gradients", "--inject-fault", "cross_attend"]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    assert!(text(&o).contains("cross_attend"));
}

#[test]
fn usage_and_config_errors_exit_1() {
    let o = protoseg(&["train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("E_USAGE"));
    let o = protoseg(&["verify", "--suite", "nonsense"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("E_CONFIG"));
    let o = protoseg(&["verify", "--inject-fault", "nothing"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn data_errors_exit_2_with_single_line() {
    let root = TempDir::new().unwrap();
    let out = root.path().join("e");
    let o = protoseg(&["evaluate", "--data", "/nonexistent/dataset", "--out", s(&out), "--identity"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("E_"), "{err}");

    let data = phantoms(&root, "d", 1, 16, 2);
    let case = files(&data).into_iter().find(|p| p.is_dir()).unwrap();
    let id = case.file_name().unwrap().to_str().unwrap().to_string();
    fs::remove_file(case.join(format!("{id}_t2.nii.gz"))).unwrap();
    let o = protoseg(&["evaluate", "--data", s(&data), "--out", s(&out), "--identity"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("E_MISSING_MODALITY"), "{}", text(&o));
}

#[test]
fn dry_run_reports_losses_and_shapes() {
    let root = TempDir::new().unwrap();
    let data = phantoms(&root, "d", 1, 32, 4);
    let out = root.path().join("dry");
    let o = ok(&["train", "--data", s(&data), "--out", s(&out), "--dry-run", "--base-channels", "2"]);
    let t = text(&o);
    for key in ["total", "ctp", "share", "expert", "deep"] {
        assert!(t.contains(key), "missing {key} in:\n{t}");
    }
    assert!(t.contains("[4, 32, 32, 32]"));
    assert!(out.join("run_manifest.json").exists());
}

#[test]
fn checkpoint_drives_segment_and_plots() {
    let root = TempDir::new().unwrap();
    let data = phantoms(&root, "d", 1, 32, 6);
    let ckpt = tiny_checkpoint(&root, &data);
    let log = fs::read_to_string(root.path().join("run").join("train_log.jsonl")).unwrap();
    assert!(log.lines().count() >= 1);

    let seg = root.path().join("seg");
    ok(&["segment", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&seg), "--dump-prototypes"]);
    let preds: Vec<PathBuf> = files(&seg).into_iter().filter(|p| s(p).ends_with(".nii.gz")).collect();
    assert_eq!(preds.len(), 1);
    let labels = read_label_volume(&preds[0]).expect("raw labels are valid");
    assert_eq!(labels.dims, [32; 3]);

    let evald = root.path().join("eval");
    ok(&["evaluate", "--data", s(&data), "--out", s(&evald), "--predictions", s(&seg)]);
    let rows: Vec<ReportRow> = serde_json::from_str(&fs::read_to_string(evald.join("report.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3 + 3);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.dice) && r.hd95 >= 0.0));

    let case = files(&data).into_iter().find(|p| p.is_dir()).unwrap();
    let plots = root.path().join("plots");
    ok(&["plot-slices", "--case", s(&case), "--out", s(&plots)]);
    let pngs = |d: &Path| files(d).into_iter().filter(|p| s(p).ends_with(".png")).count();
    assert_eq!(pngs(&plots), 3);
    let act = root.path().join("act");
    ok(&["plot-slices", "--case", s(&case), "--out", s(&act), "--checkpoint", s(&ckpt), "--activations"]);
    assert_eq!(pngs(&act), 15);
}

#[test]
fn activations_require_checkpoint() {
    let o = protoseg(&["plot-slices", "--case", "x", "--out", "y", "--activations"]);
    assert_eq!(o.status.code(), Some(1));
}
