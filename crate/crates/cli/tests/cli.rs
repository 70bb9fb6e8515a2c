use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tmcnn::classifier::{load_weights, Label, Patch, PATCH_SIDE};
use tmcnn::dataset::{write_dataset, LabeledPatch};
use tmcnn::pipeline::DetectionSet;

fn tmcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmcnn"))
        .args(args)
        .env("TMCNN_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in [
        &["--help"][..],
        &["detect", "--help"],
        &["templates", "dump", "--help"],
        &["train", "--help"],
        &["synth", "--help"],
        &["eval", "--help"],
        &["counts", "--help"],
        &["serve", "--help"],
    ] {
        let out = tmcnn(sub);
        assert_eq!(out.status.code(), Some(0), "{sub:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub:?}");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(tmcnn(&["detect", "--bogus"]).status.code(), Some(2));
    assert_eq!(tmcnn(&["synth", "--out", "x", "--size", "12"]).status.code(), Some(2));
    assert_eq!(tmcnn(&[]).status.code(), Some(2));
}

#[test]
fn detect_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = tmcnn(&["detect", "--input", path(&empty), "--out", path(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no input images"));
}

#[test]
fn synth_is_reproducible_and_scores_perfectly_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = tmcnn(&["synth", "--count", "2", "--size", "96x80", "--seed", "9", "--out", path(out)]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    for name in ["synth_0000.png", "synth_0001.gt.json", "field/synth_0001.png"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let gt = DetectionSet::load(a.join("synth_0000.gt.json")).unwrap();
    assert_eq!(gt.image, "synth_0000");
    assert!(gt.detections.iter().all(|d| d.score.is_none()));

    let report = stdout_json(&tmcnn(&["eval", "--pred", path(&a), "--gt", path(&a)]));
    assert_eq!(report["pooled"]["f1"], 1.0);
    assert_eq!(report["images"].as_array().unwrap().len(), 2);
}

#[test]
fn detect_then_eval_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let (syn, det) = (dir.path().join("syn"), dir.path().join("det"));
    assert!(tmcnn(&["synth", "--count", "1", "--size", "96x80", "--seed", "2", "--out", path(&syn)])
        .status
        .success());
    let out = tmcnn(&["detect", "--input", path(&syn), "--threshold", "0.9", "--out", path(&det)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let set = DetectionSet::load(det.join("synth_0000.json")).unwrap();
    set.validate().unwrap();
    assert!(det.join("synth_0000.overlay.png").exists());
    assert!(set.detections.iter().all(|d| d.score.unwrap() > 0.9));

    let csv = dir.path().join("sweep.csv");
    let sweep = stdout_json(&tmcnn(&[
        "eval", "--pred", path(&det), "--gt", path(&syn), "--sweep", "0.97,0.9,0.95", "--csv", path(&csv),
    ]));
    let ts: Vec<f64> = sweep["rows"].as_array().unwrap().iter().map(|r| r["threshold"].as_f64().unwrap()).collect();
    assert_eq!(ts, [0.9, 0.95, 0.97]);
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("threshold,tp,fp,fn,precision,recall,f1\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn templates_dump_reports_enumeration_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = tmcnn(&["templates", "dump", "--out", path(dir.path())]);
    assert!(out.status.success());
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let meta = &manifest["metadata"];
    assert_eq!(meta["terminal_templates"], 120);
    let j = meta["junction_templates"].as_u64().unwrap();
    assert_eq!(meta["entries"].as_u64().unwrap(), 3 * j + 5 * 120);
    let entries = manifest["entries"].as_array().unwrap();
    assert_eq!(entries.len() as u64, 3 * j + 5 * 120);
    assert!(dir.path().join(entries[0]["template_png"].as_str().unwrap()).exists());
    assert!(dir.path().join(entries[0]["mask_png"].as_str().unwrap()).exists());
}

#[test]
fn counts_writes_step_series() {
    let dir = tempfile::tempdir().unwrap();
    let set = |name: &str, junctions: usize| {
        let mut s = DetectionSet::new(name, 100, 100, 0.5);
        for i in 0..junctions {
            s.detections.push(tmcnn::pipeline::Detection {
                id: i as u64,
                x: i,
                y: 0,
                score: Some(0.9),
                tm_label: Some(tmcnn::DefectClass::Junction),
                final_label: Label::Junction,
                probs: [1.0, 0.0, 0.0],
                source: tmcnn::pipeline::Source::Tm,
            });
        }
        s.save(dir.path().join(format!("{name}.json"))).unwrap();
    };
    set("r1s0", 7);
    set("r2s0", 8);
    let runs = serde_json::json!({"runs": [
        {"name": "r1", "steps": [{"step": 0, "file": "r1s0.json"}]},
        {"name": "r2", "steps": [{"step": 0, "file": "r2s0.json"}]},
    ]});
    let manifest = dir.path().join("runs.json");
    std::fs::write(&manifest, runs.to_string()).unwrap();
    let csv = dir.path().join("counts.csv");
    let out = tmcnn(&["counts", "--detections", path(dir.path()), "--runs", path(&manifest), "--out", path(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,junction_mean,junction_std,terminal_mean,terminal_std"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[1], 7.5);
    assert!((row[2] - 0.5f64.sqrt()).abs() < 1e-12);
}

#[test]
fn train_is_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let patches: Vec<LabeledPatch> = (0..12)
        .map(|i| {
            let label = Label::ALL[i % 3];
            let level = 0.2 + 0.3 * (i % 3) as f32;
            LabeledPatch {
                image: "img".into(),
                x: i,
                y: 0,
                label,
                patch: Patch::new(PATCH_SIDE, vec![level; PATCH_SIDE * PATCH_SIDE]).unwrap(),
            }
        })
        .collect();
    write_dataset(&data, &patches).unwrap();
    let mut weights = Vec::new();
    for name in ["a.tmcw", "b.tmcw"] {
        let w = dir.path().join(name);
        let out = tmcnn(&[
            "--jobs", "1", "train", "--dataset", path(&data), "--epochs", "1", "--batch", "4", "--seed", "3", "--out", path(&w),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(w.with_extension("json").exists());
        weights.push(std::fs::read(&w).unwrap());
    }
    assert_eq!(weights[0], weights[1]);
    load_weights(dir.path().join("a.tmcw")).unwrap();
}
