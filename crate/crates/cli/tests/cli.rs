use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn sdrpn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdrpn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = sdrpn(dir, args);
    assert_eq!(code(&o), 0, "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

fn small_data(dir: &Path, n: usize) {
    ok(dir, &["gen", "--num", &n.to_string(), "--grid", "8", "--seed", "3", "--out", "data"]);
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn gen_writes_three_grids_per_sample_deterministically() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["gen", "--num", "12", "--grid", "16", "--seed", "1", "--out", "a"]);
    ok(tmp.path(), &["gen", "--num", "12", "--grid", "16", "--seed", "1", "--out", "b"]);
    let a = tree_bytes(&tmp.path().join("a"));
    let grids = a.iter().filter(|(n, _)| n.ends_with(".grid")).count();
    assert_eq!(grids, 36);
    assert!(a.iter().any(|(n, _)| n == "manifest.json"));
    assert_eq!(a, tree_bytes(&tmp.path().join("b")));
}

#[test]
fn missing_out_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = sdrpn(tmp.path(), &["gen", "--num", "4", "--grid", "8"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--out"));
}

#[test]
fn bad_config_file_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("c.json"), "{\"height\": \"tall\"}").unwrap();
    let o = sdrpn(tmp.path(), &["gen", "--num", "2", "--out", "d", "--config", "c.json"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn config_values_apply_and_flags_win() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("c.json"), r#"{"height": 6, "width": 10, "seed": 9}"#).unwrap();
    ok(tmp.path(), &["gen", "--num", "2", "--out", "cfg", "--config", "c.json"]);
    ok(tmp.path(), &["gen", "--num", "2", "--out", "flag", "--config", "c.json", "--grid", "8"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("cfg/manifest.json")).unwrap()).unwrap();
    assert_eq!((m["grid_height"].as_u64(), m["grid_width"].as_u64(), m["seed"].as_u64()), (Some(6), Some(10), Some(9)));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("flag/manifest.json")).unwrap()).unwrap();
    assert_eq!((m["grid_height"].as_u64(), m["grid_width"].as_u64()), (Some(8), Some(8)));
}

#[test]
fn pseudo_label_validates_thresholds() {
    let tmp = TempDir::new().unwrap();
    small_data(tmp.path(), 2);
    let o = sdrpn(
        tmp.path(),
        &["pseudo-label", "--manifest", "data/manifest.json", "--out", "l", "--tau-fg", "0.1", "--tau-bg", "0.2"],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("tau_bg"));
}

fn precision(out: &str) -> f64 {
    out.rsplit("precision ").next().unwrap().trim().parse().unwrap()
}

#[test]
fn pseudo_labels_are_valid_and_sink_removal_helps() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["gen", "--num", "24", "--grid", "16", "--seed", "2", "--out", "data"]);
    let with = ok(tmp.path(), &["pseudo-label", "--manifest", "data/manifest.json", "--out", "l"]);
    let without = ok(
        tmp.path(),
        &["pseudo-label", "--manifest", "data/manifest.json", "--out", "n", "--no-sink-removal"],
    );
    assert!(precision(&without) < precision(&with), "{without} vs {with}");
    let m = sdrpn::manifest::DatasetManifest::load(tmp.path().join("l/manifest.json")).unwrap();
    assert_eq!(m.samples.len(), 24);
    for rec in &m.samples {
        let g = sdrpn::read_grid(rec.pseudo_label.as_ref().unwrap()).unwrap();
        assert_eq!(g.shape(), &[16, 16]);
        assert!(g.as_i8().unwrap().iter().all(|v| (-1..=1).contains(v)));
    }
}

#[test]
fn stages_name_missing_artifacts() {
    let tmp = TempDir::new().unwrap();
    small_data(tmp.path(), 2);
    let o = sdrpn(tmp.path(), &["predict", "--checkpoint", "ckpt", "--manifest", "data/manifest.json", "--out", "p"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("meta.json"), "{}", stderr(&o));
    let o = sdrpn(tmp.path(), &["train", "--manifest", "labels/manifest.json", "--out", "ckpt"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("labels/manifest.json"), "{}", stderr(&o));
    let o = sdrpn(tmp.path(), &["eval", "--manifest", "data/manifest.json", "--predictions", "p", "--out", "e.csv"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("run predict first"));
}

#[test]
fn full_pipeline_and_checkpoint_mismatch() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    small_data(d, 6);
    ok(d, &["pseudo-label", "--manifest", "data/manifest.json", "--out", "labels"]);
    let out = ok(d, &["train", "--manifest", "labels/manifest.json", "--out", "ckpt", "--epochs", "2", "--batch-size", "2"]);
    assert!(out.contains("trained 6 steps"), "{out}");
    assert!(d.join("ckpt/loss.csv").is_file());
    ok(d, &["predict", "--checkpoint", "ckpt", "--manifest", "data/manifest.json", "--out", "pred"]);
    assert_eq!(fs::read_dir(d.join("pred")).unwrap().count(), 6);
    for mode in ["box", "mask"] {
        ok(
            d,
            &["postprocess", "--manifest", "data/manifest.json", "--predictions", "pred", "--out", mode, "--mode", mode],
        );
        let roi: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join(mode).join("sample_00000_roi.json")).unwrap()).unwrap();
        assert_eq!(roi["mode"], mode);
    }
    ok(d, &["eval", "--manifest", "data/manifest.json", "--predictions", "pred", "--out", "eval.csv"]);
    let csv = fs::read_to_string(d.join("eval.csv")).unwrap();
    assert!(csv.starts_with("arm,sample_id,iou_box,iou_mask\n"));
    assert_eq!(csv.lines().count(), 7);

    // a checkpoint whose metadata disagrees with its tensors
    let meta_path = d.join("ckpt/meta.json");
    let meta = fs::read_to_string(&meta_path).unwrap().replacen("\"d_model\": 64", "\"d_model\": 32", 1);
    fs::write(&meta_path, meta).unwrap();
    let o = sdrpn(d, &["predict", "--checkpoint", "ckpt", "--manifest", "data/manifest.json", "--out", "p2"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("32") && err.contains("64"), "{err}");
}

#[test]
fn eval_needs_samples() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("empty.json"),
        r#"{"grid_height": 4, "grid_width": 4, "feature_dim": 8, "samples": []}"#,
    )
    .unwrap();
    let o = sdrpn(tmp.path(), &["eval", "--manifest", "empty.json", "--raw-attention", "--out", "e.csv"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
}

#[test]
fn verify_theory_outcomes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let out = ok(d, &["verify-theory", "--model", "ccn", "--rho0", "0.1", "--rho1", "0.2", "--n", "1000000", "--out", "th"]);
    assert!(out.trim_end().ends_with("PASS"), "{out}");
    assert!(d.join("th/theory_bins.csv").is_file() && d.join("th/theory_summary.json").is_file());
    let o = sdrpn(d, &["verify-theory", "--model", "ccn", "--rho0", "0.6", "--rho1", "0.6"]);
    assert_eq!(code(&o), 2);
    let out = ok(d, &["verify-theory", "--model", "symccn", "--rho", "0", "--n", "200000"]);
    assert!(out.contains("flag:") && out.trim_end().ends_with("PASS"), "{out}");
    // noise-free with a deterministic posterior: the MSE ordering becomes equality
    let out = ok(d, &["verify-theory", "--model", "ccn", "--rho0", "0", "--rho1", "0", "--posterior", "step", "--n", "100000"]);
    assert!(out.contains("noise-free") && out.trim_end().ends_with("PASS"), "{out}");
    let o = sdrpn(d, &["verify-theory", "--model", "symccn", "--posterior", "constant", "--eta", "1.5"]);
    assert_eq!(code(&o), 2);
}

fn fake_run(dir: &Path, arm: &str, seed: u64, grid: usize) {
    fs::create_dir_all(dir).unwrap();
    let run = serde_json::json!({
        "arm": arm, "seed": seed, "grid_height": grid, "grid_width": grid,
        "iou_mask": 0.5, "iou_box": 0.6, "initial_loss": 1.0, "final_loss": 0.1,
        "degenerate_train": 0, "degenerate_eval": 1, "eval_samples": 63
    });
    fs::write(dir.join("run.json"), run.to_string()).unwrap();
}

#[test]
fn report_rows_and_edge_cases() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["report", "--out", "empty.csv"]);
    let header = "arm,seed,grid_height,grid_width,iou_mask,iou_box,final_loss,degenerate_train,degenerate_eval,eval_samples";
    assert_eq!(fs::read_to_string(d.join("empty.csv")).unwrap().trim_end(), header);

    let arms = ["raw_attention", "mse_regression", "label_assignment", "remove_sink", "pre_smoothing"];
    for seed in 1..=5 {
        for arm in arms {
            fake_run(&d.join(format!("runs/seed_{seed}/{arm}")), arm, seed, 16);
        }
    }
    fs::create_dir_all(d.join("runs/broken")).unwrap();
    fs::write(d.join("runs/broken/run.json"), "{not json").unwrap();
    let o = sdrpn(d, &["report", "--out", "r.csv", "runs"]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("broken"), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(d.join("r.csv")).unwrap().lines().count(), 26);

    fake_run(&d.join("other/remove_sink"), "remove_sink", 1, 8);
    let o = sdrpn(d, &["report", "--out", "mixed.csv", "runs/seed_1/remove_sink", "other"]);
    assert!(stderr(&o).contains("grid sizes"));
    let mixed = fs::read_to_string(d.join("mixed.csv")).unwrap();
    let sizes: Vec<&str> = mixed.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(sizes.len(), 2);
    assert!(sizes.contains(&"8") && sizes.contains(&"16"));
}

#[test]
fn ablate_small_benchmark() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("bench.json"), r#"{"teacher": {"height": 8, "width": 8}}"#).unwrap();
    let out = ok(
        d,
        &[
            "ablate", "--out", "abl", "--config", "bench.json", "--seeds", "1", "--arms", "raw_attention,remove_sink",
            "--train-samples", "6", "--eval-samples", "3", "--epochs", "1",
        ],
    );
    assert_eq!(out.lines().count(), 2);
    assert_eq!(fs::read_to_string(d.join("abl/report.csv")).unwrap().lines().count(), 3);
    let o = sdrpn(d, &["ablate", "--out", "x", "--arms", "nope"]);
    assert_eq!(code(&o), 2);
}
