use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array2;
use sector_outpaint::geometry::BinaryMask;
use sector_outpaint::metrics::MetricReport;
use sector_outpaint::trainer::{read_log, FINAL_CHECKPOINT, LOG_FILE};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sector-outpaint"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synthetic(dir: &Path) {
    ok(&["make-synthetic", "--out", s(dir), "--patients", "6", "--frames", "2", "--height", "32", "--width", "32"]);
}

const SMALL_TRAIN: &[&str] = &["--batch-size", "2", "--base-width", "4", "--resolution", "32x32"];

#[test]
fn usage_errors_exit_one() {
    let out = cli(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--no-such-flag"));
    assert_eq!(cli(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(cli(&[]).status.code(), Some(1));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_and_runtime_errors_are_distinguished() {
    let dir = tempfile::tempdir().unwrap();
    synthetic(&dir.path().join("data"));
    let manifest = dir.path().join("data/manifest.csv");
    let out = cli(&["train", "--manifest", s(&manifest), "--out", s(&dir.path().join("t")), "--lr-g", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let out = cli(&["train", "--manifest", s(&manifest), "--out", s(&dir.path().join("t")), "--resolution", "30x30"]);
    assert_eq!(out.status.code(), Some(1));
    let out = cli(&[
        "evaluate",
        "--index",
        s(&dir.path().join("missing.json")),
        "--out",
        s(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_one_step_then_outpaint_evaluate_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synthetic(&data);
    let manifest = data.join("manifest.csv");
    let run = dir.path().join("run");
    let mut args = vec!["train", "--manifest", s(&manifest), "--out", s(&run), "--steps", "1"];
    args.extend_from_slice(SMALL_TRAIN);
    ok(&args);
    let checkpoints: Vec<_> = std::fs::read_dir(&run)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "safetensors"))
        .collect();
    assert_eq!(checkpoints.len(), 1);
    assert_eq!(read_log(&run.join(LOG_FILE)).unwrap().len(), 1);
    assert!(run.join("run.json").is_file());

    let ckpt = run.join(FINAL_CHECKPOINT);
    let op = dir.path().join("outpaint");
    ok(&["outpaint", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--out", s(&op), "--cut", "15", "--cut", "40"]);
    let report_path = dir.path().join("eval/report.json");
    ok(&["evaluate", "--index", s(&op.join("index.json")), "--out", s(&report_path)]);
    let report = MetricReport::load_json(&report_path).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report_path.with_extension("txt").is_file());
    let plots = dir.path().join("plots");
    ok(&["plot", "--index", s(&op.join("index.json")), "--out", s(&plots)]);
    assert!(plots.join("contact_cut_30.png").is_file());
    assert!(plots.join("contact_cut_80.png").is_file());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synthetic(&data);
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "[train]\nsteps = 3\nbatch_size = 2\nresolution = [32, 32]\n\n[generator]\nbase_width = 4\n").unwrap();
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&data.join("manifest.csv")),
        "--out",
        s(&run),
        "--steps",
        "2",
    ]);
    assert_eq!(read_log(&run.join(LOG_FILE)).unwrap().len(), 2);

    std::fs::write(&cfg, "[train]\nsteps = 3\nbogus = 1\n").unwrap();
    let out = cli(&["train", "--config", s(&cfg), "--manifest", s(&data.join("manifest.csv")), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(1));
}

fn without_timestamp(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("timestamp");
    v
}

#[test]
fn run_record_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let args = ["make-synthetic", "--out", s(&data), "--patients", "3", "--frames", "1", "--height", "32", "--width", "32", "--seed", "9"];
    ok(&args);
    let first = without_timestamp(&data.join("run.json"));
    let manifest_first = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    ok(&args);
    assert_eq!(first, without_timestamp(&data.join("run.json")));
    assert_eq!(manifest_first, std::fs::read_to_string(data.join("manifest.csv")).unwrap());
    assert_eq!(first["seed"], 9);
}

#[test]
fn prepare_data_and_stats_compare() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synthetic(&data);
    let prepared = dir.path().join("prepared");
    ok(&["prepare-data", "--root", s(&data), "--out", s(&prepared)]);
    let text = std::fs::read_to_string(prepared.join("manifest.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 12);

    let gt = dir.path().join("gt");
    let gen = dir.path().join("gen");
    std::fs::create_dir_all(&gt).unwrap();
    std::fs::create_dir_all(&gen).unwrap();
    let mut pairing = String::from("case_id,gt_mask_path,gen_mask_path\n");
    for k in 0..5usize {
        let m = |extra: usize| {
            BinaryMask::from_array(Array2::from_shape_fn((20, 20), |(i, j)| (i < 5 + k + extra && j < 8) as u8)).unwrap()
        };
        m(0).save_png(&gt.join(format!("{k}.png"))).unwrap();
        m(k % 2).save_png(&gen.join(format!("{k}.png"))).unwrap();
        pairing.push_str(&format!("case{k},{k}.png,{k}.png\n"));
    }
    let csv = dir.path().join("pairs.csv");
    std::fs::write(&csv, pairing).unwrap();
    let out = dir.path().join("study");
    let res = ok(&[
        "stats-compare",
        "--gt-dir",
        s(&gt),
        "--gen-dir",
        s(&gen),
        "--pairing",
        s(&csv),
        "--out",
        s(&out),
        "--spacing-mm",
        "0.5,0.5",
    ]);
    let study: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("study.json")).unwrap()).unwrap();
    assert_eq!(study["units"], "cm2");
    assert_eq!(study["n_permutations"], "exhaustive");
    assert!(String::from_utf8_lossy(&res.stdout).contains("permutation test"));
}
