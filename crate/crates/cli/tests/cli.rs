use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn dadt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dadt"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = dadt(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn teacher() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/teacher.ckpt")
        .to_string_lossy()
        .into_owned()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn small_config(dir: &Path, mode: &str, lambdas: bool) -> PathBuf {
    let loss = if lambdas {
        r#", "loss": {"lambda_c": 0.5, "lambda_o": 0.5}"#
    } else {
        ""
    };
    let text = format!(
        r#"{{"schema_version": 1, "train": {{"mode": "{mode}", "epochs": 2, "batch_size": 2, "learning_rate": 0.01{loss}}}}}"#
    );
    let p = dir.join(format!("{mode}{lambdas}.json"));
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn simulate_writes_one_frame_reproducibly() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    ok(
        &["simulate", "--frames", "1", "--seed", "4", "--out", "a"],
        t,
    );
    ok(
        &["simulate", "--frames", "1", "--seed", "4", "--out", "b"],
        t,
    );
    let frames: Vec<_> = std::fs::read_dir(t.join("a/frames")).unwrap().collect();
    assert_eq!(frames.len(), 1);
    for f in [
        "frames/000000.bin",
        "labels/000000.json",
        "manifest.json",
        "run.json",
    ] {
        assert_eq!(read(t.join("a").join(f)), read(t.join("b").join(f)), "{f}");
    }
    let run: serde_json::Value = serde_json::from_slice(&read(t.join("a/run.json"))).unwrap();
    assert_eq!(run["command"], "simulate");
    assert!(run["tool_version"].as_str().unwrap().starts_with("dadt "));
}

#[test]
fn resample_keeps_requested_beams() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    ok(
        &["simulate", "--frames", "1", "--seed", "1", "--out", "d"],
        t,
    );
    let input = "d/frames/000000.bin";
    ok(
        &[
            "resample",
            "--input",
            input,
            "--target-beams",
            "64",
            "--out",
            "same.bin",
        ],
        t,
    );
    assert_eq!(read(t.join("same.bin")), read(t.join(input)));

    let out = ok(
        &[
            "resample",
            "--input",
            input,
            "--target-beams",
            "40",
            "--out",
            "low.bin",
            "--stats",
            "s.json",
        ],
        t,
    );
    assert!(!out.stdout.is_empty());
    let s: serde_json::Value = serde_json::from_slice(&read(t.join("s.json"))).unwrap();
    assert_eq!(s["kept_beams"].as_array().unwrap().len(), 40);
    assert_eq!(s["beam_point_counts"].as_array().unwrap().len(), 64);
    let ratio = s["retained_fraction"].as_f64().unwrap();
    assert!((ratio - 40.0 / 64.0).abs() < 0.02, "{ratio}");
    let pts = s["output_points"].as_u64().unwrap();
    assert_eq!(read(t.join("low.bin")).len() as u64, pts * 16);
    assert!(t.join("low.run.json").exists());
}

#[test]
fn train_modes_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    ok(
        &["simulate", "--frames", "3", "--seed", "2", "--out", "d"],
        t,
    );
    let teacher = teacher();

    let cfg = small_config(t, "dadt", false);
    let cfg = cfg.to_str().unwrap();
    let missing = dadt(&["train", "--config", cfg, "--data", "d", "--out", "x"], t);
    assert_eq!(code(&missing), 1);
    let none = dadt(
        &[
            "train",
            "--config",
            cfg,
            "--data",
            "d",
            "--teacher",
            "none",
            "--out",
            "x",
        ],
        t,
    );
    assert_eq!(code(&none), 1);

    for run in ["r1", "r2"] {
        ok(
            &[
                "train",
                "--config",
                cfg,
                "--data",
                "d",
                "--teacher",
                &teacher,
                "--out",
                run,
            ],
            t,
        );
    }
    for f in ["model.ckpt", "loss.csv", "steps.csv"] {
        assert_eq!(
            read(t.join("r1").join(f)),
            read(t.join("r2").join(f)),
            "{f}"
        );
    }
    let conf = |run: &str| -> serde_json::Value {
        serde_json::from_slice(&read(t.join(run).join("config.json"))).unwrap()
    };
    assert_eq!(conf("r1")["train"], conf("r2")["train"]);
    let loss = String::from_utf8(read(t.join("r1/loss.csv"))).unwrap();
    assert!(loss.starts_with("epoch,"));
    assert_eq!(loss.lines().count(), 3);
    let metrics: serde_json::Value =
        serde_json::from_slice(&read(t.join("r1/metrics.json"))).unwrap();
    assert_eq!(metrics["epoch_losses"].as_array().unwrap().len(), 2);

    let vcfg = small_config(t, "vanilla", true);
    let v = ok(
        &[
            "train",
            "--config",
            vcfg.to_str().unwrap(),
            "--data",
            "d",
            "--out",
            "v",
        ],
        t,
    );
    assert!(String::from_utf8_lossy(&v.stderr).contains("warning"));
    let steps = String::from_utf8(read(t.join("v/steps.csv"))).unwrap();
    let header: Vec<&str> = steps.lines().next().unwrap().split(',').collect();
    let (io, ic) = (
        header.iter().position(|h| *h == "l_o").unwrap(),
        header.iter().position(|h| *h == "l_c").unwrap(),
    );
    for line in steps.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[io].parse::<f64>().unwrap(), 0.0);
        assert_eq!(cells[ic].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn eval_writes_csv_and_json() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    ok(
        &["simulate", "--frames", "2", "--seed", "6", "--out", "d"],
        t,
    );
    let teacher = teacher();
    ok(
        &[
            "eval", "--ckpt", &teacher, "--data", "d", "--report", "r.csv",
        ],
        t,
    );
    ok(
        &[
            "eval", "--ckpt", &teacher, "--data", "d", "--report", "r2.csv",
        ],
        t,
    );
    let csv = read(t.join("r.csv"));
    assert_eq!(csv, read(t.join("r2.csv")));
    let text = String::from_utf8(csv).unwrap();
    for class in ["vehicle", "pedestrian", "cyclist"] {
        assert!(text.contains(class), "{text}");
    }
    let report: serde_json::Value = serde_json::from_slice(&read(t.join("r.json"))).unwrap();
    let map = report["eval"]["map"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&map));
    assert!(t.join("r.run.json").exists());
}

#[test]
fn export_context_matches_golden_image() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    ok(
        &["simulate", "--frames", "1", "--seed", "3", "--out", "d"],
        t,
    );
    let teacher = teacher();
    let args = |class: &'static str, out: &'static str| {
        vec![
            "export-context",
            "--ckpt",
            &teacher,
            "--frame",
            "d/frames/000000.bin",
            "--labels",
            "d/labels/000000.json",
            "--class",
            class,
            "--out",
            out,
        ]
    };
    ok(&args("cyclist", "a.pgm"), t);
    ok(&args("cyclist", "b.pgm"), t);
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cyclist_seed3.pgm");
    assert_eq!(read(t.join("a.pgm")), read(golden));
    assert_eq!(read(t.join("a.pgm")), read(t.join("b.pgm")));
    let bounds: serde_json::Value = serde_json::from_slice(&read(t.join("a.json"))).unwrap();
    assert_eq!(bounds["objects"], 2);
    assert!(bounds["max"].as_f64().unwrap() > bounds["min"].as_f64().unwrap());

    // This frame has no vehicles.
    let absent = dadt(&args("vehicle", "v.pgm"), t);
    assert_eq!(code(&absent), 1);
    assert!(!t.join("v.pgm").exists());
    assert_eq!(code(&dadt(&args("truck", "v.pgm"), t)), 1);
}

#[test]
fn export_features_lists_every_object() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    ok(
        &["simulate", "--frames", "2", "--seed", "9", "--out", "d"],
        t,
    );
    ok(
        &[
            "export-features",
            "--ckpt",
            &teacher(),
            "--data",
            "d",
            "--out",
            "f.csv",
        ],
        t,
    );
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(t.join("d/manifest.json"))).unwrap();
    let boxes: u64 = manifest["frames"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["boxes"].as_u64().unwrap())
        .sum();
    let csv = String::from_utf8(read(t.join("f.csv"))).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("frame_id,class,z0,"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() as u64 <= boxes && !rows.is_empty());
    assert!(rows.iter().all(|r| r.split(',').count() == 18));
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    let out = ok(&["gradcheck", "--report", "g.json"], t);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.lines()
            .filter(|l| l.trim_end().ends_with(" ok"))
            .count()
            >= 5,
        "{text}"
    );
    assert!(!text.contains("FAIL"));
    assert!(t.join("g.json").exists());

    let bad = dadt(&["gradcheck", "--inject-fault", "context_similarity"], t);
    assert_eq!(code(&bad), 3, "{}", String::from_utf8_lossy(&bad.stdout));
    assert_eq!(
        code(&dadt(&["gradcheck", "--inject-fault", "nonsense"], t)),
        1
    );
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    assert_eq!(code(&dadt(&["frobnicate"], t)), 1);
    assert_eq!(code(&dadt(&["simulate", "--out", "x"], t)), 1);
    assert_eq!(code(&dadt(&["--help"], t)), 0);
    let missing = dadt(
        &[
            "resample",
            "--input",
            "nope.bin",
            "--target-beams",
            "40",
            "--out",
            "o.bin",
        ],
        t,
    );
    assert_eq!(code(&missing), 2);
    std::fs::write(t.join("bad.json"), r#"{"schema_version": 1, "trian": {}}"#).unwrap();
    assert_eq!(code(&dadt(&["train", "--config", "bad.json"], t)), 1);
    std::fs::write(t.join("v2.json"), r#"{"schema_version": 2}"#).unwrap();
    assert_eq!(code(&dadt(&["train", "--config", "v2.json"], t)), 1);
    std::fs::write(t.join("garbled.bin"), [1u8, 2, 3]).unwrap();
    let g = dadt(
        &[
            "resample",
            "--input",
            "garbled.bin",
            "--target-beams",
            "40",
            "--out",
            "o.bin",
        ],
        t,
    );
    assert_eq!(code(&g), 2);
}
