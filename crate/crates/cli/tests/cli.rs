use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scatterfusion"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn synth(dir: &Path, name: &str, seed: &str) {
    ok(
        &[
            "synth",
            "--out",
            name,
            "--kind",
            "sine+trend+noise",
            "--n",
            "500",
            "--channels",
            "2",
            "--seed",
            seed,
        ],
        dir,
    );
}

const SMALL_MODEL: &[&str] = &[
    "--input-len",
    "48",
    "--horizon",
    "12",
    "--d-model",
    "8",
    "--d-attn",
    "8",
    "--J",
    "2",
    "--mrta-layers",
    "1",
    "--epochs",
    "2",
    "--window-stride",
    "8",
    "--eval-stride",
    "8",
    "--seed",
    "5",
];

#[test]
fn help_and_version_exit_zero() {
    let tmp = TempDir::new().unwrap();
    let help = ok(&["--help"], tmp.path());
    for cmd in [
        "scatter",
        "decompose",
        "train",
        "predict",
        "evaluate",
        "check-invariance",
        "bench",
        "synth",
    ] {
        assert!(help.contains(cmd), "help lists {cmd}");
    }
    assert!(ok(&["--version"], tmp.path()).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn usage_errors_exit_two_with_suggestion() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["train", "--out", "o", "--data", "d.csv", "--epoch", "3"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--epochs"));

    assert_eq!(run(&["train"], tmp.path()).status.code(), Some(2));

    std::fs::write(tmp.path().join("bad.toml"), "schema_version = 9\n").unwrap();
    let out = run(
        &["synth", "--out", "o", "--kind", "sine", "--config", "bad.toml"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));
}

#[test]
fn data_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["decompose", "--out", "o", "--data", "missing.csv"], tmp.path());
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(tmp.path().join("gap.csv"), "a,b\n1,2\n3,\n5,6\n7,8\n9,10\n11,12\n").unwrap();
    let out = run(
        &["decompose", "--out", "o", "--data", "gap.csv", "--period", "2"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 2") && err.contains('b'), "{err}");

    ok(
        &[
            "decompose",
            "--out",
            "o",
            "--data",
            "gap.csv",
            "--period",
            "2",
            "--on-missing",
            "interpolate",
        ],
        tmp.path(),
    );
}

#[test]
fn synth_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "a", "11");
    synth(tmp.path(), "b", "11");
    synth(tmp.path(), "c", "12");
    let read = |d: &str| std::fs::read(tmp.path().join(d).join("data.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    assert_eq!(manifest(&tmp.path().join("a"))["seed"], 11);
}

#[test]
fn train_predict_evaluate_flow() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth(dir, "s", "3");

    let mut args = vec!["train", "--out", "t", "--data", "s/data.csv"];
    args.extend_from_slice(SMALL_MODEL);
    ok(&args, dir);
    for f in [
        "model.ckpt",
        "state.ckpt",
        "metrics.json",
        "train_log.jsonl",
        "config.toml",
        "manifest.json",
    ] {
        assert!(dir.join("t").join(f).exists(), "missing {f}");
    }
    let m = manifest(&dir.join("t"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["model"]["d_model"], 8);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("t/metrics.json")).unwrap()).unwrap();
    assert!(metrics["model"]["splits"].as_array().unwrap().len() == 3);
    assert!(metrics["baselines"]["persistence"]["mse"].as_f64().unwrap() > 0.0);

    // The resolved config reproduces the run.
    let mut again = vec![
        "train",
        "--out",
        "t2",
        "--data",
        "s/data.csv",
        "--config",
        "t/config.toml",
    ];
    again.push("--deterministic");
    ok(&again, dir);
    assert_eq!(
        std::fs::read(dir.join("t/model.ckpt")).unwrap(),
        std::fs::read(dir.join("t2/model.ckpt")).unwrap()
    );

    ok(
        &[
            "predict",
            "--out",
            "p",
            "--data",
            "s/data.csv",
            "--checkpoint",
            "t/model.ckpt",
            "--stride",
            "12",
        ],
        dir,
    );
    let preds = std::fs::read_to_string(dir.join("p/predictions.csv")).unwrap();
    let mut lines = preds.lines();
    assert_eq!(lines.next(), Some("window_id,t,channel,y_true,y_pred"));
    assert_eq!(lines.count() % (12 * 2), 0);

    let out = ok(
        &[
            "evaluate",
            "--out",
            "e",
            "--data",
            "s/data.csv",
            "--checkpoint",
            "t/model.ckpt",
            "--ablate",
            "safe",
            "--baselines",
            "--stride",
            "12",
        ],
        dir,
    );
    assert!(out.contains("Full ScatterFusion"));
    assert!(out.contains("- SAFE (Fixed Weighting)"));
    assert!(out.contains("Persistence"));
    let csv = std::fs::read_to_string(dir.join("e/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert_eq!(manifest(&dir.join("e"))["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn resume_from_final_state_reproduces_model() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth(dir, "s", "4");
    let mut full = vec!["train", "--out", "full", "--data", "s/data.csv"];
    full.extend_from_slice(SMALL_MODEL);
    ok(&full, dir);

    let mut mid = vec!["train", "--out", "mid", "--data", "s/data.csv"];
    mid.extend_from_slice(SMALL_MODEL);
    ok(&mid, dir);
    std::fs::remove_file(dir.join("mid/model.ckpt")).unwrap();
    ok(
        &[
            "train",
            "--out",
            "mid",
            "--data",
            "s/data.csv",
            "--resume",
            "mid/state.ckpt",
        ],
        dir,
    );
    assert_eq!(
        std::fs::read(dir.join("full/model.ckpt")).unwrap(),
        std::fs::read(dir.join("mid/model.ckpt")).unwrap()
    );
}

#[test]
fn wrong_checkpoint_is_reported() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth(dir, "s", "1");
    std::fs::write(dir.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = run(
        &[
            "predict",
            "--out",
            "p",
            "--data",
            "s/data.csv",
            "--checkpoint",
            "junk.ckpt",
        ],
        dir,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn scatter_and_decompose_outputs() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(
        &["synth", "--out", "s", "--kind", "sine", "--n", "256", "--period", "16"],
        dir,
    );
    ok(
        &[
            "scatter",
            "--out",
            "sc",
            "--data",
            "s/data.csv",
            "--J",
            "3",
            "--dump-filters",
        ],
        dir,
    );
    let sc = std::fs::read_to_string(dir.join("sc/scattering.csv")).unwrap();
    assert!(sc.starts_with("channel,order,j1,j2,index,value"));
    for order in ["0", "1", "2"] {
        assert!(sc.lines().skip(1).any(|l| l.split(',').nth(1) == Some(order)));
    }
    assert!(dir.join("sc/filters.csv").exists());

    let out = ok(&["decompose", "--out", "d", "--data", "s/data.csv"], dir);
    assert!(out.contains("period 16"), "{out}");
    let comp = std::fs::read_to_string(dir.join("d/components.csv")).unwrap();
    let data = std::fs::read_to_string(dir.join("s/data.csv")).unwrap();
    for (c, d) in comp.lines().skip(1).zip(data.lines().skip(1)) {
        let parts: Vec<f64> = c.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        let x: f64 = d.parse().unwrap();
        assert!((parts.iter().sum::<f64>() - x).abs() < 1e-9);
    }
}

#[test]
fn invariance_and_bench_reports() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let out = ok(
        &[
            "check-invariance",
            "--out",
            "i",
            "--signals",
            "2",
            "--length",
            "512",
            "--J",
            "2..3",
        ],
        dir,
    );
    assert!(out.contains("PASS") || out.contains("FAIL"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("i/invariance.json")).unwrap()).unwrap();
    assert_eq!(report["translation"].as_array().unwrap().len(), 2);

    ok(
        &[
            "bench",
            "--out",
            "b",
            "--lengths",
            "32,64",
            "--runs",
            "1",
            "--d-model",
            "8",
            "--d-attn",
            "8",
            "--input-len",
            "32",
            "--horizon",
            "4",
            "--J",
            "2",
        ],
        dir,
    );
    let bench = std::fs::read_to_string(dir.join("b/bench.csv")).unwrap();
    assert_eq!(bench.lines().count(), 3);
}
