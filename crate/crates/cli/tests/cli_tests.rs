//! Black-box tests driving the compiled `rrlp` binary: artifact layout,
//! exit codes, metrics cross-checks, report reproducibility, and dataset
//! resolution through RRLP_DATA_DIR.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn rrlp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rrlp"))
}

fn output_to_string(out: &[u8]) -> String {
    String::from_utf8_lossy(out).into_owned()
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "expected exit {code}\nstdout:\n{}\nstderr:\n{}",
        output_to_string(&out.stdout),
        output_to_string(&out.stderr)
    );
}

/// Two blob tasks of two classes each on a small dense network; a single
/// grid cell so `run` writes its artifacts into the output root.
fn blob_config() -> Value {
    let centers: Vec<Vec<f64>> = (0..4)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / 4.0;
            vec![4.0 * theta.cos(), 4.0 * theta.sin()]
        })
        .collect();
    json!({
        "dataset": {
            "kind": "synthetic_blobs",
            "classes": 4,
            "dims": 2,
            "train_per_class": 80,
            "test_per_class": 25,
            "spread": 0.35,
            "seed": 9,
            "centers": centers,
            "center_box": 5.0
        },
        "network": {
            "input_shape": [2],
            "layers": [
                {"kind": "dense", "output": 16},
                {"kind": "relu"},
                {"kind": "dense", "output": 16},
                {"kind": "relu"}
            ]
        },
        "schedule": [2, 2],
        "method": "rerelrp",
        "train": {
            "learning_rates": [0.1],
            "epochs": 12,
            "batch_size": 16,
            "momentum": 0.9,
            "lr_decay_factor": 0.1,
            "lr_plateau_patience": 5
        },
        "prune": {"taus": [5.0], "chunk_fraction": 0.1},
        "memory": {
            "n_f": 3,
            "exemplars_per_class": 5,
            "reference": [100, 100, 100]
        },
        "seeds": [1],
        "val_fraction": 0.15
    })
}

fn write_config(dir: &Path, cfg: &Value) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

/// Run the blob experiment once and hand back (tempdir, run output dir).
fn completed_run(tmp: &TempDir) -> std::path::PathBuf {
    let cfg_path = write_config(tmp.path(), &blob_config());
    let out = tmp.path().join("run");
    let res = rrlp()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_code(&res, 0);
    out
}

#[test]
fn run_writes_manifest_metrics_and_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let out = completed_run(&tmp);

    for name in ["manifest.json", "metrics.csv", "checkpoint.bin"] {
        assert!(out.join(name).is_file(), "missing artifact {name}");
    }
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["schedule"], json!([2, 2]));
    assert!(manifest["result"]["final_taw"].as_f64().unwrap() > 80.0);
    assert!(manifest["selection"]["mean_final_tag"].is_f64());

    // Refusing to clobber: the same out dir without --overwrite is a config
    // error, with it the run succeeds again.
    let cfg_path = tmp.path().join("config.json");
    let res = rrlp()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_code(&res, 2);
    let res = rrlp()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .arg("--overwrite")
        .output()
        .unwrap();
    assert_code(&res, 0);
}

#[test]
fn metrics_verb_agrees_and_catches_tampering() {
    let tmp = TempDir::new().unwrap();
    let out = completed_run(&tmp);

    let res = rrlp().arg("metrics").arg("--out").arg(&out).output().unwrap();
    assert_code(&res, 0);
    let stdout = output_to_string(&res.stdout);
    assert!(
        stdout.contains("manifest agrees with metrics CSV"),
        "unexpected metrics output:\n{stdout}"
    );

    // A flipped accuracy value in the final row must be caught against the
    // manifest's final averages.
    let csv_path = out.join("metrics.csv");
    let text = fs::read_to_string(&csv_path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let last = lines.len() - 1;
    let mut fields: Vec<String> = lines[last].split(',').map(String::from).collect();
    fields[2] = "1.5".into();
    lines[last] = fields.join(",");
    fs::write(&csv_path, lines.join("\n") + "\n").unwrap();
    let res = rrlp().arg("metrics").arg("--out").arg(&out).output().unwrap();
    assert_code(&res, 4);
    assert!(output_to_string(&res.stderr).contains("disagrees"));

    // A renamed column is a format error.
    let tampered = text.replacen("acc_taw", "accuracy", 1);
    fs::write(&csv_path, tampered).unwrap();
    let res = rrlp().arg("metrics").arg("--out").arg(&out).output().unwrap();
    assert_code(&res, 2);
}

#[test]
fn bad_configs_exit_2_with_the_field_named() {
    let tmp = TempDir::new().unwrap();

    let mut cfg = blob_config();
    cfg["prune"]["taus"] = json!([]);
    let path = write_config(tmp.path(), &cfg);
    let res = rrlp()
        .args(["run", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_code(&res, 2);
    assert!(output_to_string(&res.stderr).contains("prune.taus"));

    let mut cfg = blob_config();
    cfg["val_fraction"] = json!(2.0);
    let path = write_config(tmp.path(), &cfg);
    let res = rrlp()
        .args(["budget", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_code(&res, 2);
    assert!(output_to_string(&res.stderr).contains("val_fraction"));
}

#[test]
fn budget_violations_exit_3_before_any_training() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = blob_config();
    cfg["memory"]["reference"] = json!([1, 1, 1]);
    let path = write_config(tmp.path(), &cfg);

    let res = rrlp()
        .args(["budget", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_code(&res, 3);

    let res = rrlp()
        .args(["run", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_code(&res, 3);
    let stdout = output_to_string(&res.stdout);
    assert!(
        !stdout.contains("cell seed="),
        "training started despite the budget violation:\n{stdout}"
    );

    // The healthy config passes the same gate.
    let path = write_config(tmp.path(), &blob_config());
    let res = rrlp()
        .args(["budget", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_code(&res, 0);
    assert!(output_to_string(&res.stdout).contains("-> ok"));
}

#[test]
fn explain_task_reports_are_reproducible() {
    let tmp = TempDir::new().unwrap();
    let out = completed_run(&tmp);
    let sample = tmp.path().join("sample.json");
    fs::write(&sample, r#"{"shape": [2], "values": [4.2, 0.3]}"#).unwrap();

    let explain = |dir: &Path| {
        let res = rrlp()
            .args(["explain-task", "--checkpoint"])
            .arg(out.join("checkpoint.bin"))
            .arg("--sample")
            .arg(&sample)
            .arg("--out")
            .arg(dir)
            .output()
            .unwrap();
        assert_code(&res, 0);
    };
    let dir_a = tmp.path().join("explain_a");
    let dir_b = tmp.path().join("explain_b");
    explain(&dir_a);
    explain(&dir_b);

    let report_a = fs::read(dir_a.join("report.txt")).unwrap();
    let report_b = fs::read(dir_b.join("report.txt")).unwrap();
    assert_eq!(report_a, report_b, "regenerated report differs");
    assert_eq!(
        fs::read(dir_a.join("heatmap.pgm")).unwrap(),
        fs::read(dir_b.join("heatmap.pgm")).unwrap()
    );

    let text = String::from_utf8(report_a).unwrap();
    assert!(text.contains("chosen task: 0"), "report:\n{text}");
    let total: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("probability total: "))
        .expect("report lists the probability total")
        .parse()
        .unwrap();
    assert!((total - 1.0).abs() <= 1e-9, "probabilities sum to {total}");
}

#[test]
fn heatmap_writes_image_and_csv() {
    let tmp = TempDir::new().unwrap();
    let out = completed_run(&tmp);
    let sample = tmp.path().join("sample.json");
    fs::write(&sample, r#"{"shape": [2], "values": [0.1, 3.9]}"#).unwrap();

    let dir = tmp.path().join("heat");
    let res = rrlp()
        .args(["heatmap", "--checkpoint"])
        .arg(out.join("checkpoint.bin"))
        .arg("--sample")
        .arg(&sample)
        .arg("--out")
        .arg(&dir)
        .args(["--task", "1"])
        .output()
        .unwrap();
    assert_code(&res, 0);

    let pgm = fs::read(dir.join("heatmap.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n2 1\n255\n"), "unexpected PGM header");
    assert_eq!(pgm.len(), b"P5\n2 1\n255\n".len() + 2);
    let csv = fs::read_to_string(dir.join("heatmap.csv")).unwrap();
    let row: Vec<&str> = csv.trim_end().split(',').collect();
    assert_eq!(row.len(), 2);
    for v in row {
        v.parse::<f64>().unwrap();
    }
}

#[test]
fn eval_rescores_a_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let out = completed_run(&tmp);

    let res = rrlp()
        .args(["eval", "--checkpoint"])
        .arg(out.join("checkpoint.bin"))
        .arg("--config")
        .arg(tmp.path().join("config.json"))
        .output()
        .unwrap();
    assert_code(&res, 0);
    let stdout = output_to_string(&res.stdout);
    assert!(stdout.contains("task 0:"), "eval output:\n{stdout}");
    assert!(stdout.contains("average: A_taw="), "eval output:\n{stdout}");
}

// --- IDX files resolved through the data-dir variable -----------------------

fn be32(v: u32) -> [u8; 4] {
    v.to_be_bytes()
}

fn toy_idx_pair(dir: &Path, train: bool) {
    let (per_class, img_name, lbl_name) = if train {
        (16usize, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")
    } else {
        (8usize, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    };
    let n = per_class * 2;
    let mut images = Vec::new();
    images.extend_from_slice(&be32(0x0000_0803));
    images.extend_from_slice(&be32(n as u32));
    images.extend_from_slice(&be32(4));
    images.extend_from_slice(&be32(4));
    let mut labels = Vec::new();
    labels.extend_from_slice(&be32(0x0000_0801));
    labels.extend_from_slice(&be32(n as u32));
    for i in 0..n {
        let class = i % 2;
        // Dim images for class 0, bright for class 1, mild per-sample jitter.
        let base = if class == 0 { 40 } else { 200 };
        for p in 0..16 {
            images.push((base + ((i * 7 + p * 3) % 24)) as u8);
        }
        labels.push(class as u8);
    }
    fs::write(dir.join(img_name), images).unwrap();
    fs::write(dir.join(lbl_name), labels).unwrap();
}

#[test]
fn relative_idx_paths_resolve_through_the_data_dir() {
    let tmp = TempDir::new().unwrap();
    let data_root = tmp.path().join("datasets");
    let toy = data_root.join("toy");
    fs::create_dir_all(&toy).unwrap();
    toy_idx_pair(&toy, true);
    toy_idx_pair(&toy, false);

    let cfg = json!({
        "dataset": {
            "kind": "idx_files",
            "train_images": "toy/train-images-idx3-ubyte",
            "train_labels": "toy/train-labels-idx1-ubyte",
            "test_images": "toy/t10k-images-idx3-ubyte",
            "test_labels": "toy/t10k-labels-idx1-ubyte"
        },
        "network": {
            "input_shape": [1, 4, 4],
            "layers": [
                {"kind": "flatten"},
                {"kind": "dense", "output": 8},
                {"kind": "relu"}
            ]
        },
        "schedule": [2],
        "method": "rerelrp",
        "train": {"learning_rates": [0.1], "epochs": 6, "batch_size": 8},
        "prune": {"taus": [5.0], "chunk_fraction": 0.25},
        "memory": {
            "n_f": 2,
            "exemplars_per_class": 3,
            "reference": [16, 2, 2]
        },
        "seeds": [7],
        "val_fraction": 0.25
    });
    let cfg_path = write_config(tmp.path(), &cfg);

    // Without the variable the relative paths point nowhere.
    let out_dir = tmp.path().join("no_env");
    let res = rrlp()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out_dir)
        .env_remove("RRLP_DATA_DIR")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(4));

    // With it the run completes, and an override is echoed into the manifest.
    let out_dir = tmp.path().join("with_env");
    let res = rrlp()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out_dir)
        .args(["--override", "train.epochs=4"])
        .env("RRLP_DATA_DIR", &data_root)
        .output()
        .unwrap();
    assert_code(&res, 0);
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["epochs"], json!(4));
}
