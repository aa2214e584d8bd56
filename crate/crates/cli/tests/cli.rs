use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hydravit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hydravit"))
        .args(args)
        .env_remove("HYDRAVIT_OUTPUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Brute-force pair count with strict inequality.
fn pair_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut hits, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    hits += 1.0;
                }
            }
        }
    }
    hits / pairs
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut config = hydravit::experiment::ExperimentConfig::synthetic_default(5);
    config.train.epochs = 1;
    config.train.batch_size = 8;
    if let hydravit::experiment::DataConfig::Synthetic {
        train_samples,
        test_samples,
        ..
    } = &mut config.data
    {
        *train_samples = 40;
        *test_samples = 40;
    }
    let p = dir.join("c.json");
    std::fs::write(&p, config.to_json().unwrap()).unwrap();
    p
}

#[test]
fn eval_from_prediction_and_label_files() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("p.csv");
    let labels = dir.path().join("l.csv");
    let a = [0.9, 0.2, 0.6, 0.4, 0.6];
    let b = [0.1, 0.8, 0.3, 0.7, 0.5];
    let ya = [1u8, 0, 1, 0, 0];
    let yb = [0u8, 1, 1, 1, 0];
    let mut p = String::from("sample_id,a,b\n");
    // labels in a different row and column order than the predictions
    let mut l = String::from("sample_id,b,a\n");
    for i in 0..5 {
        p.push_str(&format!("s{i},{},{}\n", a[i], b[i]));
    }
    for i in (0..5).rev() {
        l.push_str(&format!("s{i},{},{}\n", yb[i], ya[i]));
    }
    std::fs::write(&pred, p).unwrap();
    std::fs::write(&labels, l).unwrap();
    let out = dir.path().join("r");
    let o = hydravit(&[
        "eval",
        "--pred",
        path(&pred),
        "--labels",
        path(&labels),
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut reader = csv::Reader::from_path(out.join("reports/auc.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let auc = |name: &str| -> f64 { rows.iter().find(|r| &r[0] == name).unwrap()[1].parse().unwrap() };
    let (ea, eb) = (pair_auc(&a, &ya), pair_auc(&b, &yb));
    assert!((auc("a") - ea).abs() < 1e-12);
    assert!((auc("b") - eb).abs() < 1e-12);
    assert!((auc("macro") - (ea + eb) / 2.0).abs() < 1e-12);
    assert!(out.join("plots/roc.png").exists());
    assert!(out.join("plots/roc_a.csv").exists());
}

#[test]
fn unknown_flag_exits_with_usage() {
    let o = hydravit(&["--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn help_exits_successfully() {
    let o = hydravit(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("ablate"));
}

#[test]
fn bad_override_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = hydravit(&[
        "train",
        "--config",
        path(&cfg),
        "--set",
        "epochz=3",
        "--out",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}

#[test]
fn missing_prediction_file_is_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let o = hydravit(&[
        "eval",
        "--pred",
        path(&missing),
        "--labels",
        path(&missing),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_override_changes_only_that_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = hydravit(&[
        "train",
        "--config",
        path(&cfg),
        "--set",
        "epochs=3",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let file: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    let effective: Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    let mut expected = file.clone();
    expected["train"]["epochs"] = Value::from(3);
    assert_ne!(file, effective);
    assert_eq!(expected, effective);

    for sub in ["checkpoints", "metrics", "reports", "saliency", "plots"] {
        assert!(out.join(sub).is_dir(), "{sub}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics/train.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3);
    assert!(out.join("checkpoints/final.ckpt").exists());
    assert!(out.join("reports/auc.csv").exists());
    assert!(out.join("plots/loss.png").exists());
    let run: Value = serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    let split = std::fs::read(out.join("split.csv")).unwrap();
    assert_eq!(run["split_hash"], Value::from(hydravit::data::content_hash(&split)));

    // predictions and saliency from the trained checkpoint on exported images
    let synth = dir.path().join("synth");
    let o = hydravit(&["synth", "--samples", "3", "--seed", "2", "--out", path(&synth)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let images: Vec<String> = std::fs::read_dir(synth.join("images"))
        .unwrap()
        .map(|e| e.unwrap().path().to_str().unwrap().to_string())
        .collect();
    assert_eq!(images.len(), 3);
    let pred_out = dir.path().join("pred");
    let ckpt = out.join("checkpoints/final.ckpt");
    let mut args = vec![
        "predict",
        "--checkpoint",
        path(&ckpt),
        "--saliency",
        "--top-k",
        "2",
        "--out",
        path(&pred_out),
    ];
    args.extend(images.iter().map(String::as_str));
    let o = hydravit(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let scores = std::fs::read_to_string(pred_out.join("reports/scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 4);
    let long = std::fs::read_to_string(pred_out.join("reports/predictions.csv")).unwrap();
    assert_eq!(long.lines().count(), 1 + 3 * 4);
    let pngs = std::fs::read_dir(pred_out.join("saliency"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"));
    assert_eq!(pngs.count(), 3);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hydravit"))
        .args(["synth", "--samples", "2", "--classes", "2"])
        .env("HYDRAVIT_OUTPUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("synth/manifest.csv").exists());
}

#[test]
fn ablation_rejects_unknown_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = hydravit(&[
        "ablate",
        "--config",
        path(&cfg),
        "--variants",
        "full,wings",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("wings"));
}
