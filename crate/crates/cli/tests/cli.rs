use std::fs;
use std::path::Path;
use std::process::Command;

use nalgebra::DMatrix;
use tempfile::TempDir;

use saber::datagen::{toy_sample, ToyConfig};
use saber::saber::{predict_saber, SaberModel};
use saber_cli::commands::{fit, FitConfig};
use saber_cli::io::{read_config, read_inputs};

const SMALL_FIT: &str = r#"{"saber": {"scale_count": 4, "scale_center": 2.0, "scale_per_decade": 2.0, "max_em": 6}}"#;

fn saber() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_saber"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn toy_files(dir: &Path) {
    let cfg = ToyConfig { c1: 2.5, c2: 0.0, c3: 0.0, n: 80, seed: 9 };
    toy_sample(&cfg).unwrap().write_csv(&dir.join("train.csv")).unwrap();
    let grid = ToyConfig { n: 25, seed: 10, ..cfg };
    toy_sample(&grid).unwrap().write_csv(&dir.join("query.csv")).unwrap();
    fs::write(dir.join("fit.json"), SMALL_FIT).unwrap();
}

fn run_fit(dir: &Path) {
    let status = saber()
        .args(["fit", "--seed", "3", "--config"])
        .arg(dir.join("fit.json"))
        .arg("--data")
        .arg(dir.join("train.csv"))
        .arg("--out")
        .arg(dir.join("model"))
        .status()
        .unwrap();
    assert!(status.success());
}

fn last_column(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().last().unwrap().to_string()).collect()
}

#[test]
fn fit_and_predict_match_the_library() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    toy_files(dir);
    run_fit(dir);
    let model_path = dir.join("model/model.json");
    assert!(dir.join("model/manifest.json").exists());

    // the same fit in process writes the same model
    let cfg: FitConfig = read_config(Some(&dir.join("fit.json"))).unwrap();
    fit(cfg, Some(3), &dir.join("train.csv"), None, &dir.join("inproc")).unwrap();
    assert_eq!(fs::read_to_string(&model_path).unwrap(), fs::read_to_string(dir.join("inproc/model.json")).unwrap());

    let status = saber()
        .arg("predict")
        .arg("--model")
        .arg(&model_path)
        .arg("--input")
        .arg(dir.join("query.csv"))
        .arg("--out")
        .arg(dir.join("pred"))
        .status()
        .unwrap();
    assert!(status.success());
    let from_cli: Vec<f64> = last_column(&dir.join("pred/predictions.csv")).iter().map(|s| s.parse().unwrap()).collect();
    let model = SaberModel::load(&model_path).unwrap();
    let xq: DMatrix<f64> = read_inputs(&dir.join("query.csv")).unwrap();
    let direct = predict_saber(&xq, &model).unwrap();
    assert_eq!(from_cli.len(), direct.len());
    for (a, b) in from_cli.iter().zip(direct.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn complexity_is_positive_and_finite() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    toy_files(dir);
    run_fit(dir);
    let status = saber()
        .arg("lfc")
        .arg("--model")
        .arg(dir.join("model/model.json"))
        .arg("--input")
        .arg(dir.join("query.csv"))
        .arg("--out")
        .arg(dir.join("lfc"))
        .status()
        .unwrap();
    assert!(status.success());
    let values = last_column(&dir.join("lfc/lfc.csv"));
    assert_eq!(values.len(), 25);
    for v in values {
        let c: f64 = v.parse().unwrap();
        assert!(c.is_finite() && c > 0.0, "complexity {c}");
    }
}

#[test]
fn input_errors_exit_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    toy_files(dir);
    run_fit(dir);
    fs::write(dir.join("wide.csv"), "x_1,x_2\n0.5,0.5\n1.0,2.0\n").unwrap();
    let out = saber()
        .arg("predict")
        .arg("--model")
        .arg(dir.join("model/model.json"))
        .arg("--input")
        .arg(dir.join("wide.csv"))
        .arg("--out")
        .arg(dir.join("pred"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("columns"));

    fs::write(dir.join("bad.json"), r#"{"gate_width": 3}"#).unwrap();
    let out = saber()
        .args(["fit", "--config"])
        .arg(dir.join("bad.json"))
        .arg("--data")
        .arg(dir.join("train.csv"))
        .arg("--out")
        .arg(dir.join("never"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_exit_with_code_four() {
    let tmp = TempDir::new().unwrap();
    let out = saber()
        .args(["predict", "--model"])
        .arg(tmp.path().join("absent.json"))
        .arg("--input")
        .arg(tmp.path().join("absent.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}
