use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn scglr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scglr"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn simulate(dir: &Path, seed: &str) {
    let out = scglr(
        &[
            "simulate", "--n", "120", "--groups", "8", "--p", "12", "--q", "2", "--family", "poisson", "--seed", seed,
            "--out", "data",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_writes_two_files_deterministically() {
    let tmp = TempDir::new().unwrap();
    let out = scglr(
        &[
            "simulate", "--n", "300", "--groups", "10", "--p", "30", "--q", "3", "--family", "poisson", "--sigma2",
            "0.5", "--seed", "42", "--out", "data/",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let data = fs::read(tmp.path().join("data/data.csv")).unwrap();
    let truth = fs::read(tmp.path().join("data/truth.json")).unwrap();
    let out = scglr(
        &[
            "simulate", "--n", "300", "--groups", "10", "--p", "30", "--q", "3", "--family", "poisson", "--sigma2",
            "0.5", "--seed", "42", "--out", "again/",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read(tmp.path().join("again/data.csv")).unwrap(), data);
    assert_eq!(fs::read(tmp.path().join("again/truth.json")).unwrap(), truth);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = scglr(&["simulate", "--n", "300"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    simulate(tmp.path(), "1");
    let out = scglr(
        &["fit", "--in", "data/data.csv", "--H", "0", "--out", "m.json"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let out = scglr(
        &["fit", "--in", "data/data.csv", "--s", "1.5", "--out", "m.json"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_writes_model_and_trace() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "3");
    let out = scglr(
        &[
            "fit",
            "--in",
            "data/data.csv",
            "--mixed",
            "--H",
            "3",
            "--out",
            "fits/model.json",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("fits/model.json")).unwrap()).unwrap();
    assert_eq!(doc["version"], "scglr-mix/1");
    assert_eq!(doc["kind"], "mixed");
    let loadings = doc["loadings"].as_array().unwrap();
    assert_eq!(loadings.len(), 12);
    assert!(loadings.iter().all(|r| r.as_array().unwrap().len() == 3));
    assert_eq!(doc["random"]["sigma2"].as_array().unwrap().len(), 2);
    let trace = fs::read_to_string(tmp.path().join("fits/model.trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(
        lines.next().unwrap(),
        "component,iteration,criterion,delta_u,delta_coef,delta_sigma2,sigma2_y1,sigma2_y2"
    );
    assert!(lines.count() >= 3);
}

#[test]
fn fit_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "5");
    for name in ["a.json", "b.json"] {
        let out = scglr(
            &[
                "fit",
                "--in",
                "data/data.csv",
                "--mixed",
                "--H",
                "2",
                "--seed",
                "9",
                "--out",
                name,
            ],
            tmp.path(),
        );
        assert_eq!(out.status.code(), Some(0));
    }
    assert_eq!(
        fs::read(tmp.path().join("a.json")).unwrap(),
        fs::read(tmp.path().join("b.json")).unwrap()
    );
}

#[test]
fn iteration_cap_exits_3_and_keeps_model() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "2");
    let out = scglr(
        &[
            "fit",
            "--in",
            "data/data.csv",
            "--mixed",
            "--H",
            "2",
            "--max-iter",
            "1",
            "--out",
            "m.json",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(tmp.path().join("m.json").exists());
}

#[test]
fn bad_input_exits_1() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "2");
    let out = scglr(&["fit", "--in", "missing.csv", "--out", "m.json"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let out = scglr(
        &["fit", "--in", "data/data.csv", "--response", "nope", "--out", "m.json"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn predict_modes_and_unknown_groups() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "4");
    let out = scglr(
        &["fit", "--in", "data/data.csv", "--mixed", "--H", "2", "--out", "m.json"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    for flag in [None, Some("--conditional")] {
        let mut args = vec![
            "predict",
            "--in",
            "data/data.csv",
            "--model",
            "m.json",
            "--out",
            "p.csv",
        ];
        args.extend(flag);
        let out = scglr(&args, tmp.path());
        assert_eq!(out.status.code(), Some(0));
        let text = fs::read_to_string(tmp.path().join("p.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), "row,group,mu_y1,mu_y2");
        assert_eq!(text.lines().count(), 121);
    }

    let data = fs::read_to_string(tmp.path().join("data/data.csv")).unwrap();
    let renamed: String = data
        .lines()
        .map(|l| format!("{}\n", l.replace(",g1", ",zz1")))
        .collect();
    fs::write(tmp.path().join("new.csv"), renamed).unwrap();
    let out = scglr(
        &[
            "predict",
            "--in",
            "new.csv",
            "--model",
            "m.json",
            "--conditional",
            "--out",
            "p.csv",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("zz1"));
    let out = scglr(
        &["predict", "--in", "new.csv", "--model", "m.json", "--out", "p.csv"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn cv_prints_full_grid_and_selection() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "6");
    let out = scglr(
        &[
            "cv",
            "--in",
            "data/data.csv",
            "--mixed",
            "--H",
            "1,2,3",
            "--s",
            "0,0.5",
            "--l",
            "1,4",
            "--folds",
            "4",
            "--restarts",
            "2",
            "--out",
            "cv.csv",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 1 + 12 + 1);
    assert!(stdout.lines().last().unwrap().starts_with("selected H="));
    let table = fs::read_to_string(tmp.path().join("cv.csv")).unwrap();
    assert_eq!(table.lines().count(), 13);
    assert_eq!(table.lines().filter(|l| l.ends_with(",1")).count(), 1);
}

#[test]
fn compare_writes_one_row_per_method_and_response() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "7");
    let data = fs::read_to_string(tmp.path().join("data/data.csv")).unwrap();
    let mut lines = data.lines();
    let header = lines.next().unwrap();
    let (mut train, mut test) = (format!("{header}\n"), format!("{header}\n"));
    for (i, line) in lines.enumerate() {
        if i % 4 == 3 { &mut test } else { &mut train }.push_str(&format!("{line}\n"));
    }
    fs::write(tmp.path().join("train.csv"), train).unwrap();
    fs::write(tmp.path().join("test.csv"), test).unwrap();
    let out = scglr(
        &[
            "compare",
            "--in",
            "train.csv",
            "--test",
            "test.csv",
            "--mixed",
            "--H",
            "1,2",
            "--folds",
            "4",
            "--restarts",
            "2",
            "--lambda-grid",
            "0.1,1,10",
            "--conditional",
            "--out",
            "cmp.csv",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(tmp.path().join("cmp.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(
        rows[0],
        "method,response,\"lambda_or_(H,s,l)\",holdout_deviance,holdout_rmse"
    );
    assert_eq!(rows.len(), 1 + 4);
    assert_eq!(rows.iter().filter(|r| r.starts_with("scglr-mix,")).count(), 2);
    assert_eq!(rows.iter().filter(|r| r.starts_with("ridge-mix,")).count(), 2);
}

#[test]
fn threads_flag_is_accepted() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "8");
    let out = scglr(
        &[
            "--threads",
            "1",
            "fit",
            "--in",
            "data/data.csv",
            "--H",
            "1",
            "--out",
            "m.json",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let out = scglr(
        &["fit", "--threads", "0", "--in", "data/data.csv", "--out", "m.json"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}
