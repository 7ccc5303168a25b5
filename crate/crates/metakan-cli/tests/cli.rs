//! End-to-end tests of the installed binary: exit codes, artifact layout,
//! and byte-level reproducibility.

#![allow(clippy::needless_range_loop)]

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};
use std::sync::atomic::{AtomicU32, Ordering};

static DIR_COUNTER: AtomicU32 = AtomicU32::new(0);

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metakan"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let n = DIR_COUNTER.fetch_add(1, Ordering::SeqCst);
    let dir =
        std::env::temp_dir().join(format!("metakan-cli-test-{}-{tag}-{n}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &std::path::Path, name: &str, contents: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, contents).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

const QUICK_FIT: &str = r#"{
  "target": "product2",
  "train_samples": 200,
  "test_samples": 50,
  "model": { "kind": "metakan", "shape": [2, 2, 1], "d_hidden": 8 },
  "train": { "steps": 120, "batch_size": 32, "seed": 7 }
}"#;

#[test]
fn fit_writes_artifacts_and_exits_zero() {
    let dir = temp_dir("fit");
    let config = write_config(&dir, "fit.json", QUICK_FIT);
    let out = dir.join("run");
    let output = run(&[
        "fit",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        exit_code(&output),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    for artifact in [
        "model.json",
        "trace.csv",
        "report.json",
        "effective_config.json",
    ] {
        assert!(out.join(artifact).is_file(), "missing {artifact}");
    }
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,loss,lr_meta,lr_prompts,wall_ms\n"));
    assert_eq!(trace.lines().count(), 121);
}

#[test]
fn fit_is_byte_identical_across_reruns() {
    let dir = temp_dir("repro");
    let config = write_config(&dir, "fit.json", QUICK_FIT);
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let output = run(&[
            "fit",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&output), 0);
    }
    for artifact in ["model.json", "trace.csv", "report.json"] {
        let a = fs::read(out_a.join(artifact)).unwrap();
        let b = fs::read(out_b.join(artifact)).unwrap();
        assert_eq!(a, b, "{artifact} differs between reruns");
    }
}

#[test]
fn effective_config_can_be_refed_to_reproduce() {
    let dir = temp_dir("refeed");
    let config = write_config(&dir, "fit.json", QUICK_FIT);
    let out_a = dir.join("a");
    let output = run(&[
        "fit",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_a.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&output), 0);

    // Feed the echoed config back in; only the output dir changes.
    let echoed = out_a.join("effective_config.json");
    let out_b = dir.join("b");
    let output = run(&[
        "fit",
        "--config",
        echoed.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert_eq!(
        exit_code(&output),
        0,
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert_eq!(
        fs::read(out_a.join("model.json")).unwrap(),
        fs::read(out_b.join("model.json")).unwrap(),
        "re-fed config must reproduce the model"
    );
}

#[test]
fn fit_rejects_unknown_config_key_naming_it() {
    let dir = temp_dir("badkey");
    let config = write_config(&dir, "bad.json", r#"{"gird": 5}"#);
    let output = run(&["fit", "--config", config.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 2);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("gird"),
        "stderr should name the key: {stderr}"
    );
}

#[test]
fn fit_unwritable_output_dir_is_io_error() {
    let dir = temp_dir("io");
    let config = write_config(&dir, "fit.json", QUICK_FIT);
    // A file where the output directory should go.
    let blocker = dir.join("blocker");
    fs::write(&blocker, "not a dir").unwrap();
    let out = blocker.join("sub");
    let output = run(&[
        "fit",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&output), 4);
}

#[test]
fn count_prints_table_rows() {
    let output = run(&[
        "count",
        "--shape",
        "2,2,1,1",
        "--G",
        "5",
        "--k",
        "3",
        "--d-hidden",
        "5",
        "--C",
        "1",
    ]);
    assert_eq!(exit_code(&output), 0);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("mlp") && stdout.contains(" 7"));
    assert!(stdout.contains("kan(G=5,k=3)") && stdout.contains("63"));
    assert!(stdout.contains("metakan(d=5,C=1)") && stdout.contains("61"));
    assert!(stdout.contains("efficient"));
}

#[test]
fn count_rejects_short_shape() {
    let output = run(&["count", "--shape", "2"]);
    assert_eq!(exit_code(&output), 2);
}

#[test]
fn cluster_prints_intervals() {
    let output = run(&["cluster", "2,64,128,512,1024,1024,1024,1024", "--C", "3"]);
    assert_eq!(exit_code(&output), 0);
    assert_eq!(
        String::from_utf8_lossy(&output.stdout).trim(),
        "(0,2) (3,3) (4,7)"
    );
}

#[test]
fn cluster_single_and_out_of_range() {
    let output = run(&["cluster", "2,64,128", "--C", "1"]);
    assert_eq!(String::from_utf8_lossy(&output.stdout).trim(), "(0,2)");
    let output = run(&["cluster", "2,64,128", "--C", "9"]);
    assert_eq!(exit_code(&output), 2);
}

#[test]
fn gradcheck_passes_for_metakan_and_wavkan() {
    for kind in ["metakan", "wavkan"] {
        let output = run(&[
            "gradcheck",
            "--kind",
            kind,
            "--shape",
            "2,3,1",
            "--seed",
            "3",
        ]);
        assert_eq!(
            exit_code(&output),
            0,
            "{kind}: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        assert!(String::from_utf8_lossy(&output.stdout).contains("max rel err"));
    }
}

#[test]
fn gradcheck_sabotage_fails() {
    let output = run(&[
        "gradcheck",
        "--kind",
        "kan",
        "--shape",
        "2,2,1",
        "--sabotage",
    ]);
    assert_ne!(exit_code(&output), 0);
}

#[test]
fn analyze_roundtrips_on_trained_metakan() {
    let dir = temp_dir("analyze");
    let config = write_config(&dir, "fit.json", QUICK_FIT);
    let out = dir.join("run");
    let output = run(&[
        "fit",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&output), 0);

    let analysis = dir.join("analysis");
    let output = run(&[
        "analyze",
        "--model",
        out.join("model.json").to_str().unwrap(),
        "--out",
        analysis.to_str().unwrap(),
    ]);
    assert_eq!(
        exit_code(&output),
        0,
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );

    // Shape [2,2,1] has two layers; each gets one distance and one cosine CSV.
    for l in 0..2 {
        for name in ["prompt_distance", "coeff_cosine"] {
            let path = analysis.join(format!("{name}_layer{l}.csv"));
            let contents = fs::read_to_string(&path).unwrap();
            let rows: Vec<Vec<f64>> = contents
                .lines()
                .map(|line| line.split(',').map(|v| v.parse().unwrap()).collect())
                .collect();
            // Square and symmetric.
            assert_eq!(rows.len(), rows[0].len(), "{name} layer {l} not square");
            for a in 0..rows.len() {
                for b in 0..rows.len() {
                    assert_eq!(rows[a][b], rows[b][a], "{name} layer {l} asymmetric");
                }
            }
        }
    }
}

#[test]
fn analyze_plain_kan_skips_distances_with_notice() {
    let dir = temp_dir("analyze-kan");
    let config = write_config(
        &dir,
        "fit.json",
        r#"{
  "target": "product2",
  "train_samples": 100,
  "test_samples": 20,
  "model": { "kind": "kan", "shape": [2, 2, 1] },
  "train": { "steps": 30, "batch_size": 32, "seed": 1 }
}"#,
    );
    let out = dir.join("run");
    run(&[
        "fit",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let analysis = dir.join("analysis");
    let output = run(&[
        "analyze",
        "--model",
        out.join("model.json").to_str().unwrap(),
        "--out",
        analysis.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&output), 0);
    assert!(String::from_utf8_lossy(&output.stderr).contains("skipped"));
    assert!(analysis.join("coeff_cosine_layer0.csv").is_file());
    assert!(!analysis.join("prompt_distance_layer0.csv").exists());
}

#[test]
fn analyze_truncated_model_is_config_error_with_location() {
    let dir = temp_dir("truncated");
    let path = write_config(
        &dir,
        "model.json",
        r#"{"format_version": 1, "model": {"type"#,
    );
    let output = run(&["analyze", "--model", path.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 2);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("line") && stderr.contains("column"),
        "{stderr}"
    );
}

#[test]
fn sweep_ranks_models_and_writes_artifacts() {
    let dir = temp_dir("sweep");
    let config = write_config(
        &dir,
        "sweep.json",
        r#"{
  "target": "product2",
  "train_samples": 200,
  "test_samples": 50,
  "models": [
    { "kind": "kan", "shape": [2, 2, 1] },
    { "kind": "metakan", "shape": [2, 2, 1], "d_hidden": 8 }
  ],
  "train": { "steps": 60, "batch_size": 32, "seed": 2 }
}"#,
    );
    let out = dir.join("run");
    let output = run(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        exit_code(&output),
        0,
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("name,model,shape,G,k,c,d_hidden,C,prompt_dim,params_formula"));
    assert_eq!(summary.lines().count(), 3);
    let jsonl = fs::read_to_string(out.join("reports.jsonl")).unwrap();
    assert_eq!(jsonl.trim().lines().count(), 2);
}
