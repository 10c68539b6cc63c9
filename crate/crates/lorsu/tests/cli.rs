//! Command-line behavior: exit codes, determinism, config precedence,
//! and the report/inspect round trips.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lorsu")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn gen_dataset(dir: &Path, name: &str, classes: usize, shots: usize, seed: u64) -> PathBuf {
    let out = dir.join(name);
    let st = Command::new(bin())
        .args([
            "generate",
            "--classes",
            &classes.to_string(),
            "--shots",
            &shots.to_string(),
            "--seed",
            &seed.to_string(),
            "--image-size",
            "8",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    out
}

#[test]
fn generate_is_deterministic_and_inspectable() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_dataset(dir.path(), "a.lsds", 4, 5, 1);
    let b = gen_dataset(dir.path(), "b.lsds", 4, 5, 1);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let out = run(&["inspect", a.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("classes: 4"), "{text}");
}

#[test]
fn generate_without_out_is_usage_error() {
    let out = run(&["generate", "--classes", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_strategy_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path(), "d.lsds", 4, 4, 2);
    let out = run(&[
        "run",
        "--data",
        data.to_str().unwrap(),
        "--strategy",
        "magic",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("strategy"), "{err}");
}

#[test]
fn missing_dataset_exits_2_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "run",
        "--data",
        dir.path().join("absent.lsds").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("data"), "{err}");
}

#[test]
fn frozen_run_reports_exactly_zero_ti() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path(), "d.lsds", 4, 6, 3);
    let outdir = dir.path().join("res");
    let out = run(&[
        "run",
        "--data",
        data.to_str().unwrap(),
        "--strategy",
        "frozen",
        "--shots",
        "3",
        "--sessions",
        "2",
        "--epochs",
        "1",
        "--batch",
        "4",
        "--seeds",
        "7",
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(outdir.join("results.json")).unwrap())
            .unwrap();
    assert_eq!(results["summary"]["ti_mean"].as_f64().unwrap(), 0.0);
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path(), "d.lsds", 4, 6, 4);
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(
        &cfg_path,
        format!(
            "# experiment config\nstrategy=frozen\ndata={}\nshots=3\nsessions=2\nepochs=1\nbatch=4\nseeds=5\nout={}\n",
            data.display(),
            dir.path().join("from_file").display()
        ),
    )
    .unwrap();
    // flag overrides the file's out dir
    let override_dir = dir.path().join("from_flag");
    let out = run(&[
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        override_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(override_dir.join("results.json").exists());
    assert!(!dir.path().join("from_file").exists());
}

#[test]
fn malformed_config_line_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.cfg");
    std::fs::write(&cfg_path, "strategy lorsu\n").unwrap();
    let out = run(&["run", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_merges_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path(), "d.lsds", 4, 6, 5);
    for (strategy, seed) in [("frozen", "1"), ("spu", "2")] {
        let st = Command::new(bin())
            .args([
                "run",
                "--data",
                data.to_str().unwrap(),
                "--strategy",
                strategy,
                "--shots",
                "3",
                "--sessions",
                "2",
                "--epochs",
                "1",
                "--batch",
                "4",
                "--lr",
                "1e-3",
                "--seeds",
                seed,
            ])
            .arg("--out")
            .arg(dir.path().join(strategy))
            .status()
            .unwrap();
        assert!(st.success());
    }
    let frozen_json = dir.path().join("frozen/results.json");
    let spu_json = dir.path().join("spu/results.json");
    let out = run(&["report", frozen_json.to_str().unwrap(), spu_json.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let frozen_line = text.lines().position(|l| l.starts_with("frozen"));
    let spu_line = text.lines().position(|l| l.starts_with("spu"));
    assert!(frozen_line.unwrap() < spu_line.unwrap(), "rows not sorted by method:\n{text}");

    // tampering with a stored metric must be caught
    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&spu_json).unwrap()).unwrap();
    doc["per_seed"][0]["ti"] = serde_json::json!(99.0);
    std::fs::write(&spu_json, serde_json::to_string(&doc).unwrap()).unwrap();
    let out = run(&["report", spu_json.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_rejects_schema_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bogus.json");
    std::fs::write(&p, "{\"not\": \"results\"}").unwrap();
    let out = run(&["report", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inspect_rejects_unknown_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.bin");
    std::fs::write(&p, [1u8, 2, 3, 4, 5]).unwrap();
    let out = run(&["inspect", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inspect_shows_checkpoint_with_plan() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path(), "d.lsds", 4, 6, 6);
    let outdir = dir.path().join("res");
    let st = Command::new(bin())
        .args([
            "run",
            "--data",
            data.to_str().unwrap(),
            "--strategy",
            "lorsu",
            "--shots",
            "3",
            "--sessions",
            "2",
            "--epochs",
            "1",
            "--batch",
            "4",
            "--lr",
            "1e-3",
            "--seeds",
            "3",
        ])
        .arg("--out")
        .arg(&outdir)
        .status()
        .unwrap();
    assert!(st.success());
    let ckpt = outdir.join("model_seed3.lsck");
    let out = run(&["inspect", ckpt.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("selection plan"), "{text}");
}
