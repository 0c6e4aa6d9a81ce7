use std::path::PathBuf;

use uniweight::cli::run;
use uniweight::config::RunConfig;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tiny() -> Vec<String> {
    [
        "--set",
        "train.schedule.epochs=1",
        "--set",
        "train.schedule.iters_per_epoch=10",
        "--set",
        "train.eval.heldout_scenes=4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn call(args: &[&str], extra: &[String]) -> i32 {
    let mut argv: Vec<String> = std::iter::once("uniweight").chain(args.iter().copied()).map(String::from).collect();
    argv.extend_from_slice(extra);
    run(argv)
}

#[test]
fn standard_config_is_the_default() {
    let c = RunConfig::load(&configs().join("standard.toml"), &[]).unwrap();
    assert_eq!(c, RunConfig::default());
    RunConfig::load(&configs().join("quick.toml"), &[]).unwrap();
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    assert_eq!(call(&["--help"], &[]), 0);
    assert_eq!(call(&["--version"], &[]), 0);
    assert_eq!(call(&["frobnicate"], &[]), 1);
    assert_eq!(call(&["train", "--config", "/nonexistent.toml", "--out", out], &[]), 1);
    assert_eq!(call(&["train", "--set", "train.nope=1", "--out", out], &[]), 1);
    assert_eq!(call(&["train", "--set", "train.scene.flip_prob=2", "--out", out], &[]), 1);
    assert_eq!(call(&["train", "--out", out], &tiny()), 0);
    assert!(tmp.path().join("o/run.json").exists());
}

#[test]
fn gradcheck_writes_a_passing_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(call(&["gradcheck", "--out", out, "--set", "experiments.gradcheck_probes=5"], &[]), 0);
    let csv = std::fs::read_dir(tmp.path()).unwrap().filter_map(|e| e.ok()).find(|e| e.file_name().to_string_lossy().starts_with("gradcheck_"));
    let body = std::fs::read_to_string(csv.unwrap().path()).unwrap();
    assert!(body.starts_with("name,probes,checked,excluded,max_rel_err,tol,passed\n"));
    assert!(body.lines().skip(1).all(|l| l.ends_with(",true")), "{body}");
}

#[test]
fn file_names_carry_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(call(&["train", "--out", out, "--seed", "7"], &tiny()), 0);
    let overrides: Vec<String> = tiny().into_iter().filter(|a| a != "--set").chain(["train.seed=7".to_string()]).collect();
    let cfg = RunConfig::from_toml_str("", &overrides).unwrap();
    let h = cfg.short_hash();
    for stem in ["history", "epochs", "trace", "checkpoint"] {
        let ext = if stem == "checkpoint" { "txt" } else { "csv" };
        assert!(tmp.path().join(format!("{stem}_{h}.{ext}")).exists(), "{stem}");
    }
}
