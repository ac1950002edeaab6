use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;
use utm::config::{preset, PRESETS};
use utm::params::param_count;

const TINY: &[&str] = &[
    "--set",
    "model.hidden=16",
    "--set",
    "model.heads=2",
    "--set",
    "model.head_dim=8",
    "--set",
    "model.max_ponder=3",
    "--set",
    "train.batch_size=8",
    "--set",
    "train.max_steps=4",
    "--set",
    "train.eval_every=2",
    "--set",
    "train.eval_size=16",
    "--set",
    "data.train_size=64",
    "--set",
    "data.eval_size=16",
];

fn cli(args: &[&str], runs: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_utm"))
        .args(args)
        .env("UTM_RUNS_DIR", runs)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn lists_and_shows_presets() {
    let tmp = tempdir().unwrap();
    let out = cli(&["presets"], tmp.path());
    assert!(out.status.success());
    assert_eq!(stdout(&out).lines().collect::<Vec<_>>(), PRESETS);

    let out = cli(&["presets", "--show", "lambda-warmup"], tmp.path());
    let shown = utm::RunConfig::from_toml_str(&stdout(&out)).unwrap();
    assert_eq!(shown, preset("lambda-warmup").unwrap());
}

#[test]
fn param_count_matches_library() {
    let tmp = tempdir().unwrap();
    for name in ["micro-default", "full-scale"] {
        let out = cli(&["param-count", "--preset", name], tmp.path());
        let n: usize = stdout(&out).trim().parse().unwrap();
        assert_eq!(n, param_count(&preset(name).unwrap().model));
    }
    let out = cli(&["param-count", "--breakdown", "--set", "model.mem_tokens=0"], tmp.path());
    let text = stdout(&out);
    assert!(text.contains("router.bias"));
    assert!(!text.contains("memory"));
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempdir().unwrap();
    let out = cli(&["param-count", "--set", "model.bogus=1"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error[config]"), "{}", stderr(&out));

    let out = cli(&["param-count", "--set", "act.epsilon=0.5"], tmp.path());
    assert_eq!(out.status.code(), Some(2));

    let missing = tmp.path().join("nowhere");
    let out = cli(&["eval", "--run-dir", missing.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("nowhere"), "{}", stderr(&out));

    let bad = tmp.path().join("bad.csv");
    std::fs::write(&bad, "puzzle,solution\n1.3..4.2..4..3.1\n").unwrap();
    let mut args = vec!["train", "--quiet", "--set", "data.source=\"csv\""];
    let train_csv = format!("data.train_csv=\"{}\"", bad.display());
    let eval_csv = format!("data.eval_csv=\"{}\"", bad.display());
    args.extend(["--set", &train_csv, "--set", &eval_csv]);
    let out = cli(&args, tmp.path());
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn gen_data_writes_loadable_csv() {
    let tmp = tempdir().unwrap();
    let path = tmp.path().join("p.csv");
    let out = cli(&["gen-data", "--out", path.to_str().unwrap(), "--count", "25", "--seed", "3"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let (puzzles, rejected) = utm::sudoku::load_csv(&path).unwrap();
    assert_eq!((puzzles.len(), rejected), (25, 0));
}

#[test]
fn train_then_inspect() {
    let tmp = tempdir().unwrap();
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();
    let mut args = vec!["train", "--quiet", "--run-dir", run_s];
    args.extend_from_slice(TINY);
    let out = cli(&args, tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("eval_em"));
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);

    let out = cli(&["eval", "--run-dir", run_s], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));

    let out = cli(&["infer-extended", "--run-dir", run_s, "--k-run", "6"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(run.join("extended_6.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);

    let out = cli(&["diagnose", "--run-dir", run_s, "--count", "3", "--steps", "0,2"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["step_diagnostics.jsonl", "predictions.jsonl", "attention.bin"] {
        assert!(run.join("diagnose").join(f).exists(), "{f}");
    }

    // Resuming a finished run keeps the log and reports the same result.
    let mut args = vec!["train", "--quiet", "--resume", "--run-dir", run_s];
    args.extend_from_slice(TINY);
    let out = cli(&args, tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap(), metrics);
}

#[test]
fn sweep_from_config_file() {
    let tmp = tempdir().unwrap();
    let mut cfg = preset("micro-default").unwrap();
    cfg.name = "seeds".into();
    let text = format!("{}\n[sweep]\n\"train.seed\" = [0, 1]\n", cfg.to_toml_string());
    let path = tmp.path().join("sweep.toml");
    std::fs::write(&path, text).unwrap();
    let mut args = vec!["sweep", "--quiet", "--config", path.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let out = cli(&args, tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let summary = std::fs::read_to_string(tmp.path().join("seeds").join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);

    // Training a sweep config directly is refused.
    let out = cli(&["train", "--config", path.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}
