//! File formats consumed by downstream plotting: metrics and diagnostics
//! JSON lines, sweep and per-step CSVs, attention dumps, puzzle CSVs.

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::Value;
use tempfile::tempdir;
use utm::config::preset;
use utm::diagnostics::{quadrant_mass, read_attention_dump, read_jsonl};
use utm::run::{self, RunDir};
use utm::sudoku::{load_csv, BoxShape};
use utm::RunConfig;

const METRIC_FIELDS: [&str; 10] = [
    "step",
    "samples_seen",
    "lr",
    "lambda_t",
    "train_loss",
    "eval_em",
    "mean_halt",
    "halt_min",
    "halt_max",
    "router_grad_norm",
];

fn tiny(extra: &[&str]) -> RunConfig {
    let mut keys = vec![
        "model.hidden=16",
        "model.heads=2",
        "model.head_dim=8",
        "model.mem_tokens=2",
        "model.max_ponder=3",
        "train.batch_size=8",
        "train.max_steps=6",
        "train.eval_every=3",
        "train.eval_size=16",
        "train.chunk_size=4",
        "train.lr_warmup_steps=0",
        "data.train_size=64",
        "data.eval_size=16",
    ];
    keys.extend_from_slice(extra);
    preset("micro-default").unwrap().with_overrides(&keys).unwrap()
}

fn json_lines(path: &Path) -> Vec<Value> {
    read_jsonl(path).unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn run_directory_layout_and_metrics_schema() {
    let root = tempdir().unwrap();
    let cfg = tiny(&[]);
    let dir = RunDir::new(root.path().join("run"));
    let summary = run::run_train(&cfg, &dir, false, false).unwrap();
    assert_eq!(summary.steps, 6);

    let saved = RunConfig::load(&dir.config()).unwrap();
    assert_eq!(saved, cfg);
    assert!(dir.latest_checkpoint().exists());
    assert!(dir.checkpoints().join("step_0000006.ckpt").exists());

    let metrics = json_lines(&dir.metrics());
    assert_eq!(metrics.iter().map(|m| m["step"].as_u64().unwrap()).collect::<Vec<_>>(), [0, 3, 6]);
    let want: BTreeSet<&str> = METRIC_FIELDS.into_iter().collect();
    for m in &metrics {
        let keys: BTreeSet<&str> = m.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, want);
        assert!(m["halt_min"].as_f64().unwrap() <= m["mean_halt"].as_f64().unwrap());
        assert!(m["mean_halt"].as_f64().unwrap() <= m["halt_max"].as_f64().unwrap());
    }
    assert!(metrics[0]["train_loss"].is_null());
    assert!(metrics[2]["train_loss"].as_f64().unwrap() > 0.0);
    assert_eq!(metrics[2]["samples_seen"], 48);
    assert!(metrics[1]["router_grad_norm"].as_f64().unwrap() > 0.0);

    let diag = json_lines(&dir.diagnostics());
    let kinds: Vec<&str> = diag.iter().map(|d| d["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds.iter().filter(|&&k| k == "train_step").count(), 6);
    assert_eq!(kinds.iter().filter(|&&k| k == "eval").count(), 3);
    let eval = diag.iter().find(|d| d["kind"] == "eval").unwrap();
    let steps = eval["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 3);
    let quads = steps[0]["quadrants"].as_array().unwrap();
    assert_eq!(quads.len(), 2, "one entry per head");
    for q in quads {
        let s = q["s_to_m"].as_f64().unwrap() + q["s_to_s"].as_f64().unwrap();
        let m = q["m_to_m"].as_f64().unwrap() + q["m_to_s"].as_f64().unwrap();
        assert!((s - 1.0).abs() <= 1e-5 && (m - 1.0).abs() <= 1e-5);
    }
}

#[test]
fn resume_appends_to_logs() {
    let root = tempdir().unwrap();
    let dir = RunDir::new(root.path().join("run"));
    run::run_train(&tiny(&["train.max_steps=3"]), &dir, false, false).unwrap();
    let before = json_lines(&dir.metrics()).len();
    run::run_train(&tiny(&[]), &dir, true, false).unwrap();
    let steps: Vec<u64> = json_lines(&dir.metrics()).iter().map(|m| m["step"].as_u64().unwrap()).collect();
    assert_eq!(before, 2);
    // The resumed run does not repeat the evaluation at its starting step.
    assert_eq!(steps, [0, 3, 6]);
}

#[test]
fn memoryless_quadrants_serialize_sequence_only() {
    let root = tempdir().unwrap();
    let dir = RunDir::new(root.path().join("run"));
    run::run_train(&tiny(&["model.mem_tokens=0", "train.max_steps=1"]), &dir, false, false).unwrap();
    let diag = json_lines(&dir.diagnostics());
    let eval = diag.iter().find(|d| d["kind"] == "eval").unwrap();
    let q = &eval["steps"][0]["quadrants"][0];
    assert_eq!(q.as_object().unwrap().keys().collect::<Vec<_>>(), ["s_to_s"]);
    assert!(eval["mean_halt_memory"].is_null());
}

#[test]
fn extended_inference_and_diagnose_outputs() {
    let root = tempdir().unwrap();
    let cfg = tiny(&[]);
    let dir = RunDir::new(root.path().join("run"));
    run::run_train(&cfg, &dir, false, false).unwrap();

    let steps = run::infer_extended(&cfg, &dir.latest_checkpoint(), 7).unwrap();
    let csv = root.path().join("ext.csv");
    run::write_step_csv(&csv, &steps).unwrap();
    let (header, rows) = csv_rows(&csv);
    assert_eq!(header, ["step", "em_blend", "em_raw", "cell_acc_blend", "cell_acc_raw"]);
    assert_eq!(rows.len(), 7);
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row[0], k.to_string());
    }

    let out = root.path().join("diag");
    let files = run::run_diagnose(&cfg, &dir.latest_checkpoint(), 4, Some(5), &[0, 4], &out).unwrap();
    let preds = json_lines(&files.predictions);
    assert_eq!(preds.len(), 4 * 5);
    for p in &preds {
        assert_eq!(p["prediction"].as_str().unwrap().len(), 16);
        assert_eq!(p["correct"].as_array().unwrap().len(), 16);
        assert_eq!(p["total_cells"], 16);
    }
    assert_eq!(json_lines(&files.steps).len(), 5);

    let (t, l, maps) = read_attention_dump(&files.attention).unwrap();
    assert_eq!((t, l), (2, 16));
    assert_eq!(maps.iter().map(|(k, _)| *k).collect::<Vec<_>>(), [0, 4]);
    for (_, map) in &maps {
        assert_eq!(map.shape(), [2, 18, 18]);
        for q in quadrant_mass(map, t) {
            assert!((q.s_to_m.unwrap() + q.s_to_s - 1.0).abs() <= 1e-5);
            assert!((q.m_to_m.unwrap() + q.m_to_s.unwrap() - 1.0).abs() <= 1e-5);
        }
    }
    let eval = run::run_eval(&cfg, &dir.latest_checkpoint()).unwrap();
    assert!((0.0..=1.0).contains(&eval.eval_em));
}

#[test]
fn sweep_summary_groups_seeds() {
    let root = tempdir().unwrap();
    let mut cfg = RunConfig::from_toml_str(&format!(
        "{}\n[sweep]\n\"model.mem_tokens\" = [0, 2]\n\"train.seed\" = [0, 1]\n",
        tiny(&["train.max_steps=2"]).to_toml_string()
    ))
    .unwrap();
    cfg.name = "curve".into();
    let (cells, summary) = run::run_sweep(&cfg, root.path(), false).unwrap();
    assert_eq!(cells.len(), 4);
    assert!(cells.iter().all(|c| c.outcome.is_ok()));
    let (header, rows) = csv_rows(&summary);
    assert_eq!(
        header,
        [
            "group",
            "mem_tokens",
            "seeds",
            "em_per_seed",
            "em_mean",
            "em_std",
            "halt_mean",
            "halt_min",
            "halt_max",
            "token_steps",
            "failed"
        ]
    );
    assert_eq!(rows.len(), 2);
    let t: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(t, ["0", "2"]);
    for r in &rows {
        assert_eq!(r[2], "2");
        assert_eq!(r[3].split(';').count(), 2);
        assert!(r[10].is_empty());
    }
    // Every cell has its own run directory with logs.
    for c in &cells {
        let dir = RunDir::for_config(&root.path().join("curve"), &c.cfg);
        assert!(dir.metrics().exists(), "{}", dir.path.display());
    }
}

#[test]
fn puzzle_csv_fixture() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/puzzles.csv");
    let (puzzles, rejected) = load_csv(&path).unwrap();
    assert_eq!(rejected, 1);
    assert_eq!(puzzles.len(), 3);
    assert_eq!(puzzles[0].shape, BoxShape::MICRO);
    assert_eq!(puzzles[0].givens(), 7);
    assert_eq!(puzzles[2].shape, BoxShape::CLASSIC);
    assert!(puzzles.iter().all(|p| p.is_consistent()));
}

#[test]
fn csv_data_source_trains() {
    let root = tempdir().unwrap();
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/puzzles.csv");
    let micro: Vec<_> = load_csv(&fixture).unwrap().0.into_iter().filter(|p| p.shape == BoxShape::MICRO).collect();
    let path = root.path().join("micro.csv");
    utm::sudoku::write_csv(std::fs::File::create(&path).unwrap(), &micro).unwrap();
    let p = path.display().to_string();
    let cfg = tiny(&[
        "data.source=\"csv\"",
        &format!("data.train_csv=\"{p}\""),
        &format!("data.eval_csv=\"{p}\""),
        "train.batch_size=2",
        "train.max_steps=1",
        "train.eval_size=2",
    ]);
    let (train, eval) = run::load_data(&cfg).unwrap();
    assert_eq!((train.len(), eval.len()), (2, 2));
    run::run_train(&cfg, &RunDir::new(root.path().join("r")), false, false).unwrap();
}
