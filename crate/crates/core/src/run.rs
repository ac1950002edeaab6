//! Run directories and the end-to-end commands built on them.
//!
//! ```text
//! <root>/<run-name>/
//!     config.toml          exact config of the run
//!     metrics.jsonl        one MetricsRecord per evaluation
//!     diagnostics.jsonl    train_step and eval records
//!     checkpoints/         step_NNNNNNN.ckpt, latest.ckpt
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use autodiff::Scalar;
use serde::{Deserialize, Serialize};

use crate::act::RunOptions;
use crate::config::{DataSource, Precision, RunConfig};
use crate::diagnostics::{per_step_predictions, step_diagnostics, write_attention_dump, JsonlWriter};
use crate::error::{Result, UtmError};
use crate::params::ModelParams;
use crate::sudoku::{gen_micro_split, load_csv, Puzzle};
use crate::train::{diagnose, evaluate, load_eval_params, train, StepEval, TrainOutputs, TrainState};

/// Environment variable naming the directory that holds run directories.
pub const RUNS_DIR_ENV: &str = "UTM_RUNS_DIR";

pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Filesystem-safe directory name for a run.
pub fn dir_name(name: &str) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '=') { c } else { '_' })
        .collect();
    if cleaned.is_empty() {
        "run".into()
    } else {
        cleaned
    }
}

#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        RunDir { path: path.into() }
    }

    pub fn for_config(root: &Path, cfg: &RunConfig) -> Self {
        RunDir::new(root.join(dir_name(&cfg.name)))
    }

    pub fn config(&self) -> PathBuf {
        self.path.join("config.toml")
    }

    pub fn metrics(&self) -> PathBuf {
        self.path.join("metrics.jsonl")
    }

    pub fn diagnostics(&self) -> PathBuf {
        self.path.join("diagnostics.jsonl")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.path.join("checkpoints")
    }

    pub fn latest_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("latest.ckpt")
    }
}

/// Training and evaluation puzzles for a config.
pub fn load_data(cfg: &RunConfig) -> Result<(Vec<Puzzle>, Vec<Puzzle>)> {
    let d = &cfg.data;
    let (train, eval) = match d.source {
        DataSource::Micro => gen_micro_split(d.train_size, d.eval_size, d.seed, (d.givens_min, d.givens_max)),
        DataSource::Csv => {
            let path = |p: &Option<PathBuf>, key: &str| {
                p.clone().ok_or_else(|| UtmError::config(key, "required when data.source = \"csv\""))
            };
            let (mut train, _) = load_csv(&path(&d.train_csv, "data.train_csv")?)?;
            let (mut eval, _) = load_csv(&path(&d.eval_csv, "data.eval_csv")?)?;
            train.truncate(d.train_size);
            eval.truncate(d.eval_size);
            (train, eval)
        }
    };
    if let Some(p) = train.iter().chain(&eval).find(|p| p.grid.len() != cfg.model.seq_len) {
        return Err(UtmError::config(
            "model.seq_len",
            format!("{} but the data has {}-cell puzzles", cfg.model.seq_len, p.grid.len()),
        ));
    }
    Ok((train, eval))
}

/// Headline numbers of a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub steps: usize,
    pub eval_em: f64,
    pub mean_halt: f64,
    pub halt_min: f64,
    pub halt_max: f64,
}

/// Trains one run into `dir`. With `resume`, continues from the latest
/// checkpoint if one exists.
pub fn run_train(cfg: &RunConfig, dir: &RunDir, resume: bool, verbose: bool) -> Result<RunSummary> {
    match cfg.train.precision {
        Precision::F32 => run_train_as::<f32>(cfg, dir, resume, verbose),
        Precision::F64 => run_train_as::<f64>(cfg, dir, resume, verbose),
    }
}

fn run_train_as<S: Scalar>(cfg: &RunConfig, dir: &RunDir, resume: bool, verbose: bool) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&dir.path)?;
    let resuming = resume && dir.latest_checkpoint().exists();
    if resuming {
        let saved = RunConfig::load(&dir.config())?;
        if saved.model != cfg.model {
            return Err(UtmError::config("model", "differs from the run being resumed"));
        }
    }
    std::fs::write(dir.config(), cfg.to_toml_string())?;
    let (train_set, eval_set) = load_data(cfg)?;
    let mut state = if resuming { TrainState::<S>::load(cfg, &dir.latest_checkpoint())? } else { TrainState::new(cfg) };
    let open = |p: PathBuf| if resuming { JsonlWriter::append(&p) } else { JsonlWriter::create(&p) };
    let mut out = TrainOutputs {
        metrics: Some(open(dir.metrics())?),
        diagnostics: Some(open(dir.diagnostics())?),
        checkpoint_dir: Some(dir.checkpoints()),
        verbose,
    };
    let report = train(cfg, &train_set, &eval_set, &mut state, &mut out)?;
    let last = match report.final_eval {
        Some(r) => r,
        None => {
            // Resumed after the schedule ended: report a fresh evaluation.
            let n = cfg.train.eval_size.min(eval_set.len());
            let res = evaluate(cfg, state.eval_params(cfg.train.ema_decay), &eval_set[..n], &RunOptions::default())?;
            crate::train::MetricsRecord {
                step: state.step,
                samples_seen: state.step * cfg.train.batch_size,
                lr: 0.0,
                lambda_t: cfg.act.lambda,
                train_loss: None,
                eval_em: res.em,
                mean_halt: res.mean_halt,
                halt_min: res.halt_min,
                halt_max: res.halt_max,
                router_grad_norm: None,
            }
        }
    };
    Ok(RunSummary {
        name: cfg.name.clone(),
        steps: last.step,
        eval_em: last.eval_em,
        mean_halt: last.mean_halt,
        halt_min: last.halt_min,
        halt_max: last.halt_max,
    })
}

/// Total token-steps of a configuration: `(T + L) * mean halt`, rounded.
pub fn token_steps(mem_tokens: usize, seq_len: usize, mean_halt: f64) -> usize {
    ((mem_tokens + seq_len) as f64 * mean_halt).round() as usize
}

/// Outcome of one sweep cell.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub cfg: RunConfig,
    pub outcome: std::result::Result<RunSummary, String>,
}

/// One row of the sweep summary: all seeds of one setting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub group: String,
    pub mem_tokens: usize,
    pub seeds: usize,
    /// `seed:em` pairs separated by `;`.
    pub em_per_seed: String,
    pub em_mean: Option<f64>,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub em_std: Option<f64>,
    pub halt_mean: Option<f64>,
    pub halt_min: Option<f64>,
    pub halt_max: Option<f64>,
    pub token_steps: Option<usize>,
    /// Seeds whose run failed, separated by `;`.
    pub failed: String,
}

fn group_name(name: &str) -> String {
    let Some(open) = name.find('[') else { return name.to_string() };
    let inner = name[open + 1..].trim_end_matches(']');
    let kept: Vec<&str> = inner.split(',').filter(|kv| !kv.starts_with("seed=")).collect();
    if kept.is_empty() {
        name[..open].to_string()
    } else {
        format!("{}[{}]", &name[..open], kept.join(","))
    }
}

/// Groups sweep cells over seeds.
pub fn summarize(cells: &[SweepCell]) -> Vec<SweepRow> {
    let mut groups: BTreeMap<String, Vec<&SweepCell>> = BTreeMap::new();
    let mut order = Vec::new();
    for c in cells {
        let g = group_name(&c.cfg.name);
        if !groups.contains_key(&g) {
            order.push(g.clone());
        }
        groups.entry(g).or_default().push(c);
    }
    order
        .into_iter()
        .map(|g| {
            let members = &groups[&g];
            let ok: Vec<(&SweepCell, &RunSummary)> =
                members.iter().filter_map(|c| c.outcome.as_ref().ok().map(|s| (*c, s))).collect();
            let ems: Vec<f64> = ok.iter().map(|(_, s)| s.eval_em).collect();
            let n = ems.len() as f64;
            let em_mean = (!ems.is_empty()).then(|| ems.iter().sum::<f64>() / n);
            let em_std = (ems.len() > 1).then(|| {
                let m = em_mean.unwrap_or(0.0);
                (ems.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            });
            let halt_mean = (!ok.is_empty()).then(|| ok.iter().map(|(_, s)| s.mean_halt).sum::<f64>() / n);
            let first = &members[0].cfg;
            SweepRow {
                group: g.clone(),
                mem_tokens: first.model.mem_tokens,
                seeds: members.len(),
                em_per_seed: ok
                    .iter()
                    .map(|(c, s)| format!("{}:{:.4}", c.cfg.train.seed, s.eval_em))
                    .collect::<Vec<_>>()
                    .join(";"),
                em_mean,
                em_std,
                halt_mean,
                halt_min: ok.iter().map(|(_, s)| s.halt_min).reduce(f64::min),
                halt_max: ok.iter().map(|(_, s)| s.halt_max).reduce(f64::max),
                token_steps: halt_mean.map(|h| token_steps(first.model.mem_tokens, first.model.seq_len, h)),
                failed: members
                    .iter()
                    .filter(|c| c.outcome.is_err())
                    .map(|c| c.cfg.train.seed.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
            }
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| UtmError::Invalid(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| UtmError::Invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every cell of a sweep in sequence under `root/<sweep-name>/`. A
/// failing cell is recorded and the sweep continues.
pub fn run_sweep(cfg: &RunConfig, root: &Path, verbose: bool) -> Result<(Vec<SweepCell>, PathBuf)> {
    let runs = cfg.expand()?;
    let sweep_dir = root.join(dir_name(&cfg.name));
    std::fs::create_dir_all(&sweep_dir)?;
    std::fs::write(sweep_dir.join("sweep.toml"), cfg.to_toml_string())?;
    let mut cells = Vec::new();
    for run in runs {
        if verbose {
            println!("== {}", run.name);
        }
        let dir = RunDir::for_config(&sweep_dir, &run);
        let outcome = run_train(&run, &dir, false, verbose).map_err(|e| e.to_string());
        if let (Err(e), true) = (&outcome, verbose) {
            println!("   failed: {e}");
        }
        cells.push(SweepCell { cfg: run, outcome });
    }
    let summary = sweep_dir.join("summary.csv");
    write_summary_csv(&summary, &summarize(&cells))?;
    Ok((cells, summary))
}

/// Evaluation weights from a checkpoint, at the config's precision.
fn with_params<R>(
    cfg: &RunConfig,
    ckpt: &Path,
    f32_fn: impl FnOnce(&ModelParams<f32>) -> Result<R>,
    f64_fn: impl FnOnce(&ModelParams<f64>) -> Result<R>,
) -> Result<R> {
    if !ckpt.exists() {
        return Err(UtmError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {} not found", ckpt.display()),
        )));
    }
    match cfg.train.precision {
        Precision::F32 => f32_fn(&load_eval_params(cfg, ckpt)?),
        Precision::F64 => f64_fn(&load_eval_params(cfg, ckpt)?),
    }
}

/// Exact match on the first `train.eval_size` evaluation puzzles.
pub fn run_eval(cfg: &RunConfig, ckpt: &Path) -> Result<RunSummary> {
    let (_, eval_set) = load_data(cfg)?;
    let set = &eval_set[..cfg.train.eval_size.min(eval_set.len())];
    let opts = RunOptions::default();
    let res = with_params(cfg, ckpt, |p| evaluate(cfg, p, set, &opts), |p| evaluate(cfg, p, set, &opts))?;
    Ok(RunSummary {
        name: cfg.name.clone(),
        steps: 0,
        eval_em: res.em,
        mean_halt: res.mean_halt,
        halt_min: res.halt_min,
        halt_max: res.halt_max,
    })
}

/// Per-step accuracy when iterating `k_run` steps, possibly past the
/// trained depth.
pub fn infer_extended(cfg: &RunConfig, ckpt: &Path, k_run: usize) -> Result<Vec<StepEval>> {
    if k_run == 0 {
        return Err(UtmError::config("k_run", "must be at least 1"));
    }
    let (_, eval_set) = load_data(cfg)?;
    let set = &eval_set[..cfg.train.eval_size.min(eval_set.len())];
    let opts = RunOptions { k_run: Some(k_run), per_step_readout: true, ..Default::default() };
    let res = with_params(cfg, ckpt, |p| evaluate(cfg, p, set, &opts), |p| evaluate(cfg, p, set, &opts))?;
    Ok(res.per_step)
}

pub fn write_step_csv(path: &Path, steps: &[StepEval]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| UtmError::Invalid(e.to_string()))?;
    for s in steps {
        w.serialize(s).map_err(|e| UtmError::Invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Files written by [`run_diagnose`].
#[derive(Clone, Debug)]
pub struct DiagnoseFiles {
    pub steps: PathBuf,
    pub predictions: PathBuf,
    pub attention: PathBuf,
}

/// Dumps step diagnostics, per-step predictions and attention maps for the
/// first `count` evaluation puzzles into `out_dir`.
pub fn run_diagnose(cfg: &RunConfig, ckpt: &Path, count: usize, k_run: Option<usize>, capture: &[usize], out_dir: &Path) -> Result<DiagnoseFiles> {
    let (_, eval_set) = load_data(cfg)?;
    let set = &eval_set[..count.min(eval_set.len())];
    let opts = RunOptions { k_run, per_step_readout: true, capture_attention: capture.to_vec(), ..Default::default() };
    let (traces, _, targets) = with_params(cfg, ckpt, |p| diagnose(cfg, p, set, &opts), |p| diagnose(cfg, p, set, &opts))?;
    std::fs::create_dir_all(out_dir)?;
    let files = DiagnoseFiles {
        steps: out_dir.join("step_diagnostics.jsonl"),
        predictions: out_dir.join("predictions.jsonl"),
        attention: out_dir.join("attention.bin"),
    };
    let mut w = JsonlWriter::create(&files.steps)?;
    for t in &traces {
        w.write(&step_diagnostics(t, cfg.model.mem_tokens))?;
    }
    w.flush()?;
    let mut w = JsonlWriter::create(&files.predictions)?;
    for rec in per_step_predictions(&traces, &targets, cfg.model.seq_len, 0, cfg.act.enabled) {
        w.write(&rec)?;
    }
    w.flush()?;
    let maps: Vec<_> = traces.iter().filter_map(|t| t.attention.clone().map(|a| (t.step, a))).collect();
    write_attention_dump(&files.attention, cfg.model.mem_tokens, cfg.model.seq_len, &maps)?;
    Ok(files)
}
