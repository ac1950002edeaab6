//! Loss, schedules, AdamW, EMA and the training loop.
//!
//! A batch is split into fixed-size chunks. Each chunk builds its own graph
//! and the chunk gradients are summed in chunk order, so results do not
//! depend on the number of worker threads.

use std::path::{Path, PathBuf};

use autodiff::{checkpoint, Graph, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::act::{model_forward, HaltState, RunOptions, StepTrace};
use crate::config::{LossCells, RunConfig, WarmupShape};
use crate::diagnostics::{default_capture_steps, router_grad_norm, step_diagnostics, JsonlWriter, StepDiagnostics};
use crate::error::{Result, UtmError};
use crate::model::{argmax_rows, Forward};
use crate::params::ModelParams;
use crate::sudoku::{augment, mix_seed, Puzzle, PuzzleBatch};

/// Ponder coefficient at `step`. `Linear` ramps from 0 to `lambda` over
/// `warmup` steps; `Step` switches it on once warmup ends.
pub fn lambda_at_step(step: usize, lambda: f64, warmup: usize, shape: WarmupShape) -> f64 {
    if warmup == 0 || step >= warmup {
        return lambda;
    }
    match shape {
        WarmupShape::Linear => lambda * step as f64 / warmup as f64,
        WarmupShape::Step => 0.0,
    }
}

/// Half-cosine decay from `lr_max` at step 0 to 0 at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = step.min(total) as f64 / total as f64;
    (lr_max * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).max(0.0)
}

/// Learning rate of update `step` (0-based): optional linear warmup, then
/// cosine decay over the remaining steps.
pub fn lr_at_step(step: usize, total: usize, lr_max: f64, warmup: usize) -> f64 {
    if step < warmup {
        return lr_max * (step + 1) as f64 / warmup as f64;
    }
    cosine_lr(step - warmup, total.saturating_sub(warmup), lr_max)
}

/// Fraction of puzzles whose every cell is predicted correctly.
pub fn exact_match(predictions: &[usize], targets: &[usize], seq_len: usize) -> f64 {
    let puzzles = targets.len() / seq_len.max(1);
    if puzzles == 0 {
        return 0.0;
    }
    let solved = predictions.chunks(seq_len).zip(targets.chunks(seq_len)).filter(|(p, t)| p == t).count();
    solved as f64 / puzzles as f64
}

/// Per-cell cross-entropy weights so that summing chunk losses yields the
/// batch mean over the selected cells.
pub fn cell_weights(givens: &[bool], cells: LossCells, batch_cells: usize, batch_blanks: usize) -> Vec<f64> {
    match cells {
        LossCells::All => vec![1.0 / batch_cells as f64; givens.len()],
        LossCells::Blanks => {
            let w = 1.0 / batch_blanks.max(1) as f64;
            givens.iter().map(|&g| if g { 0.0 } else { w }).collect()
        }
    }
}

/// Mean cross-entropy over the cells plus `lambda_t` times the mean ponder
/// cost. `weights` defaults to uniform over all cells.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    targets: &[usize],
    weights: Option<&[f64]>,
    ponder: Option<Var>,
    lambda_t: f64,
) -> Result<Var> {
    let uniform;
    let weights = match weights {
        Some(w) => w,
        None => {
            uniform = vec![1.0 / targets.len().max(1) as f64; targets.len()];
            &uniform
        }
    };
    let ce = g.weighted_cross_entropy(logits, targets, weights)?;
    match ponder {
        Some(rho) if lambda_t != 0.0 => {
            let term = g.scale(rho, lambda_t);
            Ok(g.add(ce, term)?)
        }
        _ => Ok(ce),
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new<'a>(shapes: impl Iterator<Item = &'a [usize]>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes.map(|s| (Tensor::zeros(s.to_vec()), Tensor::zeros(s.to_vec()))).unzip();
        AdamW { beta1, beta2, eps, weight_decay, t: 0, m, v }
    }

    /// One update: `theta -= lr * wd * theta`, then the bias-corrected Adam
    /// step.
    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut Tensor<S>>, grads: &[Tensor<S>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j].as_f64();
                let mj = self.beta1 * m[j].as_f64() + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j].as_f64() + (1.0 - self.beta2) * gj * gj;
                m[j] = S::lit(mj);
                v[j] = S::lit(vj);
                let mut th = theta.as_f64();
                th -= lr * self.weight_decay * th;
                th -= lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                *theta = S::lit(th);
            }
        }
    }
}

/// `ema = decay * ema + (1 - decay) * params`.
pub fn ema_update<S: Scalar>(ema: &mut ModelParams<S>, params: &ModelParams<S>, decay: f64) {
    for (e, p) in ema.tensors_mut().zip(params.tensors()) {
        for (a, b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = S::lit(decay * a.as_f64() + (1.0 - decay) * b.as_f64());
        }
    }
}

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S> {
    pub params: ModelParams<S>,
    pub ema: ModelParams<S>,
    pub adam: AdamW<S>,
    /// Optimizer updates completed.
    pub step: usize,
}

const PARAM: &str = "param/";
const EMA: &str = "ema/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";
const META: &str = "meta/state";

impl<S: Scalar> TrainState<S> {
    pub fn new(cfg: &RunConfig) -> Self {
        let params = ModelParams::init(&cfg.model, cfg.train.seed);
        let t = &cfg.train;
        let adam = AdamW::new(params.tensors().map(|x| x.shape()), t.beta1, t.beta2, t.adam_eps, t.weight_decay);
        TrainState { ema: params.clone(), params, adam, step: 0 }
    }

    /// Weights used for evaluation.
    pub fn eval_params(&self, ema_decay: f64) -> &ModelParams<S> {
        if ema_decay > 0.0 {
            &self.ema
        } else {
            &self.params
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let named = |prefix: &str, ts: &mut dyn Iterator<Item = &Tensor<S>>| -> Vec<(String, Tensor<S>)> {
            self.params.names().zip(ts).map(|(n, t)| (format!("{prefix}{n}"), t.clone())).collect()
        };
        entries.extend(named(PARAM, &mut self.params.tensors()));
        entries.extend(named(EMA, &mut self.ema.tensors()));
        entries.extend(named(ADAM_M, &mut self.adam.m.iter()));
        entries.extend(named(ADAM_V, &mut self.adam.v.iter()));
        entries.push((META.to_string(), Tensor::from_f64([2], &[self.step as f64, self.adam.t as f64])?));
        checkpoint::save(path, &entries)?;
        Ok(())
    }

    pub fn load(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let entries = checkpoint::load::<S>(path)?;
        let group = |prefix: &str| -> Vec<(String, Tensor<S>)> {
            entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
                .collect()
        };
        let params = ModelParams::from_entries(&cfg.model, group(PARAM))?;
        let ema = ModelParams::from_entries(&cfg.model, group(EMA))?;
        let m = ModelParams::from_entries(&cfg.model, group(ADAM_M))?;
        let v = ModelParams::from_entries(&cfg.model, group(ADAM_V))?;
        let meta = entries
            .iter()
            .find(|(n, _)| n == META)
            .map(|(_, t)| t.to_f64_vec())
            .ok_or_else(|| UtmError::Invalid(format!("{} is not a training checkpoint", path.display())))?;
        let mut state = TrainState::new(cfg);
        state.params = params;
        state.ema = ema;
        state.adam.m = m.tensors().cloned().collect();
        state.adam.v = v.tensors().cloned().collect();
        state.step = meta[0] as usize;
        state.adam.t = meta[1] as u64;
        Ok(state)
    }
}

/// Loads evaluation weights from a training checkpoint (EMA if present) or
/// a bare parameter file.
pub fn load_eval_params<S: Scalar>(cfg: &RunConfig, path: &Path) -> Result<ModelParams<S>> {
    let entries = checkpoint::load::<S>(path)?;
    let prefix = if cfg.train.ema_decay > 0.0 && entries.iter().any(|(n, _)| n.starts_with(EMA)) {
        Some(EMA)
    } else if entries.iter().any(|(n, _)| n.starts_with(PARAM)) {
        Some(PARAM)
    } else {
        None
    };
    let picked = match prefix {
        Some(p) => entries.into_iter().filter_map(|(n, t)| n.strip_prefix(p).map(|s| (s.to_string(), t))).collect(),
        None => entries,
    };
    ModelParams::from_entries(&cfg.model, picked)
}

/// One record per evaluation; field names are a stable interface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub samples_seen: usize,
    pub lr: f64,
    pub lambda_t: f64,
    pub train_loss: Option<f64>,
    pub eval_em: f64,
    pub mean_halt: f64,
    pub halt_min: f64,
    pub halt_max: f64,
    pub router_grad_norm: Option<f64>,
}

/// Lines of `diagnostics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiagnosticRecord {
    TrainStep {
        step: usize,
        loss: f64,
        router_grad_norm: Option<f64>,
        mean_halt: f64,
    },
    Eval {
        step: usize,
        mean_halt_memory: Option<f64>,
        steps: Vec<StepDiagnostics>,
    },
}

/// Accuracy at one ponder step of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEval {
    pub step: usize,
    pub em_blend: f64,
    pub em_raw: f64,
    pub cell_acc_blend: f64,
    pub cell_acc_raw: f64,
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub em: f64,
    pub cell_accuracy: f64,
    pub mean_halt: f64,
    pub halt_min: f64,
    pub halt_max: f64,
    pub halt: Option<HaltState>,
    pub predictions: Vec<usize>,
    pub per_step: Vec<StepEval>,
}

struct ChunkEval {
    predictions: Vec<usize>,
    halt: Option<HaltState>,
    readouts: Vec<(Vec<usize>, Vec<usize>)>,
}

fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if threads > 0 {
        b = b.num_threads(threads);
    }
    b.build().map_err(|e| UtmError::Invalid(format!("thread pool: {e}")))
}

/// Greedy evaluation in fixed-size chunks.
pub fn evaluate<S: Scalar>(cfg: &RunConfig, params: &ModelParams<S>, puzzles: &[Puzzle], opts: &RunOptions) -> Result<EvalResult> {
    let batch = PuzzleBatch::from_puzzles(puzzles);
    let l = cfg.model.seq_len;
    if batch.batch > 0 && batch.seq_len != l {
        return Err(UtmError::config("model.seq_len", format!("{} but puzzles have {} cells", l, batch.seq_len)));
    }
    let chunk = cfg.train.chunk_size.max(1);
    let starts: Vec<usize> = (0..batch.batch).step_by(chunk).collect();
    let pool = build_pool(cfg.train.threads)?;
    let parts: Vec<Result<ChunkEval>> = pool.install(|| {
        starts
            .par_iter()
            .map(|&s| {
                let part = batch.slice(s, chunk.min(batch.batch - s));
                let mut g = Graph::new();
                let f = Forward::new(&mut g, &cfg.model, params);
                let out = model_forward(&f, &mut g, &cfg.act, &part.tokens, part.batch, opts)?;
                let predictions = argmax_rows(g.value(out.logits));
                let readouts = out
                    .steps
                    .iter()
                    .filter_map(|t| Some((argmax_rows(t.readout_blend.as_ref()?), argmax_rows(t.readout_raw.as_ref()?))))
                    .collect();
                Ok(ChunkEval { predictions, halt: out.halt, readouts })
            })
            .collect()
    });
    let parts: Vec<ChunkEval> = parts.into_iter().collect::<Result<_>>()?;

    let predictions: Vec<usize> = parts.iter().flat_map(|p| p.predictions.iter().copied()).collect();
    let em = exact_match(&predictions, &batch.targets, l);
    let cell_accuracy = cell_acc(&predictions, &batch.targets);
    let halts: Vec<HaltState> = parts.iter().filter_map(|p| p.halt.clone()).collect();
    let halt = HaltState::concat(&halts);
    let depth = opts.k_run.unwrap_or(cfg.model.max_ponder) as f64;
    let (mean_halt, halt_min, halt_max) = match &halt {
        Some(h) => {
            let per = h.puzzle_mean_halts();
            (
                h.mean_halt(),
                per.iter().copied().fold(f64::INFINITY, f64::min),
                per.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        }
        None => (depth, depth, depth),
    };

    let steps = parts.first().map_or(0, |p| p.readouts.len());
    let per_step = (0..steps)
        .map(|k| {
            let blend: Vec<usize> = parts.iter().flat_map(|p| p.readouts[k].0.iter().copied()).collect();
            let raw: Vec<usize> = parts.iter().flat_map(|p| p.readouts[k].1.iter().copied()).collect();
            StepEval {
                step: k,
                em_blend: exact_match(&blend, &batch.targets, l),
                em_raw: exact_match(&raw, &batch.targets, l),
                cell_acc_blend: cell_acc(&blend, &batch.targets),
                cell_acc_raw: cell_acc(&raw, &batch.targets),
            }
        })
        .collect();
    Ok(EvalResult { em, cell_accuracy, mean_halt, halt_min, halt_max, halt, predictions, per_step })
}

fn cell_acc(pred: &[usize], targets: &[usize]) -> f64 {
    let n = pred.iter().zip(targets).filter(|(a, b)| a == b).count();
    n as f64 / targets.len().max(1) as f64
}

/// Step traces of one diagnostic forward pass with attention captured.
pub fn diagnose<S: Scalar>(cfg: &RunConfig, params: &ModelParams<S>, puzzles: &[Puzzle], opts: &RunOptions) -> Result<(Vec<StepTrace>, Option<HaltState>, Vec<usize>)> {
    let batch = PuzzleBatch::from_puzzles(puzzles);
    let mut g = Graph::new();
    let f = Forward::new(&mut g, &cfg.model, params);
    let out = model_forward(&f, &mut g, &cfg.act, &batch.tokens, batch.batch, opts)?;
    Ok((out.steps, out.halt, batch.targets))
}

/// Where training output goes. Everything is optional so tests can train
/// purely in memory.
#[derive(Default)]
pub struct TrainOutputs {
    pub metrics: Option<JsonlWriter>,
    pub diagnostics: Option<JsonlWriter>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Print a progress line per evaluation.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
    pub total_steps: usize,
    pub final_eval: Option<MetricsRecord>,
}

struct ChunkGrad<S> {
    grads: Vec<Tensor<S>>,
    loss: f64,
    halt: Option<HaltState>,
}

/// Steps per epoch (dropping the ragged tail) and total optimizer steps.
pub fn schedule_len(cfg: &RunConfig, train_len: usize) -> Result<(usize, usize)> {
    let per_epoch = train_len / cfg.train.batch_size;
    if per_epoch == 0 {
        return Err(UtmError::config(
            "train.batch_size",
            format!("{} exceeds the {train_len} training puzzles", cfg.train.batch_size),
        ));
    }
    let total = if cfg.train.max_steps > 0 { cfg.train.max_steps } else { per_epoch * cfg.train.epochs };
    Ok((per_epoch, total))
}

/// Training-set indices for update `step`.
pub fn batch_indices(cfg: &RunConfig, train_len: usize, step: usize) -> Result<Vec<usize>> {
    let (per_epoch, _) = schedule_len(cfg, train_len)?;
    let (epoch, within) = (step / per_epoch, step % per_epoch);
    let mut order: Vec<usize> = (0..train_len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.train.seed, epoch as u64));
    order.shuffle(&mut rng);
    let b = cfg.train.batch_size;
    Ok(order[within * b..(within + 1) * b].to_vec())
}

/// Summed gradients and loss of one batch.
pub fn batch_gradients<S: Scalar>(
    cfg: &RunConfig,
    params: &ModelParams<S>,
    batch: &PuzzleBatch,
    lambda_t: f64,
    pool: &rayon::ThreadPool,
) -> Result<(Vec<Tensor<S>>, f64, Option<HaltState>)> {
    let chunk = cfg.train.chunk_size.max(1);
    let cells = batch.batch * batch.seq_len;
    let blanks = batch.givens.iter().filter(|&&g| !g).count();
    let starts: Vec<usize> = (0..batch.batch).step_by(chunk).collect();
    let opts = RunOptions::default();
    let parts: Vec<Result<ChunkGrad<S>>> = pool.install(|| {
        starts
            .par_iter()
            .map(|&s| {
                let part = batch.slice(s, chunk.min(batch.batch - s));
                let mut g = Graph::new();
                let f = Forward::new(&mut g, &cfg.model, params);
                let out = model_forward(&f, &mut g, &cfg.act, &part.tokens, part.batch, &opts)?;
                let weights = cell_weights(&part.givens, cfg.train.loss_cells, cells, blanks);
                let ponder = match out.ponder {
                    Some(rho) => Some(g.scale(rho, part.batch as f64 / batch.batch as f64)),
                    None => None,
                };
                let loss = total_loss(&mut g, out.logits, &part.targets, Some(&weights), ponder, lambda_t)?;
                let value = g.value(loss).item()?.as_f64();
                let mut grads = g.backward(loss)?;
                let grads = f
                    .params
                    .vars()
                    .iter()
                    .zip(params.tensors())
                    .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                    .collect();
                Ok(ChunkGrad { grads, loss: value, halt: out.halt })
            })
            .collect()
    });
    let mut total: Option<Vec<Tensor<S>>> = None;
    let mut loss = 0.0;
    let mut halts = Vec::new();
    for part in parts {
        let part = part?;
        loss += part.loss;
        halts.extend(part.halt);
        match &mut total {
            None => total = Some(part.grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&part.grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x = *x + *y;
                    }
                }
            }
        }
    }
    let grads = total.ok_or_else(|| UtmError::Invalid("empty batch".into()))?;
    Ok((grads, loss, HaltState::concat(&halts)))
}

fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::lit(max_norm / norm);
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v = *v * scale);
        }
    }
}

fn sample_batch(cfg: &RunConfig, train: &[Puzzle], step: usize) -> Result<PuzzleBatch> {
    let idx = batch_indices(cfg, train.len(), step)?;
    if cfg.data.augment {
        let seed = mix_seed(cfg.train.seed ^ 0xA5A5_A5A5, step as u64);
        let aug: Vec<Puzzle> = idx.iter().map(|&i| augment(&train[i], mix_seed(seed, i as u64))).collect();
        Ok(PuzzleBatch::from_puzzles(&aug))
    } else {
        Ok(PuzzleBatch::from_puzzles(idx.iter().map(|&i| &train[i])))
    }
}

/// Trains from `state` (fresh or resumed) to the end of the schedule.
pub fn train<S: Scalar>(
    cfg: &RunConfig,
    train: &[Puzzle],
    eval: &[Puzzle],
    state: &mut TrainState<S>,
    out: &mut TrainOutputs,
) -> Result<TrainReport> {
    cfg.validate()?;
    let (_, total) = schedule_len(cfg, train.len())?;
    let t = &cfg.train;
    let eval_set = &eval[..t.eval_size.min(eval.len())];
    let diag_set = &eval_set[..eval_set.len().min(t.chunk_size)];
    let pool = build_pool(t.threads)?;
    let mut report = TrainReport { records: Vec::new(), total_steps: total, final_eval: None };
    let mut loss_acc = (0.0, 0usize);
    if state.step == 0 {
        let lr = lr_at_step(0, total, t.lr_max, t.lr_warmup_steps);
        let rec = eval_record(cfg, state, eval_set, diag_set, 0, lr, None, None, out)?;
        report.records.push(rec);
    }
    while state.step < total {
        let step = state.step;
        let lr = lr_at_step(step, total, t.lr_max, t.lr_warmup_steps);
        let lambda_t = lambda_at_step(step, cfg.act.lambda, cfg.act.lambda_warmup_steps, cfg.act.warmup_shape);
        let batch = sample_batch(cfg, train, step)?;
        let (mut grads, loss, halt) = batch_gradients(cfg, &state.params, &batch, lambda_t, &pool)?;
        if !loss.is_finite() {
            return Err(UtmError::Invalid(format!("loss became {loss} at step {step}")));
        }
        let router = cfg.act.enabled.then(|| router_grad_norm(&state.params, &grads));
        if t.grad_clip > 0.0 {
            clip_global_norm(&mut grads, t.grad_clip);
        }
        state.adam.step(state.params.tensors_mut(), &grads, lr);
        ema_update(&mut state.ema, &state.params, t.ema_decay);
        state.step += 1;
        loss_acc = (loss_acc.0 + loss, loss_acc.1 + 1);

        if let Some(w) = out.diagnostics.as_mut() {
            w.write(&DiagnosticRecord::TrainStep {
                step: state.step,
                loss,
                router_grad_norm: router,
                mean_halt: halt.as_ref().map_or(cfg.model.max_ponder as f64, HaltState::mean_halt),
            })?;
        }
        let at_end = state.step == total;
        if state.step % t.eval_every == 0 || at_end {
            let train_loss = Some(loss_acc.0 / loss_acc.1 as f64);
            loss_acc = (0.0, 0);
            let rec = eval_record(cfg, state, eval_set, diag_set, state.step, lr, train_loss, router, out)?;
            report.records.push(rec);
        }
        if let Some(dir) = &out.checkpoint_dir {
            if (t.checkpoint_every > 0 && state.step % t.checkpoint_every == 0) || at_end {
                std::fs::create_dir_all(dir)?;
                state.save(&dir.join(format!("step_{:07}.ckpt", state.step)))?;
                state.save(&dir.join("latest.ckpt"))?;
            }
        }
    }
    report.final_eval = report.records.last().cloned();
    if let Some(w) = out.metrics.as_mut() {
        w.flush()?;
    }
    if let Some(w) = out.diagnostics.as_mut() {
        w.flush()?;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn eval_record<S: Scalar>(
    cfg: &RunConfig,
    state: &TrainState<S>,
    eval_set: &[Puzzle],
    diag_set: &[Puzzle],
    step: usize,
    lr: f64,
    train_loss: Option<f64>,
    router: Option<f64>,
    out: &mut TrainOutputs,
) -> Result<MetricsRecord> {
    let params = state.eval_params(cfg.train.ema_decay);
    let res = evaluate(cfg, params, eval_set, &RunOptions::default())?;
    let rec = MetricsRecord {
        step,
        samples_seen: step * cfg.train.batch_size,
        lr,
        lambda_t: lambda_at_step(step, cfg.act.lambda, cfg.act.lambda_warmup_steps, cfg.act.warmup_shape),
        train_loss,
        eval_em: res.em,
        mean_halt: res.mean_halt,
        halt_min: res.halt_min,
        halt_max: res.halt_max,
        router_grad_norm: router,
    };
    if let Some(w) = out.metrics.as_mut() {
        w.write(&rec)?;
        w.flush()?;
    }
    if let Some(w) = out.diagnostics.as_mut() {
        if !diag_set.is_empty() {
            let opts = RunOptions { capture_attention: default_capture_steps(cfg.model.max_ponder), ..Default::default() };
            let (traces, halt, _) = diagnose(cfg, params, diag_set, &opts)?;
            w.write(&DiagnosticRecord::Eval {
                step,
                mean_halt_memory: halt.as_ref().and_then(HaltState::mean_halt_memory),
                steps: traces.iter().map(|t| step_diagnostics(t, cfg.model.mem_tokens)).collect(),
            })?;
        }
    }
    if out.verbose {
        println!(
            "step {:>6}  loss {}  eval_em {:.4}  halt {:.2} [{:.2}, {:.2}]",
            step,
            train_loss.map_or("-".to_string(), |l| format!("{l:.4}")),
            rec.eval_em,
            rec.mean_halt,
            rec.halt_min,
            rec.halt_max
        );
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_schedule_points() {
        let l = |s| lambda_at_step(s, 0.001, 20_000, WarmupShape::Linear);
        assert_eq!(l(0), 0.0);
        assert!((l(20_000) - 0.001).abs() < 1e-12);
        assert!((l(10_000) - 0.0005).abs() < 1e-12);
        assert_eq!(lambda_at_step(5, 0.001, 10, WarmupShape::Step), 0.0);
        assert_eq!(lambda_at_step(3, 0.2, 0, WarmupShape::Linear), 0.2);
    }

    #[test]
    fn cosine_points() {
        assert!((cosine_lr(0, 1000, 3e-4) - 3e-4).abs() < 1e-12);
        assert!(cosine_lr(1000, 1000, 3e-4).abs() < 1e-12);
        assert!((cosine_lr(500, 1000, 3e-4) - 1.5e-4).abs() < 1e-12);
        assert_eq!(lr_at_step(0, 100, 1.0, 10), 0.1);
        assert_eq!(lr_at_step(10, 110, 1.0, 10), 1.0);
    }

    #[test]
    fn exact_match_counts_whole_puzzles() {
        assert_eq!(exact_match(&[1, 2, 3, 4], &[1, 2, 3, 4], 2), 1.0);
        assert_eq!(exact_match(&[1, 2, 3, 3], &[1, 2, 3, 4], 2), 0.5);
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut p = vec![Tensor::<f64>::from_fn([3], |i| i as f64)];
        let before = p.clone();
        let mut opt = AdamW::new(p.iter().map(|t| t.shape()), 0.9, 0.999, 1e-8, 0.0);
        opt.step(p.iter_mut(), &[Tensor::zeros([3])], 0.1);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut opt = AdamW::new(p.iter().map(|t| t.shape()), 0.9, 0.999, 1e-8, 0.0);
        opt.step(p.iter_mut(), &[Tensor::scalar(0.37)], 0.01);
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let expect = 1.0 - 0.01 * 0.37 / (0.37 + 1e-8);
        assert!((p[0].data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = vec![Tensor::<f64>::scalar(2.0)];
        let mut opt = AdamW::new(p.iter().map(|t| t.shape()), 0.9, 0.999, 1e-8, 0.1);
        opt.step(p.iter_mut(), &[Tensor::scalar(0.0)], 0.5);
        assert!((p[0].data()[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn ema_edge_decays() {
        let cfg = crate::config::ModelConfig { hidden: 8, heads: 1, head_dim: 8, ..Default::default() };
        let a = ModelParams::<f64>::init(&cfg, 1);
        let b = ModelParams::<f64>::init(&cfg, 2);
        let mut e = a.clone();
        ema_update(&mut e, &b, 0.0);
        assert_eq!(e, b);
        let mut e = a.clone();
        ema_update(&mut e, &b, 1.0);
        assert_eq!(e, a);
        let mut e = a.clone();
        for _ in 0..5 {
            ema_update(&mut e, &a, 0.9);
        }
        for (x, y) in e.tensors().zip(a.tensors()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn uniform_logits_loss_is_log_vocab() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros([2, 3, 11]));
        let loss = total_loss(&mut g, logits, &[1, 2, 3, 4, 5, 6], None, None, 0.0).unwrap();
        assert!((g.value(loss).data()[0] - 11f64.ln()).abs() < 1e-12);
        let bad = total_loss(&mut g, logits, &[1, 2, 3, 4, 5, 11], None, None, 0.0);
        assert!(bad.is_err());
    }

    #[test]
    fn perfect_logits_leave_only_ponder_term() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::from_fn([1, 2, 3], |i| if i == 1 || i == 5 { 100.0 } else { -100.0 }));
        let rho = g.constant(Tensor::scalar(2.5));
        let loss = total_loss(&mut g, logits, &[1, 2], None, Some(rho), 0.01).unwrap();
        assert!((g.value(loss).data()[0] - 0.025).abs() < 1e-12);
        let plain = total_loss(&mut g, logits, &[1, 2], None, Some(rho), 0.0).unwrap();
        assert!(g.value(plain).data()[0].abs() < 1e-12);
    }

    #[test]
    fn blank_weights_ignore_givens() {
        let w = cell_weights(&[true, false, false, true], LossCells::Blanks, 4, 2);
        assert_eq!(w, vec![0.0, 0.5, 0.5, 0.0]);
        assert_eq!(cell_weights(&[true, false], LossCells::All, 4, 1), vec![0.25, 0.25]);
    }
}
