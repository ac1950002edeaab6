//! Observation-only statistics: router behaviour per step, attention
//! quadrant masses, router gradient norms and per-step prediction dumps.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use autodiff::{checkpoint, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::act::StepTrace;
use crate::error::{Result, UtmError};
use crate::model::argmax_rows;
use crate::params::{ModelParams, ROUTER_BIAS, ROUTER_WEIGHT};

/// Attention mass split by query group and key group. Memory quadrants are
/// absent when the model has no memory tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quadrants {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_to_m: Option<f64>,
    pub s_to_s: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub m_to_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub m_to_s: Option<f64>,
}

/// Mass of `rows` on columns `cols`, averaged uniformly over the rows.
fn block_mass(map: &[f64], n: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
    let count = rows.len();
    let total: f64 = rows.map(|r| map[r * n + cols.start..r * n + cols.end].iter().sum::<f64>()).sum();
    total / count as f64
}

/// Quadrant masses of one head's `[rows, rows]` attention map whose first
/// `t` rows and columns are memory.
pub fn map_quadrants(map: &[f64], rows: usize, t: usize) -> Quadrants {
    assert_eq!(map.len(), rows * rows, "attention map must be square");
    let s_to_s = block_mass(map, rows, t..rows, t..rows);
    if t == 0 {
        return Quadrants { s_to_m: None, s_to_s, m_to_m: None, m_to_s: None };
    }
    Quadrants {
        s_to_m: Some(block_mass(map, rows, t..rows, 0..t)),
        s_to_s,
        m_to_m: Some(block_mass(map, rows, 0..t, 0..t)),
        m_to_s: Some(block_mass(map, rows, 0..t, t..rows)),
    }
}

/// Per-head quadrants of a `[heads, rows, rows]` or `[B, heads, rows, rows]`
/// attention tensor, averaged over the batch.
pub fn quadrant_mass(attn: &Tensor<f64>, t: usize) -> Vec<Quadrants> {
    let shape = attn.shape();
    let (heads, rows) = (shape[shape.len() - 3], shape[shape.len() - 1]);
    let batch: usize = shape[..shape.len() - 3].iter().product();
    let per_map = rows * rows;
    (0..heads)
        .map(|h| {
            let maps: Vec<Quadrants> = (0..batch)
                .map(|b| {
                    let off = (b * heads + h) * per_map;
                    map_quadrants(&attn.data()[off..off + per_map], rows, t)
                })
                .collect();
            average(&maps)
        })
        .collect()
}

/// Arithmetic mean of several quadrant records (over heads or samples).
pub fn average(items: &[Quadrants]) -> Quadrants {
    let n = items.len().max(1) as f64;
    let avg = |f: &dyn Fn(&Quadrants) -> Option<f64>| -> Option<f64> {
        items.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
    };
    Quadrants {
        s_to_m: avg(&|q| q.s_to_m),
        s_to_s: items.iter().map(|q| q.s_to_s).sum::<f64>() / n,
        m_to_m: avg(&|q| q.m_to_m),
        m_to_s: avg(&|q| q.m_to_s),
    }
}

/// Router and blend statistics for one ponder step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub p_mean: Option<f64>,
    pub p_min: Option<f64>,
    pub p_max: Option<f64>,
    pub fraction_halted: Option<f64>,
    pub mean_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub quadrants: Option<Vec<Quadrants>>,
}

fn stats(values: &[f64]) -> (f64, f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

pub fn step_diagnostics(trace: &StepTrace, mem_tokens: usize) -> StepDiagnostics {
    let p = trace.probs.as_deref().map(stats);
    StepDiagnostics {
        step: trace.step,
        p_mean: p.map(|s| s.0),
        p_min: p.map(|s| s.1),
        p_max: p.map(|s| s.2),
        fraction_halted: trace
            .halted
            .as_ref()
            .map(|h| h.iter().filter(|&&x| x).count() as f64 / h.len().max(1) as f64),
        mean_weight: trace.weights.as_deref().map(|w| stats(w).0),
        quadrants: trace.attention.as_ref().map(|a| quadrant_mass(a, mem_tokens)),
    }
}

/// Default attention capture steps: first, middle and last.
pub fn default_capture_steps(k: usize) -> Vec<usize> {
    let mut steps = vec![0, k / 2, k.saturating_sub(1)];
    steps.dedup();
    steps
}

/// L2 norm of the router weight and bias gradients, given gradients laid
/// out in parameter order.
pub fn router_grad_norm<S: Scalar>(params: &ModelParams<S>, grads: &[Tensor<S>]) -> f64 {
    [ROUTER_WEIGHT, ROUTER_BIAS]
        .iter()
        .filter_map(|name| params.index_of(name))
        .map(|i| grads[i].sq_norm())
        .sum::<f64>()
        .sqrt()
}

/// Greedy decode at one step compared against the solution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPrediction {
    pub puzzle: usize,
    pub step: usize,
    pub correct_cells: usize,
    pub total_cells: usize,
    pub solved: bool,
    /// Predicted digits, one character per cell.
    pub prediction: String,
    pub correct: Vec<bool>,
}

/// Per-step prediction records from readouts captured during a forward pass.
/// `blend` selects the budget-blend readout over the raw hidden state.
pub fn per_step_predictions(
    traces: &[StepTrace],
    targets: &[usize],
    seq_len: usize,
    first_puzzle: usize,
    blend: bool,
) -> Vec<StepPrediction> {
    let mut out = Vec::new();
    for trace in traces {
        let logits = if blend { &trace.readout_blend } else { &trace.readout_raw };
        let Some(logits) = logits else { continue };
        let preds = argmax_rows(logits);
        for (b, (p, t)) in preds.chunks(seq_len).zip(targets.chunks(seq_len)).enumerate() {
            let correct: Vec<bool> = p.iter().zip(t).map(|(a, b)| a == b).collect();
            let n = correct.iter().filter(|&&c| c).count();
            out.push(StepPrediction {
                puzzle: first_puzzle + b,
                step: trace.step,
                correct_cells: n,
                total_cells: seq_len,
                solved: n == seq_len,
                prediction: p.iter().map(|&d| char::from_digit(d as u32, 36).unwrap_or('?')).collect(),
                correct,
            });
        }
    }
    out
}

/// Append-only JSON-lines writer.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JsonlWriter { out: BufWriter::new(file) })
    }

    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlWriter { out: BufWriter::new(File::create(path)?) })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Reads every record of a JSON-lines file.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(UtmError::from))
        .collect()
}

/// Attention dump in the checkpoint container: a `meta` tensor holding
/// `[mem_tokens, seq_len]` and one `step.{k}` tensor `[heads, rows, rows]`
/// (batch-averaged) per captured step.
pub fn write_attention_dump(path: &Path, mem_tokens: usize, seq_len: usize, steps: &[(usize, Tensor<f64>)]) -> Result<()> {
    let mut entries = vec![("meta".to_string(), Tensor::from_f64([2], &[mem_tokens as f64, seq_len as f64])?)];
    for (k, attn) in steps {
        entries.push((format!("step.{k}"), batch_mean(attn)?));
    }
    checkpoint::save(path, &entries)?;
    Ok(())
}

/// Reads an attention dump back as `(mem_tokens, seq_len, [(step, map)])`.
pub fn read_attention_dump(path: &Path) -> Result<(usize, usize, Vec<(usize, Tensor<f64>)>)> {
    let entries = checkpoint::load::<f64>(path)?;
    let mut meta = None;
    let mut steps = Vec::new();
    for (name, t) in entries {
        if name == "meta" {
            meta = Some((t.data()[0] as usize, t.data()[1] as usize));
        } else if let Some(k) = name.strip_prefix("step.").and_then(|k| k.parse().ok()) {
            steps.push((k, t));
        }
    }
    let (t, l) = meta.ok_or_else(|| UtmError::Invalid("attention dump lacks meta".into()))?;
    for (k, map) in &steps {
        let rows = map.shape().last().copied().unwrap_or(0);
        if rows != t + l {
            return Err(UtmError::Invalid(format!(
                "attention dump step {k}: {rows} rows but meta says {t} + {l}"
            )));
        }
    }
    Ok((t, l, steps))
}

fn batch_mean(attn: &Tensor<f64>) -> Result<Tensor<f64>> {
    let shape = attn.shape();
    if shape.len() == 3 {
        return Ok(attn.clone());
    }
    if shape.len() != 4 {
        return Err(UtmError::Invalid(format!("attention must be rank 3 or 4, got {shape:?}")));
    }
    let per = shape[1] * shape[2] * shape[3];
    let mut out = vec![0.0; per];
    for chunk in attn.data().chunks(per) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v / shape[0] as f64;
        }
    }
    Ok(Tensor::new(shape[1..].to_vec(), out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(heads: usize, rows: usize) -> Tensor<f64> {
        Tensor::full([heads, rows, rows], 1.0 / rows as f64)
    }

    #[test]
    fn uniform_attention_splits_by_column_count() {
        let q = quadrant_mass(&uniform(2, 97), 16);
        for h in q {
            assert!((h.s_to_m.unwrap() - 16.0 / 97.0).abs() < 1e-12);
            assert!((h.s_to_m.unwrap() + h.s_to_s - 1.0).abs() < 1e-12);
            assert!((h.m_to_m.unwrap() + h.m_to_s.unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sequence_only_head() {
        let (t, rows) = (2, 5);
        let map = Tensor::from_fn([1, rows, rows], |i| {
            let c = i % rows;
            if c >= t {
                1.0 / 3.0
            } else {
                0.0
            }
        });
        let q = &quadrant_mass(&map, t)[0];
        assert!(q.s_to_m.unwrap().abs() < 1e-12);
        assert!((q.s_to_s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_memory_reports_sequence_only() {
        let q = &quadrant_mass(&uniform(1, 4), 0)[0];
        assert_eq!(q.s_to_m, None);
        assert_eq!(q.m_to_m, None);
        assert!((q.s_to_s - 1.0).abs() < 1e-12);
        let json = serde_json::to_string(q).unwrap();
        assert_eq!(json, r#"{"s_to_s":1.0}"#);
    }

    #[test]
    fn capture_steps_default() {
        assert_eq!(default_capture_steps(18), vec![0, 9, 17]);
        assert_eq!(default_capture_steps(1), vec![0]);
    }

    #[test]
    fn zero_gradients_give_zero_router_norm() {
        let cfg = crate::config::ModelConfig::default();
        let p = ModelParams::<f64>::init(&cfg, 0);
        let zeros: Vec<_> = p.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        assert_eq!(router_grad_norm(&p, &zeros), 0.0);
    }

    #[test]
    fn attention_dump_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attn.bin");
        let a = Tensor::full([2, 3, 6, 6], 1.0 / 6.0);
        write_attention_dump(&path, 2, 4, &[(0, a.clone()), (3, a)]).unwrap();
        let (t, l, steps) = read_attention_dump(&path).unwrap();
        assert_eq!((t, l, steps.len()), (2, 4, 2));
        assert_eq!(steps[1].1.shape(), [3, 6, 6]);
        write_attention_dump(&path, 3, 4, &[(0, Tensor::full([1, 6, 6], 1.0 / 6.0))]).unwrap();
        assert!(read_attention_dump(&path).is_err());
    }
}
