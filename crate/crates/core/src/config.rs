//! Run configuration: TOML with `[model]`, `[act]`, `[train]`, `[data]` and
//! an optional `[sweep]` table. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::UtmError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Derf,
    Rms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    /// Memory tokens prepended to every sequence.
    pub mem_tokens: usize,
    /// Iteration ceiling during training; also the step-embedding table size.
    pub max_ponder: usize,
    pub norm_kind: NormKind,
    pub router_bias_init: f64,
    /// Cells per puzzle.
    pub seq_len: usize,
    pub init_std: f64,
    pub rope_base: f64,
    /// QK normalization before the rotary embedding (otherwise after).
    pub qk_norm_before_rope: bool,
    /// Add the step embedding at every iteration (otherwise only the first).
    pub step_embedding_every_iteration: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 128,
            heads: 4,
            head_dim: 32,
            vocab: 6,
            mem_tokens: 4,
            max_ponder: 8,
            norm_kind: NormKind::Derf,
            router_bias_init: -3.0,
            seq_len: 16,
            init_std: 0.02,
            rope_base: 10_000.0,
            qk_norm_before_rope: true,
            step_embedding_every_iteration: true,
        }
    }
}

impl ModelConfig {
    /// Full-scale model on 9x9 grids.
    pub fn full_scale() -> Self {
        ModelConfig {
            hidden: 512,
            heads: 8,
            head_dim: 64,
            vocab: 11,
            mem_tokens: 16,
            max_ponder: 18,
            seq_len: 81,
            ..ModelConfig::default()
        }
    }

    /// Rows per sequence: memory tokens followed by cells.
    pub fn rows(&self) -> usize {
        self.mem_tokens + self.seq_len
    }

    /// SwiGLU inner width: 8/3 of `hidden`, rounded to the nearest multiple of 8.
    pub fn ffn_width(&self) -> usize {
        let raw = 8.0 * self.hidden as f64 / 3.0;
        ((raw / 8.0).round() as usize * 8).max(8)
    }

    pub fn validate(&self) -> Result<(), UtmError> {
        let bad = |key: &str, msg: &str| Err(UtmError::config(format!("model.{key}"), msg));
        if self.heads == 0 || self.head_dim == 0 || self.hidden != self.heads * self.head_dim {
            return bad("hidden", "hidden must equal heads * head_dim");
        }
        if self.head_dim % 2 != 0 {
            return bad("head_dim", "rotary embedding needs an even head_dim");
        }
        if self.max_ponder == 0 {
            return bad("max_ponder", "must be at least 1");
        }
        if self.seq_len == 0 {
            return bad("seq_len", "must be at least 1");
        }
        if self.vocab < 2 {
            return bad("vocab", "must be at least 2");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PonderScope {
    /// Memory and sequence tokens.
    All,
    Sequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmupShape {
    Linear,
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActConfig {
    pub enabled: bool,
    pub epsilon: f64,
    pub lambda: f64,
    pub lambda_warmup_steps: usize,
    pub warmup_shape: WarmupShape,
    pub ponder_scope: PonderScope,
    /// Halted tokens keep their last representation instead of evolving.
    pub freeze_halted: bool,
}

impl Default for ActConfig {
    fn default() -> Self {
        ActConfig {
            enabled: true,
            epsilon: 0.01,
            lambda: 0.0,
            lambda_warmup_steps: 0,
            warmup_shape: WarmupShape::Linear,
            ponder_scope: PonderScope::All,
            freeze_halted: false,
        }
    }
}

impl ActConfig {
    pub fn validate(&self) -> Result<(), UtmError> {
        if !(self.epsilon > 0.0 && self.epsilon <= 0.1) {
            return Err(UtmError::config("act.epsilon", "must lie in (0, 0.1]"));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(UtmError::config("act.lambda", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossCells {
    All,
    Blanks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps (0 = run all epochs).
    pub max_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    /// Global-norm clip (0 disables).
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_size: usize,
    pub checkpoint_every: usize,
    pub loss_cells: LossCells,
    pub precision: Precision,
    /// Samples per independent graph; fixes the gradient summation order.
    pub chunk_size: usize,
    /// Worker threads for chunk evaluation (0 = rayon default).
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 3e-4,
            lr_warmup_steps: 0,
            batch_size: 256,
            epochs: 4,
            max_steps: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.999,
            grad_clip: 0.0,
            seed: 0,
            eval_every: 500,
            eval_size: 2000,
            checkpoint_every: 0,
            loss_cells: LossCells::All,
            precision: Precision::F32,
            chunk_size: 16,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), UtmError> {
        let positive = [
            ("train.batch_size", self.batch_size),
            ("train.epochs", self.epochs),
            ("train.eval_every", self.eval_every),
            ("train.chunk_size", self.chunk_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(UtmError::config(key, "must be positive"));
            }
        }
        if !(self.lr_max > 0.0) {
            return Err(UtmError::config("train.lr_max", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(UtmError::config("train.ema_decay", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generated 4x4 puzzles.
    Micro,
    /// Puzzle/solution CSV files.
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_size: usize,
    pub eval_size: usize,
    pub givens_min: usize,
    pub givens_max: usize,
    pub seed: u64,
    pub train_csv: Option<PathBuf>,
    pub eval_csv: Option<PathBuf>,
    /// Random symmetry augmentations drawn per training sample.
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Micro,
            train_size: 50_000,
            eval_size: 2_000,
            givens_min: 4,
            givens_max: 12,
            seed: 1234,
            train_csv: None,
            eval_csv: None,
            augment: false,
        }
    }
}

/// Full run description. `sweep` maps dotted keys to value lists whose
/// cartesian product expands into individual runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub model: ModelConfig,
    pub act: ActConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), UtmError> {
        self.model.validate()?;
        self.act.validate()?;
        self.train.validate()?;
        if self.data.givens_min > self.data.givens_max {
            return Err(UtmError::config("data.givens_min", "exceeds data.givens_max"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, UtmError> {
        let value: toml::Value = toml::from_str(text).map_err(|e| UtmError::config("<file>", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self, UtmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    fn from_value(value: toml::Value) -> Result<Self, UtmError> {
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| {
            UtmError::config(unknown_key(&e.to_string()).unwrap_or("<file>".into()), e.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `section.key=value` overrides; values parse as TOML scalars
    /// and fall back to strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, UtmError> {
        let mut value = toml::Value::try_from(self).expect("config serializes");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| UtmError::config(item, "override must look like section.key=value"))?;
            set_dotted(&mut value, key.trim(), parse_scalar(raw.trim()))?;
        }
        Self::from_value(value)
    }

    /// Expands the sweep grid into concrete runs (sweep table cleared).
    /// Without a sweep, returns the config itself.
    pub fn expand(&self) -> Result<Vec<RunConfig>, UtmError> {
        let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
        for (key, values) in &self.sweep {
            if values.is_empty() {
                return Err(UtmError::config(format!("sweep.{key}"), "empty value list"));
            }
            combos = combos
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut next = prefix.clone();
                        next.push((key.clone(), v.clone()));
                        next
                    })
                })
                .collect();
        }
        let mut base = self.clone();
        base.sweep.clear();
        combos
            .into_iter()
            .map(|assignments| {
                let mut value = toml::Value::try_from(&base).expect("config serializes");
                let mut suffix = Vec::new();
                for (key, v) in &assignments {
                    set_dotted(&mut value, key, v.clone())?;
                    let short = key.rsplit('.').next().unwrap_or(key);
                    suffix.push(format!("{short}={}", display_value(v)));
                }
                let mut cfg = Self::from_value(value)?;
                if !suffix.is_empty() {
                    cfg.name = format!("{}[{}]", base.name, suffix.join(","));
                }
                Ok(cfg)
            })
            .collect()
    }
}

pub(crate) fn display_value(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn unknown_key(msg: &str) -> Option<String> {
    let start = msg.find("unknown field `")? + "unknown field `".len();
    let end = msg[start..].find('`')? + start;
    Some(msg[start..end].to_string())
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), UtmError> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = root;
    for part in path {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(*part))
            .ok_or_else(|| UtmError::config(key, "unknown section"))?;
    }
    let table = node.as_table_mut().ok_or_else(|| UtmError::config(key, "not a table"))?;
    let known = table.contains_key(*last);
    // Optional keys (e.g. data.train_csv) are absent when unset.
    let optional = matches!(*last, "train_csv" | "eval_csv" | "name");
    if !known && !optional {
        return Err(UtmError::config(key, "unknown key"));
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Named presets, one per experiment family.
pub fn preset(name: &str) -> Option<RunConfig> {
    let micro = RunConfig {
        name: "micro-default".into(),
        model: ModelConfig::default(),
        act: ActConfig::default(),
        train: TrainConfig {
            lr_max: 1e-3,
            lr_warmup_steps: 100,
            batch_size: 64,
            epochs: 2,
            eval_every: 250,
            ema_decay: 0.99,
            ..TrainConfig::default()
        },
        data: DataConfig::default(),
        sweep: BTreeMap::new(),
    };
    let sweep = |name: &str, entries: Vec<(&str, Vec<toml::Value>)>| {
        let mut cfg = micro.clone();
        cfg.name = name.into();
        cfg.sweep = entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        cfg
    };
    let ints = |v: &[i64]| v.iter().map(|&x| toml::Value::Integer(x)).collect::<Vec<_>>();
    let floats = |v: &[f64]| v.iter().map(|&x| toml::Value::Float(x)).collect::<Vec<_>>();
    let seeds = ints(&[0, 42, 123]);
    Some(match name {
        "micro-default" => micro,
        "bias-sweep" => sweep("bias-sweep", vec![("model.router_bias_init", floats(&[-3.0, 0.0, 1.0]))]),
        "memory-curve" => sweep(
            "memory-curve",
            vec![("model.mem_tokens", ints(&[0, 2, 4, 8])), ("train.seed", seeds)],
        ),
        "lambda-warmup" => {
            let mut cfg = micro.clone();
            cfg.name = "lambda-warmup".into();
            cfg.act.lambda = 0.001;
            // A third of the run, as 20k of ~60k steps at full scale.
            cfg.act.lambda_warmup_steps = 520;
            cfg
        }
        "fixed-depth" => {
            let mut cfg = micro.clone();
            cfg.name = "fixed-depth".into();
            cfg.act.enabled = false;
            cfg
        }
        "rmsnorm-ablation" => {
            let mut cfg = sweep(
                "rmsnorm-ablation",
                vec![("model.norm_kind", vec![toml::Value::String("derf".into()), toml::Value::String("rms".into())])],
            );
            cfg.model.router_bias_init = 0.0;
            cfg
        }
        "full-scale" => RunConfig {
            name: "full-scale".into(),
            model: ModelConfig::full_scale(),
            act: ActConfig::default(),
            train: TrainConfig { eval_size: 12_800, ..TrainConfig::default() },
            data: DataConfig { source: DataSource::Csv, givens_min: 17, givens_max: 24, ..DataConfig::default() },
            sweep: BTreeMap::new(),
        },
        _ => return None,
    })
}

pub const PRESETS: &[&str] = &[
    "micro-default",
    "bias-sweep",
    "memory-curve",
    "lambda-warmup",
    "fixed-depth",
    "rmsnorm-ablation",
    "full-scale",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ffn_width_rounds_to_multiple_of_eight() {
        assert_eq!(ModelConfig::full_scale().ffn_width(), 1368);
        assert_eq!(ModelConfig::default().ffn_width(), 344);
        let tiny = ModelConfig { hidden: 32, heads: 2, head_dim: 16, ..ModelConfig::default() };
        assert_eq!(tiny.ffn_width(), 88);
    }

    #[test]
    fn every_preset_validates_and_round_trips() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml_str("[model]\nhiden = 3\n").unwrap_err();
        assert!(err.to_string().contains("hiden"), "{err}");
        let err = preset("micro-default").unwrap().with_overrides(&["train.lr=1"]).unwrap_err();
        assert!(err.to_string().contains("train.lr"), "{err}");
    }

    #[test]
    fn overrides_parse_typed_values() {
        let cfg = preset("micro-default")
            .unwrap()
            .with_overrides(&["model.mem_tokens=0", "model.norm_kind=rms", "act.lambda=0.5"])
            .unwrap();
        assert_eq!(cfg.model.mem_tokens, 0);
        assert_eq!(cfg.model.norm_kind, NormKind::Rms);
        assert_eq!(cfg.act.lambda, 0.5);
    }

    #[test]
    fn bias_sweep_expands_to_three_runs() {
        let runs = preset("bias-sweep").unwrap().expand().unwrap();
        let biases: Vec<f64> = runs.iter().map(|r| r.model.router_bias_init).collect();
        assert_eq!(biases, vec![-3.0, 0.0, 1.0]);
        assert!(runs.iter().all(|r| r.sweep.is_empty()));
    }

    #[test]
    fn no_sweep_expands_to_itself() {
        let cfg = preset("micro-default").unwrap();
        assert_eq!(cfg.expand().unwrap(), vec![cfg]);
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        let base = preset("micro-default").unwrap();
        assert!(base.with_overrides(&["model.heads=3"]).is_err());
        assert!(base.with_overrides(&["act.epsilon=0.5"]).is_err());
        assert!(base.with_overrides(&["model.max_ponder=0"]).is_err());
    }
}
