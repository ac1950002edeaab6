//! Learned weights, stored by name in a fixed order.

use std::path::Path;

use autodiff::{checkpoint, Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ModelConfig, NormKind};
use crate::error::{Result, UtmError};

pub const ROUTER_WEIGHT: &str = "router.weight";
pub const ROUTER_BIAS: &str = "router.bias";

/// Named parameter tensors. Exactly one transformer block exists; it is
/// reused at every ponder step.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    entries: Vec<(String, Tensor<S>)>,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Ones,
    Zeros,
    Const(f64),
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (h, f) = (cfg.hidden, cfg.ffn_width());
    let mut out = vec![
        ("embed.token".to_string(), vec![cfg.vocab, h], Init::Normal),
        ("embed.type".to_string(), vec![2, h], Init::Normal),
        ("embed.step".to_string(), vec![cfg.max_ponder, h], Init::Normal),
    ];
    if cfg.mem_tokens > 0 {
        out.push(("memory".to_string(), vec![cfg.mem_tokens, h], Init::Normal));
    }
    let norm = |prefix: &str| match cfg.norm_kind {
        NormKind::Derf => vec![
            (format!("{prefix}.alpha"), vec![h], Init::Ones),
            (format!("{prefix}.shift"), vec![h], Init::Zeros),
        ],
        NormKind::Rms => vec![(format!("{prefix}.gain"), vec![h], Init::Ones)],
    };
    out.extend(norm("block.attn_norm"));
    for name in ["wq", "wk", "wv", "wo"] {
        out.push((format!("block.attn.{name}"), vec![h, h], Init::Normal));
    }
    out.push(("block.attn.q_gain".to_string(), vec![cfg.heads], Init::Ones));
    out.push(("block.attn.k_gain".to_string(), vec![cfg.heads], Init::Ones));
    out.extend(norm("block.ffn_norm"));
    out.push(("block.ffn.w_gate".to_string(), vec![h, f], Init::Normal));
    out.push(("block.ffn.w_up".to_string(), vec![h, f], Init::Normal));
    out.push(("block.ffn.w_down".to_string(), vec![f, h], Init::Normal));
    out.push((ROUTER_WEIGHT.to_string(), vec![h], Init::Normal));
    out.push((ROUTER_BIAS.to_string(), vec![1], Init::Const(cfg.router_bias_init)));
    out.push(("output.weight".to_string(), vec![h, cfg.vocab], Init::Normal));
    out
}

impl<S: Scalar> ModelParams<S> {
    /// Normal(0, init_std) for embeddings, memory, projections and the router
    /// weight; norm scales at one, shifts at zero; router bias from config.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, cfg.init_std).expect("finite std");
        let entries = layout(cfg)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = Tensor::from_fn(shape, |_| match init {
                    Init::Normal => S::lit(normal.sample(&mut rng)),
                    Init::Ones => S::one(),
                    Init::Zeros => S::zero(),
                    Init::Const(v) => S::lit(v),
                });
                (name, t)
            })
            .collect();
        ModelParams { entries }
    }

    pub fn from_entries(cfg: &ModelConfig, entries: Vec<(String, Tensor<S>)>) -> Result<Self> {
        let expected = layout(cfg);
        let mut out = Vec::with_capacity(expected.len());
        for (name, shape, _) in expected {
            let t = entries
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| UtmError::Invalid(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(UtmError::Invalid(format!(
                    "parameter {name}: checkpoint shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            out.push((name, t));
        }
        Ok(ModelParams { entries: out })
    }

    pub fn entries(&self) -> &[(String, Tensor<S>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.entries)?;
        Ok(())
    }

    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        let entries = checkpoint::load::<S>(path)?;
        Self::from_entries(cfg, entries)
    }

    /// Inserts every tensor as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph<S>) -> BoundParams {
        let vars: Vec<Var> = self.entries.iter().map(|(_, t)| graph.param(t.clone())).collect();
        BoundParams { names: self.entries.iter().map(|(n, _)| n.clone()).collect(), vars }
    }
}

/// Parameter count of a configuration without allocating weights.
pub fn param_count(cfg: &ModelConfig) -> usize {
    layout(cfg).iter().map(|(_, shape, _)| shape.iter().product::<usize>()).sum()
}

/// Per-tensor breakdown for the `param-count` command.
pub fn param_breakdown(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    layout(cfg)
        .into_iter()
        .map(|(name, shape, _)| {
            let n = shape.iter().product();
            (name, shape, n)
        })
        .collect()
}

/// Graph leaves for one forward pass, in [`ModelParams`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.try_var(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.names.iter().position(|n| n == name).map(|i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
