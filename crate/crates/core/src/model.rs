//! The shared transformer block and its embeddings.
//!
//! Each sequence is laid out as `[mem_1 .. mem_T, cell_1 .. cell_L]`. Memory
//! rows take rotary positions `0..T`, cells continue at `T..T+L`.

use autodiff::{Graph, Scalar, Tensor, Var};

use crate::config::{ModelConfig, NormKind};
use crate::error::{Result, UtmError};
use crate::params::{BoundParams, ModelParams, ROUTER_BIAS, ROUTER_WEIGHT};

pub const RMS_EPS: f64 = 1e-6;

/// Type-embedding rows.
const TYPE_MEMORY: usize = 0;
const TYPE_SEQUENCE: usize = 1;

/// Output of one block application.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub hidden: Var,
    /// Post-softmax attention `[B, heads, rows, rows]`.
    pub attention: Var,
}

/// Parameters bound into a graph plus the per-pass constants.
pub struct Forward<'a, S: Scalar> {
    pub cfg: &'a ModelConfig,
    pub params: BoundParams,
    rope_cos: Tensor<S>,
    rope_sin: Tensor<S>,
}

/// Rotary tables `[rows, head_dim / 2]` for contiguous positions `0..rows`.
pub fn rope_tables<S: Scalar>(rows: usize, head_dim: usize, base: f64) -> (Tensor<S>, Tensor<S>) {
    let half = head_dim / 2;
    let angle = |i: usize| {
        let (pos, k) = (i / half, i % half);
        pos as f64 * base.powf(-2.0 * k as f64 / head_dim as f64)
    };
    (
        Tensor::from_fn([rows, half], |i| S::lit(angle(i).cos())),
        Tensor::from_fn([rows, half], |i| S::lit(angle(i).sin())),
    )
}

impl<'a, S: Scalar> Forward<'a, S> {
    pub fn new(graph: &mut Graph<S>, cfg: &'a ModelConfig, params: &ModelParams<S>) -> Self {
        let params = params.bind(graph);
        let (rope_cos, rope_sin) = rope_tables(cfg.rows(), cfg.head_dim, cfg.rope_base);
        Forward { cfg, params, rope_cos, rope_sin }
    }

    fn type_row(&self, g: &mut Graph<S>, which: usize) -> Result<Var> {
        let row = g.slice(self.params.var("embed.type"), 0, which, 1)?;
        Ok(g.reshape(row, &[self.cfg.hidden])?)
    }

    /// Step-embedding row for ponder step `step` (0-based), wrapping modulo
    /// the table size so inference may run past the trained depth.
    pub fn step_row(&self, g: &mut Graph<S>, step: usize) -> Result<Var> {
        let row = g.slice(self.params.var("embed.step"), 0, step % self.cfg.max_ponder, 1)?;
        Ok(g.reshape(row, &[self.cfg.hidden])?)
    }

    /// Memory bank and token embeddings with their type embeddings,
    /// `[B, T + L, hidden]`, before any step embedding.
    pub fn base_embedding(&self, g: &mut Graph<S>, tokens: &[usize], batch: usize) -> Result<Var> {
        let (l, t, h) = (self.cfg.seq_len, self.cfg.mem_tokens, self.cfg.hidden);
        if tokens.len() != batch * l {
            return Err(UtmError::Invalid(format!(
                "expected {batch} x {l} tokens, got {}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id >= self.cfg.vocab) {
            return Err(UtmError::Invalid(format!("token id {bad} >= vocab {}", self.cfg.vocab)));
        }
        let seq = g.gather(self.params.var("embed.token"), tokens, &[batch, l])?;
        let seq_type = self.type_row(g, TYPE_SEQUENCE)?;
        let seq = g.add_bias(seq, seq_type)?;
        if t == 0 {
            return Ok(seq);
        }
        let mem_type = self.type_row(g, TYPE_MEMORY)?;
        let mem = g.add_bias(self.params.var("memory"), mem_type)?;
        // Same bank rows for every sample.
        let ids: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
        let mem = g.gather(mem, &ids, &[batch, t])?;
        debug_assert_eq!(g.shape(mem), [batch, t, h]);
        Ok(g.concat(&[mem, seq], 1)?)
    }

    /// Block input at ponder step `step`: the base embedding plus that
    /// step's embedding.
    pub fn embed_inputs(&self, g: &mut Graph<S>, tokens: &[usize], batch: usize, step: usize) -> Result<Var> {
        let base = self.base_embedding(g, tokens, batch)?;
        self.add_step(g, base, step)
    }

    /// Adds the step embedding for `step` to `x`. With
    /// `step_embedding_every_iteration` off, only step 0 receives one.
    pub fn add_step(&self, g: &mut Graph<S>, x: Var, step: usize) -> Result<Var> {
        if step > 0 && !self.cfg.step_embedding_every_iteration {
            return Ok(x);
        }
        let row = self.step_row(g, step)?;
        Ok(g.add_bias(x, row)?)
    }

    pub fn norm(&self, g: &mut Graph<S>, x: Var, prefix: &str) -> Result<Var> {
        match self.cfg.norm_kind {
            NormKind::Derf => {
                let alpha = self.params.var(&format!("{prefix}.alpha"));
                let shift = self.params.var(&format!("{prefix}.shift"));
                derf_norm(g, x, alpha, shift)
            }
            NormKind::Rms => {
                let gain = self.params.var(&format!("{prefix}.gain"));
                rms_norm(g, x, gain)
            }
        }
    }

    /// Per-head gain `[heads]` expanded to `[heads, head_dim]`.
    fn head_gain(&self, g: &mut Graph<S>, name: &str) -> Result<Var> {
        let gain = g.reshape(self.params.var(name), &[self.cfg.heads, 1])?;
        let ones = g.constant(Tensor::ones([1, self.cfg.head_dim]));
        Ok(g.matmul(gain, ones)?)
    }

    fn qk(&self, g: &mut Graph<S>, x: Var, names: [&str; 2], shape: &[usize], rope: (&Tensor<S>, &Tensor<S>)) -> Result<Var> {
        let [weight, gain] = names;
        let proj = g.matmul(x, self.params.var(weight))?;
        let proj = g.reshape(proj, shape)?;
        let gain = self.head_gain(g, gain)?;
        let normed = |g: &mut Graph<S>, v: Var| -> Result<Var> {
            let n = g.rms_norm(v, RMS_EPS)?;
            Ok(g.mul_bias(n, gain)?)
        };
        let out = if self.cfg.qk_norm_before_rope {
            let n = normed(g, proj)?;
            g.rotary(n, rope.0, rope.1)?
        } else {
            let r = g.rotary(proj, rope.0, rope.1)?;
            normed(g, r)?
        };
        Ok(g.permute(out, &[0, 2, 1, 3])?)
    }

    /// Bidirectional multi-head attention with QK normalization and RoPE.
    /// Returns the projected output and the attention weights.
    pub fn attention(&self, g: &mut Graph<S>, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let (b, rows) = (s[0], s[1]);
        let (heads, dh) = (self.cfg.heads, self.cfg.head_dim);
        if rows > self.rope_cos.shape()[0] {
            return Err(UtmError::Invalid(format!("{rows} rows exceed the rotary table")));
        }
        let short;
        let rope = if rows == self.rope_cos.shape()[0] {
            (&self.rope_cos, &self.rope_sin)
        } else {
            short = rope_tables(rows, dh, self.cfg.rope_base);
            (&short.0, &short.1)
        };
        let split = [b, rows, heads, dh];
        let q = self.qk(g, x, ["block.attn.wq", "block.attn.q_gain"], &split, rope)?;
        let k = self.qk(g, x, ["block.attn.wk", "block.attn.k_gain"], &split, rope)?;
        let v = g.matmul(x, self.params.var("block.attn.wv"))?;
        let v = g.reshape(v, &split)?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        let scores = g.bmm_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores, 3)?;
        let ctx = g.bmm(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, rows, self.cfg.hidden])?;
        let out = g.matmul(ctx, self.params.var("block.attn.wo"))?;
        Ok((out, attn))
    }

    /// SwiGLU feed-forward.
    pub fn ffn(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let gate = g.matmul(x, self.params.var("block.ffn.w_gate"))?;
        let gate = g.silu(gate);
        let up = g.matmul(x, self.params.var("block.ffn.w_up"))?;
        let inner = g.mul(gate, up)?;
        Ok(g.matmul(inner, self.params.var("block.ffn.w_down"))?)
    }

    /// Pre-norm block: `y = x + attn(norm(x))`, `out = y + ffn(norm(y))`.
    pub fn block_forward(&self, g: &mut Graph<S>, x: Var) -> Result<BlockOutput> {
        let n1 = self.norm(g, x, "block.attn_norm")?;
        let (a, attention) = self.attention(g, n1)?;
        let y = g.add(x, a)?;
        let n2 = self.norm(g, y, "block.ffn_norm")?;
        let f = self.ffn(g, n2)?;
        let hidden = g.add(y, f)?;
        Ok(BlockOutput { hidden, attention })
    }

    /// Logits `[B, L, vocab]` for the cell rows only.
    pub fn output_logits(&self, g: &mut Graph<S>, h: Var) -> Result<Var> {
        let cells = g.slice(h, 1, self.cfg.mem_tokens, self.cfg.seq_len)?;
        Ok(g.matmul(cells, self.params.var("output.weight"))?)
    }

    /// Halting probability `sigmoid(w . h + b)` per row, `[B, T + L]`.
    pub fn router_prob(&self, g: &mut Graph<S>, h: Var) -> Result<Var> {
        let s = g.shape(h).to_vec();
        let w = g.reshape(self.params.var(ROUTER_WEIGHT), &[self.cfg.hidden, 1])?;
        let logits = g.matmul(h, w)?;
        let logits = g.add_bias(logits, self.params.var(ROUTER_BIAS))?;
        let logits = g.reshape(logits, &s[..s.len() - 1])?;
        Ok(g.sigmoid(logits))
    }
}

/// `erf(alpha * x + shift)` with per-feature `alpha` and `shift`.
pub fn derf_norm<S: Scalar>(g: &mut Graph<S>, x: Var, alpha: Var, shift: Var) -> Result<Var> {
    let scaled = g.mul_bias(x, alpha)?;
    let shifted = g.add_bias(scaled, shift)?;
    Ok(g.erf(shifted))
}

/// Root-mean-square normalization over features with a learned gain.
pub fn rms_norm<S: Scalar>(g: &mut Graph<S>, x: Var, gain: Var) -> Result<Var> {
    let n = g.rms_norm(x, RMS_EPS)?;
    Ok(g.mul_bias(n, gain)?)
}

/// Greedy decode of `[B, L, vocab]` logits.
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let vocab = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(vocab)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
