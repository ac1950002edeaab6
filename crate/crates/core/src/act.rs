//! Adaptive computation time over the shared block.
//!
//! Every token carries its own cumulative halting probability. All tokens
//! iterate in lockstep for the whole budget; halting only changes the blend
//! weights and the ponder cost.

use autodiff::{Graph, Scalar, Tensor, Var};

use crate::config::{ActConfig, PonderScope};
use crate::error::{Result, UtmError};
use crate::model::Forward;

/// Halting bookkeeping for one forward pass, flattened over `batch * rows`
/// tokens in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct HaltState {
    pub batch: usize,
    pub rows: usize,
    pub mem_tokens: usize,
    pub cum_prob: Vec<f64>,
    pub halted: Vec<bool>,
    /// 1-based step at which each token halted.
    pub halt_step: Vec<usize>,
    /// `weights[k][i]` is the blend weight of token `i` at step `k`.
    pub weights: Vec<Vec<f64>>,
    pub remainder: Vec<f64>,
}

impl HaltState {
    pub fn tokens(&self) -> usize {
        self.halt_step.len()
    }

    fn is_sequence(&self, i: usize) -> bool {
        i % self.rows >= self.mem_tokens
    }

    /// `N + R` for one token.
    pub fn ponder(&self, i: usize) -> f64 {
        self.halt_step[i] as f64 + self.remainder[i]
    }

    pub fn mean_ponder(&self, scope: PonderScope) -> f64 {
        let picked: Vec<f64> = (0..self.tokens())
            .filter(|&i| scope == PonderScope::All || self.is_sequence(i))
            .map(|i| self.ponder(i))
            .collect();
        picked.iter().sum::<f64>() / picked.len().max(1) as f64
    }

    /// Mean halting step over sequence tokens.
    pub fn mean_halt(&self) -> f64 {
        mean(self.puzzle_halts().iter().flatten().copied())
    }

    /// Mean halting step over memory tokens, absent when there are none.
    pub fn mean_halt_memory(&self) -> Option<f64> {
        (self.mem_tokens > 0).then(|| {
            mean((0..self.tokens()).filter(|&i| !self.is_sequence(i)).map(|i| self.halt_step[i] as f64))
        })
    }

    /// Sequence-token halting steps grouped per puzzle.
    pub fn puzzle_halts(&self) -> Vec<Vec<f64>> {
        self.halt_step
            .chunks(self.rows)
            .map(|row| row[self.mem_tokens..].iter().map(|&n| n as f64).collect())
            .collect()
    }

    /// Mean halting step of each puzzle's sequence tokens.
    pub fn puzzle_mean_halts(&self) -> Vec<f64> {
        self.puzzle_halts().into_iter().map(|h| mean(h.into_iter())).collect()
    }

    /// Total blend weight per token.
    pub fn weight_sums(&self) -> Vec<f64> {
        (0..self.tokens()).map(|i| self.weights.iter().map(|w| w[i]).sum()).collect()
    }

    /// Concatenates per-chunk states along the batch axis.
    pub fn concat(parts: &[HaltState]) -> Option<HaltState> {
        let first = parts.first()?;
        let steps = parts.iter().map(|p| p.weights.len()).max().unwrap_or(0);
        let mut out = HaltState {
            batch: 0,
            rows: first.rows,
            mem_tokens: first.mem_tokens,
            cum_prob: Vec::new(),
            halted: Vec::new(),
            halt_step: Vec::new(),
            weights: vec![Vec::new(); steps],
            remainder: Vec::new(),
        };
        for p in parts {
            out.batch += p.batch;
            out.cum_prob.extend(&p.cum_prob);
            out.halted.extend(&p.halted);
            out.halt_step.extend(&p.halt_step);
            out.remainder.extend(&p.remainder);
            for (k, w) in out.weights.iter_mut().enumerate() {
                match p.weights.get(k) {
                    Some(pw) => w.extend(pw),
                    None => w.extend(std::iter::repeat(0.0).take(p.tokens())),
                }
            }
        }
        Some(out)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Which tokens take which kind of weight at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMasks {
    /// Running and not halting: weight `p_k`.
    pub cont: Vec<bool>,
    /// Halting now: weight is the remainder.
    pub halt: Vec<bool>,
}

impl StepMasks {
    pub fn running(&self, i: usize) -> bool {
        self.cont[i] || self.halt[i]
    }
}

/// Applies the halting rule one step at a time.
#[derive(Clone, Debug)]
pub struct HaltTracker {
    epsilon: f64,
    k_run: usize,
    step: usize,
    state: HaltState,
}

impl HaltTracker {
    pub fn new(batch: usize, rows: usize, mem_tokens: usize, k_run: usize, epsilon: f64) -> Result<Self> {
        if k_run < 1 {
            return Err(UtmError::config("act.k_run", "iteration budget must be at least 1"));
        }
        let n = batch * rows;
        Ok(HaltTracker {
            epsilon,
            k_run,
            step: 0,
            state: HaltState {
                batch,
                rows,
                mem_tokens,
                cum_prob: vec![0.0; n],
                halted: vec![false; n],
                halt_step: vec![k_run; n],
                weights: Vec::with_capacity(k_run),
                remainder: vec![0.0; n],
            },
        })
    }

    /// Records this step's halting probabilities. A running token halts once
    /// its cumulative probability reaches `1 - epsilon`, or at the last step,
    /// and then takes the remainder `1 - sum of earlier p` as its weight.
    pub fn observe(&mut self, probs: &[f64]) -> Result<StepMasks> {
        let st = &mut self.state;
        if probs.len() != st.cum_prob.len() {
            return Err(UtmError::Invalid(format!(
                "expected {} halting probabilities, got {}",
                st.cum_prob.len(),
                probs.len()
            )));
        }
        if self.step >= self.k_run {
            return Err(UtmError::Invalid(format!("step budget {} exhausted", self.k_run)));
        }
        self.step += 1;
        let last = self.step == self.k_run;
        let threshold = 1.0 - self.epsilon;
        let n = probs.len();
        let mut masks = StepMasks { cont: vec![false; n], halt: vec![false; n] };
        let mut weights = vec![0.0; n];
        for (i, &p) in probs.iter().enumerate() {
            if st.halted[i] {
                continue;
            }
            let before = st.cum_prob[i];
            st.cum_prob[i] = before + p;
            if last || st.cum_prob[i] >= threshold {
                st.halted[i] = true;
                st.halt_step[i] = self.step;
                st.remainder[i] = 1.0 - before;
                weights[i] = 1.0 - before;
                masks.halt[i] = true;
            } else {
                weights[i] = p;
                masks.cont[i] = true;
            }
        }
        st.weights.push(weights);
        Ok(masks)
    }

    pub fn all_halted(&self) -> bool {
        self.state.halted.iter().all(|&h| h)
    }

    pub fn state(&self) -> &HaltState {
        &self.state
    }

    pub fn finish(self) -> HaltState {
        self.state
    }
}

/// Runs the halting rule over precomputed probabilities `probs[k][token]`.
pub fn halting_schedule(probs: &[Vec<f64>], epsilon: f64) -> Result<HaltState> {
    let n = probs.first().map_or(0, Vec::len);
    let mut tracker = HaltTracker::new(1, n, 0, probs.len(), epsilon)?;
    for p in probs {
        tracker.observe(p)?;
    }
    Ok(tracker.finish())
}

/// Replaces the learned router with fixed probabilities; used to pin the
/// blend for testing and ablations.
#[derive(Clone, Debug, PartialEq)]
pub enum RouterOverride {
    Constant(f64),
    /// `p = 0` before `final_step` (0-based) and `p = 1` from it onward.
    FinalStepOnly { final_step: usize },
    /// Probability per step, shared by all tokens; the last entry repeats.
    Schedule(Vec<f64>),
}

impl RouterOverride {
    pub fn prob(&self, step: usize) -> f64 {
        match self {
            RouterOverride::Constant(p) => *p,
            RouterOverride::FinalStepOnly { final_step } => {
                if step >= *final_step {
                    1.0
                } else {
                    0.0
                }
            }
            RouterOverride::Schedule(ps) => *ps.get(step).or(ps.last()).unwrap_or(&0.0),
        }
    }
}

/// Per-forward knobs that do not belong in the run config.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Iteration budget; `None` uses the model's trained depth.
    pub k_run: Option<usize>,
    pub router_override: Option<RouterOverride>,
    /// 0-based steps whose attention weights are kept.
    pub capture_attention: Vec<usize>,
    /// Decode logits at every step.
    pub per_step_readout: bool,
}

/// Values recorded at one ponder step.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub step: usize,
    /// Router probabilities per token; absent in fixed-depth mode.
    pub probs: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
    pub halted: Option<Vec<bool>>,
    /// `[B, heads, rows, rows]` when captured.
    pub attention: Option<Tensor<f64>>,
    /// Cell logits of the output that a budget of `step + 1` would produce.
    pub readout_blend: Option<Tensor<f64>>,
    /// Cell logits of this step's raw hidden state.
    pub readout_raw: Option<Tensor<f64>>,
}

impl StepTrace {
    fn new(step: usize) -> Self {
        StepTrace {
            step,
            probs: None,
            weights: None,
            halted: None,
            attention: None,
            readout_blend: None,
            readout_raw: None,
        }
    }
}

pub struct RunOutput {
    /// `[B, L, vocab]`.
    pub logits: Var,
    /// Output hidden states `[B, rows, hidden]`: the blend, or `h_K`.
    pub hidden: Var,
    /// Mean ponder cost, present when halting is enabled.
    pub ponder: Option<Var>,
    pub halt: Option<HaltState>,
    pub steps: Vec<StepTrace>,
    /// Router probability nodes per step, in order.
    pub router_probs: Vec<Var>,
}

fn mask<S: Scalar>(g: &mut Graph<S>, shape: [usize; 2], bits: impl Iterator<Item = bool>) -> Var {
    g.constant(Tensor::new(shape, bits.map(|b| if b { S::one() } else { S::zero() }).collect())
        .expect("mask length matches"))
}

fn readout<S: Scalar>(f: &Forward<S>, g: &mut Graph<S>, h: Var) -> Result<Tensor<f64>> {
    let logits = f.output_logits(g, h)?;
    Ok(g.value(logits).cast())
}

fn capture<S: Scalar>(g: &Graph<S>, opts: &RunOptions, step: usize, attention: Var) -> Option<Tensor<f64>> {
    opts.capture_attention.contains(&step).then(|| g.value(attention).cast())
}

/// Forward pass through embeddings, the ponder loop and the output head.
pub fn model_forward<S: Scalar>(
    f: &Forward<S>,
    g: &mut Graph<S>,
    act: &ActConfig,
    tokens: &[usize],
    batch: usize,
    opts: &RunOptions,
) -> Result<RunOutput> {
    let k_run = opts.k_run.unwrap_or(f.cfg.max_ponder);
    if k_run < 1 {
        return Err(UtmError::config("act.k_run", "iteration budget must be at least 1"));
    }
    if act.enabled {
        act_loop(f, g, act, tokens, batch, k_run, opts)
    } else {
        fixed_depth_forward(f, g, tokens, batch, k_run, opts)
    }
}

/// Applies the block `k` times and reads out `h_K`. The router is never
/// evaluated.
pub fn fixed_depth_forward<S: Scalar>(
    f: &Forward<S>,
    g: &mut Graph<S>,
    tokens: &[usize],
    batch: usize,
    k: usize,
    opts: &RunOptions,
) -> Result<RunOutput> {
    if k < 1 {
        return Err(UtmError::config("act.k_run", "iteration budget must be at least 1"));
    }
    let mut h = f.base_embedding(g, tokens, batch)?;
    let mut steps = Vec::with_capacity(k);
    for step in 0..k {
        let x = f.add_step(g, h, step)?;
        let out = f.block_forward(g, x)?;
        h = out.hidden;
        let mut trace = StepTrace::new(step);
        trace.attention = capture(g, opts, step, out.attention);
        if opts.per_step_readout {
            let logits = readout(f, g, h)?;
            trace.readout_blend = Some(logits.clone());
            trace.readout_raw = Some(logits);
        }
        steps.push(trace);
    }
    let logits = f.output_logits(g, h)?;
    Ok(RunOutput { logits, hidden: h, ponder: None, halt: None, steps, router_probs: Vec::new() })
}

/// The halting loop. Each step's output `h_k` enters a running blend with
/// weight `p_k` while the token runs and with the remainder on the step it
/// halts; afterwards it contributes nothing.
pub fn act_loop<S: Scalar>(
    f: &Forward<S>,
    g: &mut Graph<S>,
    act: &ActConfig,
    tokens: &[usize],
    batch: usize,
    k_run: usize,
    opts: &RunOptions,
) -> Result<RunOutput> {
    let cfg = f.cfg;
    let rows = cfg.rows();
    let shape = [batch, rows];
    let mut tracker = HaltTracker::new(batch, rows, cfg.mem_tokens, k_run, act.epsilon)?;
    let mut h = f.base_embedding(g, tokens, batch)?;
    let mut blend: Option<Var> = None;
    let mut prob_sum: Option<Var> = None;
    let mut remainder: Option<Var> = None;
    let mut steps = Vec::with_capacity(k_run);
    let mut router_probs = Vec::with_capacity(k_run);

    for step in 0..k_run {
        let x = f.add_step(g, h, step)?;
        let out = f.block_forward(g, x)?;
        let mut hk = out.hidden;
        if act.freeze_halted && step > 0 {
            let halted = tracker.state().halted.clone();
            let keep = mask(g, shape, halted.iter().copied());
            let fresh = mask(g, shape, halted.iter().map(|&b| !b));
            let old = g.mul_rows(h, keep)?;
            let new = g.mul_rows(hk, fresh)?;
            hk = g.add(old, new)?;
        }
        let p = match &opts.router_override {
            Some(o) => g.constant(Tensor::full(shape, S::lit(o.prob(step)))),
            None => f.router_prob(g, hk)?,
        };
        router_probs.push(p);
        let pv = g.value(p).to_f64_vec();
        let masks = tracker.observe(&pv)?;

        // 1 - sum of earlier probabilities.
        let left = match prob_sum {
            None => g.constant(Tensor::ones(shape)),
            Some(s) => {
                let neg = g.scale(s, -1.0);
                g.add_scalar(neg, 1.0)
            }
        };
        let cont = mask(g, shape, masks.cont.iter().copied());
        let halt = mask(g, shape, masks.halt.iter().copied());
        let w_cont = g.mul(cont, p)?;
        let w_halt = g.mul(halt, left)?;
        let w = g.add(w_cont, w_halt)?;

        let mut trace = StepTrace::new(step);
        if opts.per_step_readout {
            let running = mask(g, shape, (0..batch * rows).map(|i| masks.running(i)));
            let w_budget = g.mul(running, left)?;
            let tail = g.mul_rows(hk, w_budget)?;
            let budget = match blend {
                Some(b) => g.add(b, tail)?,
                None => tail,
            };
            trace.readout_blend = Some(readout(f, g, budget)?);
            trace.readout_raw = Some(readout(f, g, hk)?);
        }

        let contrib = g.mul_rows(hk, w)?;
        blend = Some(match blend {
            Some(b) => g.add(b, contrib)?,
            None => contrib,
        });
        remainder = Some(match remainder {
            Some(r) => g.add(r, w_halt)?,
            None => w_halt,
        });
        prob_sum = Some(match prob_sum {
            Some(s) => g.add(s, p)?,
            None => p,
        });

        trace.probs = Some(pv);
        trace.weights = tracker.state().weights.last().cloned();
        trace.halted = Some(tracker.state().halted.clone());
        trace.attention = capture(g, opts, step, out.attention);
        steps.push(trace);
        h = hk;
    }

    let halt = tracker.finish();
    let blended = blend.expect("at least one step");
    let remainder = remainder.expect("at least one step");
    let counts = Tensor::new(shape, halt.halt_step.iter().map(|&n| S::lit(n as f64)).collect())?;
    let counts = g.constant(counts);
    let rho = g.add(remainder, counts)?;
    let rho = match act.ponder_scope {
        PonderScope::All => rho,
        PonderScope::Sequence => g.slice(rho, 1, cfg.mem_tokens, cfg.seq_len)?,
    };
    let ponder = g.mean_all(rho);
    let logits = f.output_logits(g, blended)?;
    Ok(RunOutput { logits, hidden: blended, ponder: Some(ponder), halt: Some(halt), steps, router_probs })
}
