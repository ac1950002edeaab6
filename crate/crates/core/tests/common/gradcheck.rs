//! Finite-difference gradient checking of the whole model.

use autodiff::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use utm::act::{model_forward, RunOptions};
use utm::model::Forward;
use utm::params::ModelParams;
use utm::train::total_loss;
use utm::{ActConfig, ModelConfig};

const STEP: f64 = 1e-5;

pub struct Problem {
    cfg: ModelConfig,
    act: ActConfig,
    tokens: Vec<usize>,
    targets: Vec<usize>,
    weights: Vec<f64>,
    batch: usize,
    lambda: f64,
}

impl Problem {
    pub fn new(cfg: ModelConfig, act: ActConfig, batch: usize, lambda: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = batch * cfg.seq_len;
        Problem {
            tokens: (0..n).map(|_| rng.gen_range(0..cfg.vocab)).collect(),
            targets: (0..n).map(|_| rng.gen_range(1..cfg.vocab)).collect(),
            weights: (0..n).map(|_| rng.gen_range(0.5..1.5) / n as f64).collect(),
            cfg,
            act,
            batch,
            lambda,
        }
    }

    pub fn loss(&self, params: &ModelParams<f64>) -> f64 {
        let mut g = Graph::new();
        let f = Forward::new(&mut g, &self.cfg, params);
        let loss = self.build(&mut g, &f);
        g.value(loss).item().unwrap()
    }

    fn build(&self, g: &mut Graph<f64>, f: &Forward<f64>) -> autodiff::Var {
        let out = model_forward(f, g, &self.act, &self.tokens, self.batch, &RunOptions::default()).unwrap();
        total_loss(g, out.logits, &self.targets, Some(&self.weights), out.ponder, self.lambda).unwrap()
    }

    pub fn analytic(&self, params: &ModelParams<f64>) -> Vec<Tensor<f64>> {
        let mut g = Graph::new();
        let f = Forward::new(&mut g, &self.cfg, params);
        let loss = self.build(&mut g, &f);
        let mut grads = g.backward(loss).unwrap();
        f.params
            .vars()
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    }

    pub fn numeric(&self, params: &ModelParams<f64>, index: usize) -> Vec<f64> {
        let n = params.entries()[index].1.len();
        let mut p = params.clone();
        (0..n)
            .map(|j| {
                let orig = p.tensors().nth(index).unwrap().data()[j];
                p.tensors_mut().nth(index).unwrap().data_mut()[j] = orig + STEP;
                let up = self.loss(&p);
                p.tensors_mut().nth(index).unwrap().data_mut()[j] = orig - STEP;
                let down = self.loss(&p);
                p.tensors_mut().nth(index).unwrap().data_mut()[j] = orig;
                (up - down) / (2.0 * STEP)
            })
            .collect()
    }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Relative error of every parameter tensor, in layout order.
pub fn group_errors(problem: &Problem, params: &ModelParams<f64>) -> Vec<(String, f64)> {
    let analytic = problem.analytic(params);
    params
        .entries()
        .iter()
        .enumerate()
        .map(|(i, (name, _))| (name.clone(), rel_err(analytic[i].data(), &problem.numeric(params, i))))
        .collect()
}

pub fn check_all(problem: &Problem, params: &ModelParams<f64>, tol: f64) {
    for (name, err) in group_errors(problem, params) {
        assert!(err <= tol, "{name}: relative error {err:.3e}");
    }
}

pub fn micro_cfg() -> ModelConfig {
    ModelConfig { hidden: 32, heads: 2, head_dim: 16, mem_tokens: 2, max_ponder: 3, seq_len: 16, ..Default::default() }
}

/// Parameters perturbed away from init so that norm scales, gains and the
/// router bias all sit at generic values.
pub fn perturbed(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for (name, t) in p.entries().to_vec() {
        let scale = if name.contains("embed") || name == "memory" { 1.0 } else { 0.05 };
        let noisy: Vec<f64> = t.data().iter().map(|v| v + scale * rng.gen_range(-1.0..1.0)).collect();
        *p.get_mut(&name).unwrap() = Tensor::new(t.shape().to_vec(), noisy).unwrap();
    }
    p
}
