//! Forward plus backward throughput of the micro model on one thread.
//! Usage: `cargo run --release -p utm-core --example step_throughput [chunk]`.

use std::time::Instant;

use autodiff::Graph;
use utm::act::{model_forward, RunOptions};
use utm::model::Forward;
use utm::{ActConfig, ModelConfig, ModelParams};

fn main() {
    let cfg = ModelConfig::default();
    let p = ModelParams::<f32>::init(&cfg, 0);
    let act = ActConfig::default();
    let chunk: usize = std::env::args().nth(1).map_or(16, |s| s.parse().unwrap());
    let toks: Vec<usize> = (0..chunk * 16).map(|i| i % 5).collect();
    let targets: Vec<usize> = (0..chunk * 16).map(|i| 1 + i % 4).collect();
    let reps = 10;
    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let f = Forward::new(&mut g, &cfg, &p);
        let out = model_forward(&f, &mut g, &act, &toks, chunk, &RunOptions::default()).unwrap();
        let ce = g.cross_entropy(out.logits, &targets).unwrap();
        let _grads = g.backward(ce).unwrap();
    }
    let per = t.elapsed().as_secs_f64() / (reps * chunk) as f64;
    println!("chunk {chunk}: {:.3} ms/sample, 50k epoch {:.1} min", per * 1e3, per * 50_000.0 / 60.0);
}
