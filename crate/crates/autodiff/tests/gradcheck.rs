//! Autodiff gradients against central finite differences in f64.

use autodiff::{Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.5..1.5))
}

/// Builds `sum(f(inputs) * probe)` so every output element contributes.
type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>;

fn scalar_loss(inputs: &[Tensor<f64>], probe_seed: u64, build: &Build) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe = random(&mut rng, g.shape(out));
    let probe = g.constant(probe);
    let prod = g.mul(out, probe).unwrap();
    let loss = g.sum_all(prod);
    let value = g.value(loss).item().unwrap();
    let grads = g.backward(loss).unwrap();
    let gs = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    (value, gs)
}

fn check(name: &str, inputs: Vec<Tensor<f64>>, build: &Build) {
    let (_, analytic) = scalar_loss(&inputs, 7, build);
    for (which, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[which].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[which].data_mut()[i] -= STEP;
            let (lp, _) = scalar_loss(&plus, 7, build);
            let (lm, _) = scalar_loss(&minus, 7, build);
            *slot = (lp - lm) / (2.0 * STEP);
        }
        let a = analytic[which].data();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(
            numeric.iter().map(|x| x * x).sum::<f64>().sqrt(),
        );
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        assert!(rel <= TOL, "{name} input {which}: relative error {rel:e}");
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

#[test]
fn elementwise_primitives() {
    let mut r = rng();
    let a = random(&mut r, &[3, 4]);
    let b = random(&mut r, &[3, 4]);
    check("add", vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]));
    check("sub", vec![a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]));
    check("mul", vec![a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]));
    check("sigmoid", vec![a.clone()], &|g, v| Ok(g.sigmoid(v[0])));
    check("erf", vec![a.clone()], &|g, v| Ok(g.erf(v[0])));
    check("silu", vec![a.clone()], &|g, v| Ok(g.silu(v[0])));
    check("scale", vec![a.clone()], &|g, v| Ok(g.scale(v[0], -2.5)));
    check("add_scalar", vec![a], &|g, v| Ok(g.add_scalar(v[0], 0.3)));
}

#[test]
fn broadcast_primitives() {
    let mut r = rng();
    let x = random(&mut r, &[2, 3, 4]);
    check("add_bias", vec![x.clone(), random(&mut r, &[4])], &|g, v| g.add_bias(v[0], v[1]));
    check("mul_bias", vec![x.clone(), random(&mut r, &[3, 4])], &|g, v| g.mul_bias(v[0], v[1]));
    check("mul_rows", vec![x, random(&mut r, &[2, 3])], &|g, v| g.mul_rows(v[0], v[1]));
}

#[test]
fn matmul_primitives() {
    let mut r = rng();
    check("matmul", vec![random(&mut r, &[2, 3, 4]), random(&mut r, &[4, 5])], &|g, v| {
        g.matmul(v[0], v[1])
    });
    check("bmm", vec![random(&mut r, &[2, 3, 4]), random(&mut r, &[2, 4, 5])], &|g, v| {
        g.bmm(v[0], v[1])
    });
    check("bmm_nt", vec![random(&mut r, &[2, 3, 4]), random(&mut r, &[2, 5, 4])], &|g, v| {
        g.bmm_nt(v[0], v[1])
    });
}

#[test]
fn reductions_and_softmax() {
    let mut r = rng();
    let x = random(&mut r, &[2, 3, 4]);
    for axis in 0..3 {
        check("softmax", vec![x.clone()], &move |g, v| g.softmax(v[0], axis));
        check("sum", vec![x.clone()], &move |g, v| g.sum(v[0], axis));
        check("mean", vec![x.clone()], &move |g, v| g.mean(v[0], axis));
    }
    check("mean_all", vec![x], &|g, v| Ok(g.mean_all(v[0])));
}

#[test]
fn shape_primitives() {
    let mut r = rng();
    let x = random(&mut r, &[2, 3, 4]);
    let y = random(&mut r, &[2, 2, 4]);
    check("concat", vec![x.clone(), y], &|g, v| g.concat(&[v[0], v[1]], 1));
    check("slice", vec![x.clone()], &|g, v| g.slice(v[0], 2, 1, 2));
    check("reshape", vec![x.clone()], &|g, v| g.reshape(v[0], &[6, 4]));
    check("permute", vec![x.clone()], &|g, v| g.permute(v[0], &[2, 0, 1]));
    check("transpose", vec![x], &|g, v| g.transpose(v[0], 1, 2));
    check("gather", vec![random(&mut r, &[5, 3])], &|g, v| g.gather(v[0], &[4, 0, 4, 2], &[2, 2]));
}

#[test]
fn fused_primitives() {
    let mut r = rng();
    let x = random(&mut r, &[2, 3, 6]);
    check("rms_norm", vec![x], &|g, v| g.rms_norm(v[0], 1e-6));
    let cos = Tensor::from_fn([3, 2], |i| (i as f64 * 0.7).cos());
    let sin = Tensor::from_fn([3, 2], |i| (i as f64 * 0.7).sin());
    check("rotary", vec![random(&mut r, &[2, 3, 2, 4])], &move |g, v| g.rotary(v[0], &cos, &sin));
    check("cross_entropy", vec![random(&mut r, &[2, 3, 5])], &|g, v| {
        g.weighted_cross_entropy(v[0], &[0, 4, 2, 1, 1, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    });
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut r = rng();
    let inputs = vec![
        random(&mut r, &[4, 6]),
        random(&mut r, &[6, 8]),
        random(&mut r, &[8]),
        random(&mut r, &[8, 3]),
    ];
    check("mlp", inputs, &|g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_bias(h, v[2])?;
        let h = g.silu(h);
        let logits = g.matmul(h, v[3])?;
        g.cross_entropy(logits, &[0, 2, 1, 2])
    });
}
