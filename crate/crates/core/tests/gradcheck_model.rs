//! Reverse-mode gradients of the whole model against central finite
//! differences, in 64-bit.

mod common;

use common::gradcheck::{check_all, micro_cfg, perturbed, Problem};
use utm::config::NormKind;
use utm::diagnostics::router_grad_norm;
use utm::params::{ROUTER_BIAS, ROUTER_WEIGHT};
use utm::{ActConfig, ModelConfig};

#[test]
fn act_model_all_parameter_groups() {
    let cfg = micro_cfg();
    let problem = Problem::new(cfg.clone(), ActConfig::default(), 2, 0.01, 1);
    check_all(&problem, &perturbed(&cfg, 3), 1e-4);
}

#[test]
fn act_model_with_early_halting() {
    // Bias 0 halts most tokens at step two, exercising the remainder path
    // before the final step.
    let cfg = ModelConfig { router_bias_init: 0.0, ..micro_cfg() };
    let problem = Problem::new(cfg.clone(), ActConfig::default(), 1, 0.05, 2);
    let p = perturbed(&cfg, 5);
    check_all(&problem, &p, 1e-4);
}

#[test]
fn fixed_depth_and_rms_variants() {
    let cfg = ModelConfig { norm_kind: NormKind::Rms, mem_tokens: 0, ..micro_cfg() };
    let act = ActConfig { enabled: false, ..ActConfig::default() };
    let problem = Problem::new(cfg.clone(), act, 1, 0.0, 4);
    check_all(&problem, &perturbed(&cfg, 7), 1e-4);
}

#[test]
fn router_gradient_norm_matches_finite_differences() {
    let cfg = micro_cfg();
    let problem = Problem::new(cfg.clone(), ActConfig::default(), 2, 0.01, 9);
    let p = perturbed(&cfg, 11);
    let analytic = router_grad_norm(&p, &problem.analytic(&p));
    let w = problem.numeric(&p, p.index_of(ROUTER_WEIGHT).unwrap());
    let b = problem.numeric(&p, p.index_of(ROUTER_BIAS).unwrap());
    let numeric = w.iter().chain(&b).map(|v| v * v).sum::<f64>().sqrt();
    assert!(analytic > 0.0);
    assert!((analytic - numeric).abs() / numeric <= 1e-3, "{analytic} vs {numeric}");
}
