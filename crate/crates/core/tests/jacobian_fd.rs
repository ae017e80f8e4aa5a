//! Forward-mode block Jacobians against finite differences and first-order
//! Taylor expansion.

use coupling_core::jacobian::{FinalLayerMode, JacobianEngine};
use coupling_core::model::{Model, ModelConfig, PosEncoding};
use coupling_core::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn probe_model() -> Model {
    let cfg = ModelConfig {
        n_layers: 4,
        d_model: 32,
        n_heads: 4,
        d_ff: 128,
        d_vocab: 50,
        max_seq: 16,
        pos_encoding: PosEncoding::Rope,
        ln_epsilon: 1e-5,
        final_ln: true,
    };
    Model::init_random(cfg, 2024).unwrap()
}

const PROMPT: [u32; 8] = [7, 3, 41, 3, 19, 0, 26, 12];

fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let diff = a.sub(b).unwrap().frobenius_norm();
    diff / b.frobenius_norm().max(1e-300)
}

#[test]
fn every_connection_matches_central_differences() {
    let model = probe_model();
    let trace = model.forward_trace(&PROMPT).unwrap();
    let engine = JacobianEngine::new(&model);
    let layers: Vec<usize> = (1..=4).collect();
    let all = engine.all_connections(&trace, &layers).unwrap();
    assert_eq!(all.len(), 4 * 8 * 9 / 2);
    let mut worst: f64 = 0.0;
    for (id, bj) in &all {
        let fd = engine
            .fd_block_jacobian(&trace, id.layer, id.t_in, id.t_out, 1e-5)
            .unwrap();
        worst = worst.max(rel_frobenius(&bj.j, &fd));
    }
    assert!(worst <= 1e-5, "worst relative error {worst}");
}

#[test]
fn final_ln_variant_matches_central_differences() {
    let model = probe_model();
    let trace = model.forward_trace(&PROMPT[..5]).unwrap();
    let engine = JacobianEngine::new(&model).with_final_mode(FinalLayerMode::IncludeFinalLn);
    for t_in in 0..5 {
        for bj in engine.block_jacobian_row(&trace, 4, t_in).unwrap() {
            let fd = engine.fd_block_jacobian(&trace, 4, t_in, bj.id.t_out, 1e-5).unwrap();
            assert!(rel_frobenius(&bj.j, &fd) <= 1e-5);
        }
    }
}

#[test]
fn anti_causal_connections_are_exactly_zero() {
    let model = probe_model();
    let trace = model.forward_trace(&PROMPT).unwrap();
    let engine = JacobianEngine::new(&model);
    for layer in 1..=4 {
        for t_in in 1..8 {
            for t_out in 0..t_in {
                let j = engine.block_jacobian(&trace, layer, t_in, t_out).unwrap();
                assert_eq!(j.frobenius_norm(), 0.0);
            }
        }
    }
}

#[test]
fn tangents_vanish_on_rows_before_the_seed() {
    // FD of earlier output rows with respect to a later input row is exactly
    // zero because those rows never read the perturbed entries.
    let model = probe_model();
    let trace = model.forward_trace(&PROMPT).unwrap();
    let engine = JacobianEngine::new(&model);
    for t_out in 0..5 {
        let fd = engine.fd_block_jacobian(&trace, 2, 5, t_out, 1e-3).unwrap();
        assert!(fd.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn linearization_error_is_second_order() {
    let model = probe_model();
    let trace = model.forward_trace(&PROMPT).unwrap();
    let engine = JacobianEngine::new(&model);
    let n = PROMPT.len();
    let d = model.config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    for layer in 1..=4 {
        let x = &trace.xs[layer - 1];
        let j = engine.block_jacobian(&trace, layer, n - 1, n - 1).unwrap();
        let base = engine.eval_map(x, layer).unwrap();
        let residual = |eps: f64| {
            let delta: Vec<f64> = dir.iter().map(|v| v * eps).collect();
            let mut xp = x.clone();
            for (a, b) in xp.row_mut(n - 1).iter_mut().zip(&delta) {
                *a += b;
            }
            let moved = engine.eval_map(&xp, layer).unwrap();
            let lin = j.matvec(&delta);
            let r: f64 = (0..d)
                .map(|k| (moved[(n - 1, k)] - base[(n - 1, k)] - lin[k]).powi(2))
                .sum();
            r.sqrt() / eps
        };
        let ratios: Vec<f64> = [1e-2, 1e-3, 1e-4].iter().map(|&e| residual(e)).collect();
        // residual/‖δ‖ shrinks roughly tenfold per decade
        assert!(ratios[1] < 0.2 * ratios[0], "layer {layer}: {ratios:?}");
        assert!(ratios[2] < 0.2 * ratios[1], "layer {layer}: {ratios:?}");
    }
}

#[test]
fn rows_are_consistent_with_single_connections() {
    let model = probe_model();
    let trace = model.forward_trace(&PROMPT).unwrap();
    let engine = JacobianEngine::new(&model);
    for bj in engine.block_jacobian_row(&trace, 3, 2).unwrap() {
        let single = engine.block_jacobian(&trace, 3, 2, bj.id.t_out).unwrap();
        assert!(rel_frobenius(&bj.j, &single) < 1e-13);
    }
}
