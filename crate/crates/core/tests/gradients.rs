mod common;

use common::{kind_name, layer, random_matrix, rng, KINDS};
use dyad::oracle::{dense_gradients, finite_difference_gradients, gradient_error};
use dyad::{DyadLayer, Matrix};
use proptest::prelude::*;

/// Relative-error floor: entries whose true magnitude is below this are
/// compared absolutely, where central differences carry ~1e-10 of rounding.
const FLOOR: f64 = 1e-3;
const H: f64 = 1e-6;

fn config(i: u64) -> (usize, usize, usize, usize) {
    let i = i as usize;
    (1 + i % 4, 1 + (i * 3) % 5, 1 + (i * 7) % 5, 1 + (i * 5) % 3)
}

#[test]
fn backward_matches_central_differences() {
    for kind in KINDS {
        let mut worst = 0.0f64;
        for i in 0..20u64 {
            let (nd, ni, no, b) = config(i);
            let l = layer::<f64>(kind, nd, ni, no, 1000 + i);
            let x = random_matrix::<f64>(nd * ni, b, &mut rng(i));
            let y = l.forward(&x).unwrap();
            let got = l.backward(&x, &y).unwrap();
            let fd = finite_difference_gradients(&l, &x, H).unwrap();
            let err = gradient_error(&got, &fd, FLOOR);
            assert!(err <= 1e-6, "{} cfg {i}: {err:e}", kind_name(kind));
            worst = worst.max(err);
        }
        assert!(worst > 0.0);
    }
}

#[test]
fn backward_matches_dense_adjoint() {
    for kind in KINDS {
        for i in 0..50u64 {
            let (nd, ni, no, b) = config(i);
            let l = layer::<f64>(kind, nd, ni, no, i);
            let mut r = rng(i);
            let x = random_matrix::<f64>(nd * ni, b, &mut r);
            let d_y = random_matrix::<f64>(nd * no, b, &mut r);
            let got = l.backward(&x, &d_y).unwrap();
            let want = dense_gradients(&l, &x, &d_y).unwrap();
            let err = gradient_error(&got, &want, 1e-12);
            assert!(err <= 1e-12, "{} cfg {i}: {err:e}", kind_name(kind));
        }
    }
}

#[test]
fn no_bias_means_no_bias_gradient() {
    let cfg = dyad::DyadConfig::new(2, 3, 3, dyad::Variant::Dt)
        .unwrap()
        .with_bias(false);
    let l = DyadLayer::<f64>::init_uniform(cfg, 1);
    let x = random_matrix::<f64>(6, 2, &mut rng(1));
    let g = l.backward(&x, &Matrix::zeros(6, 2)).unwrap();
    assert!(g.d_bias.is_none());
    assert!(g.d_x.as_slice().iter().all(|v| *v == 0.0));
}

#[test]
fn sgd_step_lowers_loss() {
    for kind in KINDS {
        let l = layer::<f64>(kind, 3, 4, 4, 5);
        let x = random_matrix::<f64>(12, 6, &mut rng(5));
        let y = l.forward(&x).unwrap();
        let loss = dyad::oracle::half_squared_norm(&y);
        let g = l.backward(&x, &y).unwrap();
        let next = l.sgd_step(&g, 1e-2).unwrap();
        assert!(dyad::oracle::half_squared_norm(&next.forward(&x).unwrap()) < loss);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradients_are_linear_in_upstream(
        k in 0usize..4, nd in 1usize..4, ni in 1usize..4, no in 1usize..4, b in 1usize..4,
        seed in any::<u64>(), a in -2.0f64..2.0,
    ) {
        let l = layer::<f64>(KINDS[k], nd, ni, no, seed);
        let mut r = rng(seed);
        let x = random_matrix::<f64>(nd * ni, b, &mut r);
        let d_y = random_matrix::<f64>(nd * no, b, &mut r);
        let g1 = l.backward(&x, &d_y).unwrap();
        let g2 = l.backward(&x, &d_y.scale(a)).unwrap();
        let scaled = g1.d_x.scale(a);
        for (p, q) in g2.d_x.as_slice().iter().zip(scaled.as_slice()) {
            prop_assert!((p - q).abs() <= 1e-12 * q.abs().max(1.0));
        }
    }
}
