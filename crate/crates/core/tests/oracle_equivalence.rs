mod common;

use common::{kind_name, layer, random_matrix, rng, KINDS};
use dyad::oracle::{
    component_forward, dense_forward, materialize_variant, normwise_relative_error,
};
use dyad::{DyadLayer, Matrix, Variant};
use proptest::prelude::*;

const N_DYAD: [usize; 4] = [1, 2, 4, 8];
const WIDTHS: [usize; 5] = [1, 2, 3, 5, 8];
const BATCHES: [usize; 3] = [1, 2, 7];

fn for_grid(mut f: impl FnMut((Variant, bool), usize, usize, usize, usize, u64)) {
    let mut seed = 0;
    for kind in KINDS {
        for nd in N_DYAD {
            for ni in WIDTHS {
                for no in WIDTHS {
                    for b in BATCHES {
                        seed += 1;
                        f(kind, nd, ni, no, b, seed);
                    }
                }
            }
        }
    }
}

#[test]
fn grid_f64_matches_component_oracle_bit_exact() {
    for_grid(|kind, nd, ni, no, b, seed| {
        let l = layer::<f64>(kind, nd, ni, no, seed);
        let x = random_matrix::<f64>(nd * ni, b, &mut rng(seed));
        let y = l.forward(&x).unwrap();
        assert_eq!(
            y,
            component_forward(&l, &x).unwrap(),
            "{} nd={nd} ni={ni} no={no} b={b}",
            kind_name(kind)
        );
    });
}

#[test]
fn grid_f64_matches_summed_materialization() {
    for_grid(|kind, nd, ni, no, b, seed| {
        let l = layer::<f64>(kind, nd, ni, no, seed);
        let x = random_matrix::<f64>(nd * ni, b, &mut rng(seed));
        let err = normwise_relative_error(&l.forward(&x).unwrap(), &dense_forward(&l, &x).unwrap());
        assert!(
            err <= 1e-14,
            "{} nd={nd} ni={ni} no={no} b={b}: {err:e}",
            kind_name(kind)
        );
    });
}

#[test]
fn summed_materialization_is_exact_on_dyadic_data() {
    // Small integers sum exactly in any order.
    for_grid(|kind, nd, ni, no, b, seed| {
        let base = layer::<f64>(kind, nd, ni, no, seed);
        let c = *base.config();
        let ints = |len: usize, off: usize| -> Vec<f64> {
            (0..len).map(|i| ((i * 7 + off) % 9) as f64 - 4.0).collect()
        };
        let shape = [nd, no, ni];
        let w1 = dyad::Tensor3::from_vec(shape, ints(nd * no * ni, 1)).unwrap();
        let w2 = dyad::Tensor3::from_vec(shape, ints(nd * no * ni, 5)).unwrap();
        let bias = Matrix::new(c.f_out(), 1, ints(c.f_out(), 2)).unwrap();
        let l = DyadLayer::from_parts(c, w1, w2, Some(bias)).unwrap();
        let x = Matrix::new(nd * ni, b, ints(nd * ni * b, 3)).unwrap();
        assert_eq!(l.forward(&x).unwrap(), dense_forward(&l, &x).unwrap());
    });
}

#[test]
fn grid_f32_within_tolerance() {
    for_grid(|kind, nd, ni, no, b, seed| {
        let l = layer::<f32>(kind, nd, ni, no, seed);
        let x = random_matrix::<f32>(nd * ni, b, &mut rng(seed));
        let err = normwise_relative_error(&l.forward(&x).unwrap(), &dense_forward(&l, &x).unwrap());
        assert!(
            err <= 1e-5,
            "{} nd={nd} ni={ni} no={no} b={b}: {err:e}",
            kind_name(kind)
        );
    });
}

#[test]
fn cat_equals_it_bit_exact() {
    let mut r = rng(99);
    for seed in 0..100u64 {
        let nd = 1 + (seed as usize % 5);
        let ni = 1 + (seed as usize * 3 % 7);
        let no = 1 + (seed as usize * 5 % 6);
        let b = 1 + (seed as usize % 4);
        let it = layer::<f64>((Variant::It, false), nd, ni, no, seed);
        let cat = layer::<f64>((Variant::It, true), nd, ni, no, seed);
        let x = random_matrix::<f64>(nd * ni, b, &mut r);
        assert_eq!(it.forward(&x).unwrap(), cat.forward(&x).unwrap());
        assert_eq!(it.forward_cat(&x).unwrap(), it.forward_it(&x).unwrap());
    }
}

#[test]
fn materialized_matrix_has_expected_density() {
    // Each component holds n_dyad * n_out * n_in nonzeros at distinct positions.
    for kind in KINDS {
        for nd in N_DYAD {
            let l = layer::<f64>(kind, nd, 3, 2, 7);
            let m = materialize_variant(&l);
            assert_eq!(m.shape(), (nd * 2, nd * 3));
            let nnz = m.as_slice().iter().filter(|v| **v != 0.0).count();
            assert!(nnz <= 2 * nd * 6);
            assert!(nnz >= nd * 6);
        }
    }
}

fn arb_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, u64)> {
    (
        0usize..4,
        1usize..=6,
        1usize..=6,
        1usize..=5,
        1usize..=8,
        any::<u64>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_matches_oracle((k, nd, ni, no, b, seed) in arb_case()) {
        let l = layer::<f64>(KINDS[k], nd, ni, no, seed);
        let x = random_matrix::<f64>(nd * ni, b, &mut rng(seed));
        prop_assert_eq!(l.forward(&x).unwrap(), component_forward(&l, &x).unwrap());
    }

    #[test]
    fn forward_is_affine((k, nd, ni, no, b, seed) in arb_case(), a in -3.0f64..3.0) {
        let l = layer::<f64>(KINDS[k], nd, ni, no, seed);
        let mut r = rng(seed);
        let x1 = random_matrix::<f64>(nd * ni, b, &mut r);
        let x2 = random_matrix::<f64>(nd * ni, b, &mut r);
        let zero = l.forward(&Matrix::zeros(nd * ni, b)).unwrap();
        let f = |x: &Matrix<f64>| l.forward(x).unwrap().sub(&zero).unwrap();
        let lhs = f(&x1.scale(a).add(&x2).unwrap());
        let rhs = f(&x1).scale(a).add(&f(&x2)).unwrap();
        let scale = rhs.max_abs().max(1.0);
        for (p, q) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            prop_assert!((p - q).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn columns_are_independent((k, nd, ni, no, b, seed) in arb_case()) {
        let l = layer::<f64>(KINDS[k], nd, ni, no, seed);
        let x = random_matrix::<f64>(nd * ni, b, &mut rng(seed));
        let y = l.forward(&x).unwrap();
        for col in 0..b {
            let yc = l.forward(&x.select_columns(&[col]).unwrap()).unwrap();
            for row in 0..y.rows() {
                prop_assert_eq!(y.get(row, col), yc.get(row, 0));
            }
        }
    }
}
