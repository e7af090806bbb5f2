mod common;

use std::sync::Arc;

use proptest::prelude::*;

use common::{primitive_cases, random_tensor, rng};
use spgl::tensor::{compare_with_finite_differences, grad_check, matmul, CsrMatrix, Tape, Tensor};

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in [3, 17, 2024] {
        for mut case in primitive_cases(seed) {
            let report = grad_check(&mut case.params, 1e-5, &case.f).unwrap();
            assert!(
                report.max_rel_error < 1e-6,
                "{} (seed {seed}): {:?}",
                case.name,
                report
            );
        }
    }
}

#[test]
fn corrupted_adjoint_is_caught() {
    // a wrong gradient (here: tanh's adjoint with the derivative factor
    // dropped) must stand out clearly
    let mut r = rng(5);
    let mut params = vec![random_tensor(&mut r, 3, 4, 1.5)];
    let wrong = Tensor::filled(3, 4, 1.0);
    let report = compare_with_finite_differences(&mut params, &[wrong], 1e-5, |t, v| {
        let y = t.tanh(v[0]);
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(report.max_rel_error > 1e-2, "{report:?}");
}

#[test]
fn forward_values_are_bit_identical_across_runs() {
    let run = || {
        let mut r = rng(9);
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&mut r, 6, 5, 1.0));
        let w = tape.leaf(random_tensor(&mut r, 5, 5, 1.0));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.row_softmax(y);
        let c = tape.cosine_similarity_matrix(s).unwrap();
        let l = tape.row_log_sum_exp(c);
        tape.value(l).clone()
    };
    assert_eq!(run().data(), run().data());
}

fn tensor_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-20.0f64..20.0, r * c)
            .prop_map(move |d| Tensor::from_vec(r, c, d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_row_shifts(
        x in tensor_strategy(6, 9),
        shift in -50.0f64..50.0,
    ) {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let s = tape.row_softmax(v);
        let mut shifted = x.clone();
        shifted.data_mut().iter_mut().for_each(|e| *e += shift);
        let v2 = tape.constant(shifted);
        let s2 = tape.row_softmax(v2);
        for r in 0..x.rows() {
            let row = tape.value(s).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            for (a, b) in row.iter().zip(tape.value(s2).row(r)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sparse_product_equals_dense_product(
        n in 1usize..=64,
        d in 1usize..=6,
        density in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut r = rng(seed);
        let mut triplets = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if r.random::<f64>() < density {
                    triplets.push((i, j, r.random_range(-1.0..1.0)));
                }
            }
        }
        let s = CsrMatrix::from_sorted_triplets(n, n, triplets);
        let x = random_tensor(&mut r, n, d, 1.0);
        let sparse = s.matmul(&x).unwrap();
        let dense = matmul(&s.to_dense(), &x).unwrap();
        prop_assert!(sparse.max_abs_diff(&dense) < 1e-12);

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = tape.sparse_matmul(Arc::new(s), xv).unwrap();
        prop_assert!(tape.value(out).max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn primitives_pass_grad_check_on_random_inputs(seed in any::<u64>()) {
        for mut case in primitive_cases(seed) {
            let report = grad_check(&mut case.params, 1e-5, &case.f).unwrap();
            prop_assert!(report.max_rel_error < 1e-6, "{}: {:?}", case.name, report);
        }
    }
}
