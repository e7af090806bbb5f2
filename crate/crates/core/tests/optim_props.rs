use proptest::prelude::*;

use spgl::optim::{AdamConfig, AdamState};
use spgl::tensor::Tensor;

fn run(values: &[f64], grads: &[Vec<f64>], config: AdamConfig) -> Vec<Vec<f64>> {
    let mut p = Tensor::from_vec(1, values.len(), values.to_vec()).unwrap();
    let mut state = AdamState::new([&p], config);
    let names = vec!["p".to_string()];
    let mut trace = vec![p.data().to_vec()];
    for g in grads {
        p.clear_grad();
        p.accumulate_grad(g);
        state.step(&mut [&mut p], &names).unwrap();
        trace.push(p.data().to_vec());
    }
    trace
}

fn grads_strategy(len: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1e3f64..1e3, len), 1..30)
}

proptest! {
    #[test]
    fn updates_stay_within_ten_learning_rates(
        values in prop::collection::vec(-5.0f64..5.0, 4),
        grads in grads_strategy(4),
        lr in 1e-4f64..1e-1,
    ) {
        let config = AdamConfig { lr, ..AdamConfig::default() };
        let trace = run(&values, &grads, config);
        for w in trace.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                prop_assert!((a - b).abs() <= 10.0 * lr);
            }
        }
    }

    #[test]
    fn identical_inputs_give_identical_updates(
        values in prop::collection::vec(-5.0f64..5.0, 3),
        grads in grads_strategy(3),
    ) {
        let a = run(&values, &grads, AdamConfig::default());
        let b = run(&values, &grads, AdamConfig::default());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed(
        values in prop::collection::vec(-5.0f64..5.0, 3),
        steps in 1usize..20,
    ) {
        let config = AdamConfig { l2: 0.0, ..AdamConfig::default() };
        let trace = run(&values, &vec![vec![0.0; 3]; steps], config);
        prop_assert!(trace.iter().all(|t| t == &values));
    }
}
