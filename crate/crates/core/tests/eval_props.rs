use proptest::prelude::*;

use spgl::eval::{mrr_at_k, precision_at_k, rank_target, EvalConfig, EvalReport};

#[test]
fn hand_fixture() {
    let ranks = [1, 3, 25];
    assert!((precision_at_k(&ranks, 20).unwrap() - 2.0 / 3.0).abs() < 1e-9);
    assert!((mrr_at_k(&ranks, 20).unwrap() - 0.4444).abs() < 1e-4);
    assert!((mrr_at_k(&ranks, 20).unwrap() - 4.0 / 9.0).abs() < 1e-9);
}

#[test]
fn report_serializes_in_column_order() {
    let r = EvalReport::from_ranks(&[1, 3, 25], &EvalConfig::new(vec![5, 20]).unwrap()).unwrap();
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.starts_with(r#"{"P@5":"#), "{json}");
    assert!(json.ends_with(r#""examples":3}"#), "{json}");
}

proptest! {
    #[test]
    fn mrr_bounded_by_precision_and_both_monotone_in_k(
        ranks in prop::collection::vec(1usize..60, 1..50),
        k in 1usize..40,
        extra in 1usize..20,
    ) {
        let p = precision_at_k(&ranks, k).unwrap();
        let m = mrr_at_k(&ranks, k).unwrap();
        prop_assert!(m <= p + 1e-15);
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&m));
        prop_assert!(precision_at_k(&ranks, k + extra).unwrap() >= p);
        prop_assert!(mrr_at_k(&ranks, k + extra).unwrap() >= m);
    }

    #[test]
    fn rank_ignores_constant_shift(
        scores in prop::collection::vec(-10i32..10, 1..30),
        shift in -1000i32..1000,
        t in 0usize..30,
    ) {
        prop_assume!(t < scores.len());
        let a: Vec<f64> = scores.iter().map(|&s| s as f64 * 0.5).collect();
        let b: Vec<f64> = a.iter().map(|&s| s + shift as f64).collect();
        prop_assert_eq!(rank_target(&a, t), rank_target(&b, t));
    }

    #[test]
    fn rank_is_position_in_stable_descending_sort(
        scores in prop::collection::vec(-5i32..5, 1..30),
        t in 0usize..30,
    ) {
        prop_assume!(t < scores.len());
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        let expected = 1 + order.iter().position(|&i| i == t).unwrap();
        prop_assert_eq!(rank_target(&s, t), expected);
    }
}
