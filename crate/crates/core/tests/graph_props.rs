mod common;

use proptest::prelude::*;

use common::{compare_with_oracle, oracle_graph, random_sessions, rng};
use spgl::data::Session;
use spgl::graph::{build_global_graph, row_normalize, session_edges, GraphConfig};

fn sessions_strategy(n: usize) -> impl Strategy<Value = Vec<Session>> {
    prop::collection::vec(prop::collection::vec(0..n, 1..10), 1..20).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(t, items)| Session {
                items,
                start_time: t as i64,
            })
            .collect()
    })
}

#[test]
fn random_session_sets_match_pair_oracle() {
    let mut r = rng(11);
    for trial in 0..200 {
        let n = 1 + trial % 17;
        let sessions = random_sessions(&mut r, n, 200);
        for eps in [1, 2, 3, 5] {
            let g = build_global_graph(n, &sessions, GraphConfig::new(eps).unwrap());
            let diff = compare_with_oracle(&g, &oracle_graph(&sessions, eps));
            assert!(diff.is_empty(), "trial {trial}, eps {eps}: {diff}");
        }
    }
}

#[test]
fn repeated_adjacent_pair_accumulates() {
    let s = |items: Vec<usize>| Session { items, start_time: 0 };
    let g = build_global_graph(4, &[s(vec![0, 1]), s(vec![2, 0, 1])], GraphConfig::new(3).unwrap());
    assert_eq!(g.weight(0, 1), Some(1.0));
}

proptest! {
    #[test]
    fn hop_weights_strictly_decrease(len in 2usize..12, eps in 1usize..6) {
        let items: Vec<usize> = (0..len).collect();
        let edges = session_edges(&items, eps);
        for e in &edges {
            let h = e.dst - e.src;
            prop_assert!(h >= 1 && h <= eps);
            prop_assert_eq!(e.weight, 1.0 / (1.0 + h as f64));
        }
        let w: Vec<f64> = (1..=eps.min(len - 1)).map(|h| 1.0 / (1.0 + h as f64)).collect();
        prop_assert!(w.windows(2).all(|p| p[0] > p[1]));
    }

    #[test]
    fn no_edge_beyond_epsilon(sessions in sessions_strategy(12), eps in 1usize..4) {
        let g = build_global_graph(12, &sessions, GraphConfig::new(eps).unwrap());
        for e in g.edges() {
            let close = sessions.iter().any(|s| {
                (0..s.items.len()).any(|i| {
                    (i + 1..s.items.len().min(i + eps + 1))
                        .any(|j| s.items[i] == e.src && s.items[j] == e.dst)
                })
            });
            prop_assert!(close, "edge {:?}", e);
        }
    }

    #[test]
    fn relabeling_permutes_edges(
        sessions in sessions_strategy(10),
        perm in Just((0..10usize).collect::<Vec<_>>()).prop_shuffle(),
        eps in 1usize..4,
    ) {
        let config = GraphConfig::new(eps).unwrap();
        let g = build_global_graph(10, &sessions, config);
        let relabeled: Vec<Session> = sessions
            .iter()
            .map(|s| Session {
                items: s.items.iter().map(|&i| perm[i]).collect(),
                start_time: s.start_time,
            })
            .collect();
        let h = build_global_graph(10, &relabeled, config);
        prop_assert_eq!(g.edge_count(), h.edge_count());
        for e in g.edges() {
            let w = h.weight(perm[e.src], perm[e.dst]);
            prop_assert!(w.is_some_and(|w| (w - e.weight).abs() < 1e-12));
        }
    }

    #[test]
    fn normalized_rows_sum_to_one_or_zero(sessions in sessions_strategy(15), eps in 1usize..5) {
        let g = build_global_graph(15, &sessions, GraphConfig::new(eps).unwrap());
        let a = row_normalize(&g);
        for r in 0..15 {
            let s = a.matrix().row_sum(r);
            let nnz = a.matrix().row_nnz(r);
            let ok = if nnz == 0 { s == 0.0 } else { (s - 1.0).abs() < 1e-9 };
            prop_assert!(ok, "row {} sums to {}", r, s);
        }
    }
}
