use proptest::prelude::*;

use spgl::data::{
    augment, filter_dataset, preprocess, DatasetBundle, Holdout, PreprocessConfig, RawEvent, RawSession,
};
use spgl::Error;

fn raw_sessions() -> impl Strategy<Value = Vec<RawSession>> {
    prop::collection::vec((prop::collection::vec(0u8..8, 1..7), 0i64..50), 1..30).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (items, t))| RawSession {
                key: format!("s{i}"),
                items: items.into_iter().map(|b| format!("i{b}")).collect(),
                start_time: t,
            })
            .collect()
    })
}

fn events() -> impl Strategy<Value = Vec<RawEvent>> {
    prop::collection::vec((0u8..30, 0u8..10, 0i64..1000), 20..200).prop_map(|v| {
        v.into_iter()
            .map(|(s, i, t)| RawEvent {
                session_key: format!("s{s}"),
                item_key: format!("i{i}"),
                timestamp: t,
            })
            .collect()
    })
}

fn config(min_item_freq: usize, holdout: f64) -> PreprocessConfig {
    PreprocessConfig {
        min_item_freq,
        min_session_len: 2,
        holdout: Holdout::Fraction(holdout),
        min_prefix_len: 1,
    }
}

proptest! {
    #[test]
    fn filtering_twice_equals_filtering_once(
        sessions in raw_sessions(),
        freq in 1usize..5,
        len in 1usize..4,
    ) {
        match filter_dataset(&sessions, freq, len) {
            Ok(once) => prop_assert_eq!(filter_dataset(&once, freq, len).unwrap(), once),
            Err(e) => prop_assert!(matches!(e, Error::EmptyDataset)),
        }
    }

    #[test]
    fn augmentation_count(m in 0usize..12, p in 1usize..5) {
        let items: Vec<usize> = (0..m).collect();
        let out = augment(&items, p);
        prop_assert_eq!(out.len(), m.saturating_sub(p));
        for ex in &out {
            prop_assert_eq!(ex.target, ex.prefix.len());
            prop_assert!(ex.prefix.len() >= p);
        }
    }

    #[test]
    fn split_has_no_temporal_leakage_and_indices_are_closed(
        evs in events(),
        freq in 1usize..3,
        holdout in 0.05f64..0.6,
    ) {
        let Ok(b) = preprocess(&evs, &config(freq, holdout)) else {
            return Ok(());
        };
        let n = b.n_items();
        if let (Some(last_train), Some(first_test)) = (
            b.sessions_train.iter().map(|s| s.start_time).max(),
            b.sessions_test.iter().map(|s| s.start_time).min(),
        ) {
            prop_assert!(first_test >= last_train);
        }
        for ex in b.train.iter().chain(&b.test) {
            prop_assert!(ex.target < n);
            prop_assert!(ex.prefix.iter().all(|&i| i < n));
        }
    }
}

#[test]
fn bundle_round_trips_exactly() {
    let evs: Vec<RawEvent> = (0..60)
        .map(|k| RawEvent {
            session_key: format!("s{}", k / 4),
            item_key: format!("i{}", (k * 7) % 5),
            timestamp: k as i64 * 3,
        })
        .collect();
    let b = preprocess(&evs, &config(1, 0.2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.json");
    b.save(&path).unwrap();
    let back = DatasetBundle::load(&path).unwrap();
    assert_eq!(back, b);
    let first = std::fs::read(&path).unwrap();
    back.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn wrong_bundle_version_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.json");
    std::fs::write(&path, r#"{"format_version": 99}"#).unwrap();
    assert!(matches!(DatasetBundle::load(&path), Err(Error::Format { .. })));
}
