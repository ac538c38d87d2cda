//! Numeric helpers of the stub adapters against independent oracles.

use proptest::prelude::*;
use urbanplan::adapters::geo::{haversine_m, nearest_index, parse_radius_m};
use urbanplan::adapters::series::{impute, seasonal_naive, zscore_anomalies};
use urbanplan::testkit::{chord_distance_oracle, interpolation_oracle, zscore_flags_oracle};

fn point() -> impl Strategy<Value = (f64, f64)> {
    (-89.9f64..89.9, -180.0f64..180.0)
}

proptest! {
    #[test]
    fn haversine_agrees_with_chord_formula(a in point(), b in point()) {
        prop_assert!((haversine_m(a, b) - chord_distance_oracle(a, b)).abs() < 0.1);
    }

    #[test]
    fn haversine_is_a_symmetric_premetric(a in point(), b in point()) {
        prop_assert_eq!(haversine_m(a, a), 0.0);
        prop_assert!((haversine_m(a, b) - haversine_m(b, a)).abs() < 1e-6);
    }

    #[test]
    fn imputation_matches_linear_oracle(values in prop::collection::vec(prop::option::weighted(0.6, -1e3f64..1e3), 1..120)) {
        match (impute(&values), interpolation_oracle(&values)) {
            (Ok(got), Some(want)) => {
                for (i, (g, w)) in got.iter().zip(&want).enumerate() {
                    prop_assert!((g - w).abs() <= 1e-9, "index {}: {} vs {}", i, g, w);
                }
                for (i, v) in values.iter().enumerate() {
                    if let Some(v) = v {
                        prop_assert_eq!(got[i], *v);
                    }
                }
            }
            (Err(_), None) => {}
            (got, want) => prop_assert!(false, "impute {:?}, oracle {:?}", got, want),
        }
    }

    #[test]
    fn zscore_flags_match_direct_computation(
        base in prop::collection::vec(-10.0f64..10.0, 25..120),
        spikes in prop::collection::vec((0usize..120, -200.0f64..200.0), 0..5),
    ) {
        let mut values = base;
        for (at, delta) in spikes {
            let n = values.len();
            values[at % n] += delta;
        }
        let got: Vec<usize> = zscore_anomalies(&values, 24, 3.0).unwrap().into_iter().map(|(t, _)| t).collect();
        prop_assert_eq!(got, zscore_flags_oracle(&values, 24, 3.0));
    }

    #[test]
    fn seasonal_naive_repeats_the_last_season(history in prop::collection::vec(0.0f64..500.0, 24..100), steps in 1usize..60) {
        let out = seasonal_naive(&history, 24, steps, 1000).unwrap();
        prop_assert_eq!(out.len(), steps);
        let season = &history[history.len() - 24..];
        for (h, v) in out.iter().enumerate() {
            prop_assert_eq!(*v, season[h % 24]);
        }
    }
}

#[test]
fn seasonal_naive_respects_the_step_guard() {
    assert!(seasonal_naive(&[1.0; 48], 24, 49, 48).is_err());
    assert!(seasonal_naive(&[1.0; 10], 24, 1, 48).is_err());
}

#[test]
fn flat_window_flags_any_step() {
    let mut v = vec![5.0; 30];
    v[26] = 5.5;
    assert_eq!(zscore_flags_oracle(&v, 24, 3.0), vec![26]);
    let got = zscore_anomalies(&v, 24, 3.0).unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].0, 26);
    assert!(got[0].1.is_infinite());
}

#[test]
fn radius_and_nearest() {
    assert_eq!(parse_radius_m("500m"), Some(500.0));
    assert_eq!(parse_radius_m("2"), Some(2000.0));
    assert_eq!(parse_radius_m("1.5 km"), Some(1500.0));
    let pts = [(1.30, 103.80), (1.35, 103.70), (1.29, 103.85)];
    assert_eq!(nearest_index(pts, (1.291, 103.851)), Some(2));
    assert_eq!(nearest_index(std::iter::empty(), (0.0, 0.0)), None);
}
