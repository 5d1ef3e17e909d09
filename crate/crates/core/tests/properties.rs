//! Randomised invariants of the survival-data primitives and metrics.

use proptest::prelude::*;
use survite_core::eval::c_index_raw;
use survite_core::survdata::{
    at_risk, hazard_from_survival, rmst_from_survival, survival_from_hazard, to_long, Cohort, HazardSurface,
    ShortRecord, TimeGrid,
};
use survite_core::survite::{long_format_log_loss, short_format_nll};

const T_MAX: usize = 6;

fn record() -> impl Strategy<Value = ShortRecord> {
    (-2.0..2.0f64, 0..2u8, 1..=T_MAX, any::<bool>())
        .prop_map(|(x, a, tau_tilde, delta)| ShortRecord { x: vec![x], a, tau_tilde, delta })
}

fn cohort() -> impl Strategy<Value = Cohort> {
    prop::collection::vec(record(), 1..40)
        .prop_map(|r| Cohort::new(r, TimeGrid::uniform(1.0, T_MAX).unwrap()).unwrap())
}

fn surface(n: usize, seed: u64) -> HazardSurface {
    let mut h = HazardSurface::zeros(n, TimeGrid::uniform(1.0, T_MAX).unwrap());
    let mut z = seed;
    for i in 0..n {
        for a in 0..2u8 {
            for t in 1..=T_MAX {
                z = survite_core::derive_seed(z, 1);
                h.set(i, a, t, 0.02 + 0.96 * (z >> 11) as f64 / (1u64 << 53) as f64);
            }
        }
    }
    h
}

proptest! {
    #[test]
    fn hazard_and_survival_round_trip(h in prop::collection::vec(0.0..0.99f64, 1..30)) {
        let s = survival_from_hazard(&h).unwrap();
        prop_assert!(s.windows(2).all(|w| w[1] <= w[0]));
        let back = hazard_from_survival(&s).unwrap();
        for (a, b) in h.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rmst_lies_between_zero_and_the_horizon(h in prop::collection::vec(0.0..1.0f64, T_MAX), k in 1..=T_MAX) {
        let grid = TimeGrid::uniform(2.0, T_MAX).unwrap();
        let s = survival_from_hazard(&h).unwrap();
        let horizon = grid.upper(k);
        let r = rmst_from_survival(&s, horizon, &grid).unwrap();
        prop_assert!(r >= 0.0 && r <= horizon + 1e-12);
        let flat = rmst_from_survival(&[1.0; T_MAX], horizon, &grid).unwrap();
        prop_assert!((flat - horizon).abs() < 1e-12);
    }

    #[test]
    fn long_format_has_one_row_per_bin_at_risk(c in cohort()) {
        let long = to_long(&c);
        let total: usize = c.records().iter().map(|r| r.tau_tilde).sum();
        prop_assert_eq!(long.len(), total);
        let events = long.iter().filter(|l| l.y).count();
        prop_assert_eq!(events, c.records().iter().filter(|r| r.delta).count());
        for a in 0..2u8 {
            let mut prev = usize::MAX;
            for t in 1..=T_MAX {
                let r = at_risk(&c, t, a).unwrap();
                prop_assert!(r.len() <= prev);
                prop_assert_eq!(r.len(), long.iter().filter(|l| l.a == a && l.t == t).count());
                prev = r.len();
            }
        }
    }

    #[test]
    fn long_and_short_likelihoods_agree(c in cohort(), seed in any::<u64>()) {
        let h = surface(c.len(), seed);
        let long = long_format_log_loss(&c, &h).unwrap();
        let short = short_format_nll(&c, &h).unwrap();
        prop_assert!((long - short).abs() <= 1e-9 * short.abs().max(1.0));
    }

    #[test]
    fn c_index_depends_only_on_prediction_order(
        rows in prop::collection::vec((-3.0..3.0f64, 1..=T_MAX, any::<bool>()), 2..40),
        t in 1..=T_MAX,
    ) {
        let pred: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let tau: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let delta: Vec<bool> = rows.iter().map(|r| r.2).collect();
        let c = c_index_raw(&pred, &tau, &delta, t).unwrap();
        let warped: Vec<f64> = pred.iter().map(|p| p.exp() * 5.0 - 1.0).collect();
        let c2 = c_index_raw(&warped, &tau, &delta, t).unwrap();
        prop_assert!(c.is_nan() && c2.is_nan() || c == c2);
        if !c.is_nan() {
            prop_assert!((0.0..=1.0).contains(&c));
            let flipped: Vec<f64> = pred.iter().map(|p| -p).collect();
            let c3 = c_index_raw(&flipped, &tau, &delta, t).unwrap();
            prop_assert!((c + c3 - 1.0).abs() < 1e-12);
        }
    }
}
