mod common;

use bi33_core::rules::{
    decision_table_csv, ei_decision, guarded_decision, isotonic_fit, pava_isotonic, safety_exclude, select_mtd,
    select_mtd_from_estimates, toxicity_tail, Guarded,
};
use bi33_core::{Action, Actor, CohortKind, DesignParams, DoseGrid, Event, TrialState};
use proptest::prelude::*;

fn params_pct(p_t: u32, lo: u32, hi: u32) -> DesignParams {
    DesignParams {
        p_t: p_t as f64 / 100.0,
        eps1: (p_t - lo) as f64 / 100.0,
        eps2: (hi - p_t) as f64 / 100.0,
        ..DesignParams::default()
    }
}

fn ch(a: Action) -> char {
    a.as_str().chars().next().unwrap()
}

#[test]
fn every_tally_matches_the_rational_table_oracle() {
    for (p_t, lo, hi) in [(30, 25, 35), (25, 20, 30), (20, 15, 25), (33, 28, 38)] {
        let params = params_pct(p_t, lo, hi);
        for n in 1..=30 {
            for y in 0..=n {
                let got = ch(ei_decision(y, n, &params).unwrap());
                assert_eq!(got, common::table1(y, n, lo, hi), "p_T={p_t} y={y} n={n}");
            }
        }
    }
}

#[test]
fn decision_is_monotone_in_dlt_count() {
    let rank = |a: Action| match a {
        Action::E => 0,
        Action::S => 1,
        _ => 2,
    };
    let params = DesignParams::default();
    for n in 1..=30 {
        let ranks: Vec<_> = (0..=n).map(|y| rank(ei_decision(y, n, &params).unwrap())).collect();
        assert!(ranks.windows(2).all(|w| w[0] <= w[1]), "n={n}: {ranks:?}");
    }
}

#[test]
fn toxicity_tail_matches_statrs() {
    let params = DesignParams::default();
    for n in 1..=40 {
        for y in 0..=n {
            let ours = toxicity_tail(y, n, &params);
            let reference = common::beta_tail(y, n, 0.3);
            assert!((ours - reference).abs() < 1e-10, "y={y} n={n}: {ours} vs {reference}");
        }
    }
}

#[test]
fn safety_exclusion_is_monotone_in_y() {
    let params = DesignParams::default();
    for n in 1..=40 {
        let flags: Vec<bool> = (0..=n).map(|y| safety_exclude(y, n, &params).unwrap()).collect();
        assert!(flags.windows(2).all(|w| !w[0] || w[1]), "n={n}");
    }
}

fn state_with(outcomes: &[(usize, bool)], num_doses: usize) -> TrialState {
    // Enroll each patient as a main-cohort member at its dose by opening cohorts as needed.
    let mut s = TrialState::new(DoseGrid::new(num_doses), DesignParams::default()).unwrap();
    let mut id = 0;
    for chunk in outcomes.chunks(3) {
        let dose = chunk[0].0;
        if id > 0 {
            let decision = bi33_core::Decision::complete(Action::S, s.current_main_dose);
            s.push(0.0, Event::MainCohortOpened { dose, decision }, Actor::Engine).unwrap();
        }
        for &(d, dlt) in chunk {
            assert_eq!(d, dose);
            s.push(0.0, Event::Enroll { patient: id, dose, cohort: CohortKind::Main }, Actor::Coordinator).unwrap();
            s.push(0.0, Event::DltResolved { patient: id, dlt }, Actor::Coordinator).unwrap();
            id += 1;
        }
    }
    s
}

#[test]
fn guarded_decision_overrides() {
    // Clean cohort at the top dose stays.
    let s = state_with(&[(1, false), (1, false), (1, false), (2, false), (2, false), (2, false)], 2);
    match guarded_decision(&s, 2).unwrap() {
        Guarded::Proceed(d) => assert_eq!(d.action, Action::S),
        other => panic!("{other:?}"),
    }
    // Three DLTs at dose 1 stop the trial.
    let s = state_with(&[(1, true), (1, true), (1, true)], 3);
    assert_eq!(guarded_decision(&s, 1).unwrap(), Guarded::StopForSafety);
    assert!(s.stopped_safety);
    // Escalation blocked by an excluded next dose.
    let s = state_with(
        &[(1, false), (1, false), (1, false), (2, true), (2, true), (2, true), (1, false), (1, false), (1, false)],
        3,
    );
    assert!(s.is_excluded(2) && s.is_excluded(3));
    match guarded_decision(&s, 1).unwrap() {
        Guarded::Proceed(d) => assert_eq!(d.action, Action::S),
        other => panic!("{other:?}"),
    }
}

#[test]
fn pava_worked_example() {
    let fit = isotonic_fit(&[0, 2, 1], &[3, 3, 3]);
    let got: Vec<f64> = fit.post_means.iter().map(|x| x.unwrap()).collect();
    let raw: Vec<f64> = [0u32, 2, 1].iter().map(|&y| (0.005 + y as f64) / 3.01).collect();
    let want = common::isotonic_exhaustive(&raw, &[3.0; 3]);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
    assert!((got[1] - 0.5).abs() < 1e-12);
}

#[test]
fn mtd_of_early_stopped_trial_is_none() {
    let s = state_with(&[(1, true), (1, true), (1, true)], 3);
    assert_eq!(select_mtd(&s), None);
}

#[test]
fn exported_decision_table_agrees_with_oracle() {
    let csv = decision_table_csv(&DesignParams::default(), 12);
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (n, y): (u32, u32) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        assert_eq!(f[2].chars().next().unwrap(), common::table1(y, n, 25, 35));
    }
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=7).prop_flat_map(|k| {
        (prop::collection::vec(0.0f64..1.0, k), prop::collection::vec(1u32..=15, k))
            .prop_map(|(v, w)| (v, w.into_iter().map(f64::from).collect()))
    })
}

proptest! {
    #[test]
    fn pava_equals_exhaustive_projection((values, weights) in instance()) {
        let fit = pava_isotonic(&values, &weights).unwrap();
        let reference = common::isotonic_exhaustive(&values, &weights);
        for (a, b) in fit.iter().zip(&reference) {
            prop_assert!((a - b).abs() < 1e-9, "{fit:?} vs {reference:?}");
        }
        prop_assert!(fit.windows(2).all(|w| w[0] <= w[1] + 1e-12));
    }

    #[test]
    fn selected_mtd_respects_the_upper_bound(
        data in prop::collection::vec((0u32..=9, 0u32..=9), 2..=6)
    ) {
        let n: Vec<u32> = data.iter().map(|&(a, b)| a.max(b)).collect();
        let y: Vec<u32> = data.iter().map(|&(a, b)| a.min(b)).collect();
        let fit = isotonic_fit(&y, &n);
        let eligible: Vec<bool> = n.iter().map(|&x| x > 0).collect();
        let params = DesignParams::default();
        if let Some(d) = select_mtd_from_estimates(&fit.post_means, &eligible, &params) {
            prop_assert!(n[d - 1] > 0);
            prop_assert!(fit.post_means[d - 1].unwrap() <= params.ei_upper() + 1e-12);
            // No eligible dose is strictly closer to the target.
            let best = fit.post_means[d - 1].unwrap();
            for (i, est) in fit.post_means.iter().enumerate() {
                if let Some(p) = est {
                    if *p <= params.ei_upper() + 1e-12 {
                        prop_assert!((p - 0.3).abs() >= (best - 0.3).abs() - 1e-12, "dose {}", i + 1);
                    }
                }
            }
        }
    }
}
