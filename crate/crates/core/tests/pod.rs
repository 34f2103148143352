mod common;

use bi33_core::conduct::{next_engine_event, EngineConfig, FloorCache};
use bi33_core::pod::{backfill_round, configuration_weights, pod_gammas, PendingModel, RoundOutcome};
use bi33_core::trial::DoseTally;
use bi33_core::{Action, Actor, CohortKind, Decision, DesignParams, DoseGrid, Event, TrialState};
use proptest::prelude::*;

fn tally(y: u32, n: u32, ws: &[f64]) -> DoseTally {
    let mut ws = ws.to_vec();
    ws.sort_by(f64::total_cmp);
    DoseTally {
        n_tox_evaluable: n,
        y,
        n_pending: ws.len() as u32,
        pending_fractions: ws,
        n_eff_evaluable: 0,
        v: 0,
        n_enrolled: n,
        excluded: false,
    }
}

fn gammas(y: u32, n: u32, ws: &[f64]) -> [f64; 3] {
    let r = pod_gammas(&tally(y, n, ws), &DesignParams::default(), &PendingModel::default()).unwrap();
    [r.gamma.e, r.gamma.s, r.gamma.d]
}

fn pod_case() -> impl Strategy<Value = (u32, u32, Vec<f64>)> {
    (1u32..=12, 0u32..=12, prop::collection::vec(0.0f64..0.99, 1..=3))
        .prop_map(|(n, y, ws)| (y.min(n), n, ws))
}

#[test]
fn single_pending_at_zero_followup_weighs_the_posterior_mean() {
    let t = tally(1, 5, &[0.0]);
    let configs = configuration_weights(&t, &DesignParams::default(), &PendingModel::default()).unwrap();
    let dlt = configs.iter().find(|c| c.outcomes == [true]).unwrap();
    assert!((dlt.weight - 2.0 / 7.0).abs() < 1e-6);
    assert_eq!(dlt.action, Action::S); // 2/6 is inside the interval
    let none = configs.iter().find(|c| c.outcomes == [false]).unwrap();
    assert!((none.weight - 5.0 / 7.0).abs() < 1e-6);
    assert_eq!(none.action, Action::E); // 1/6 is below it
}

#[test]
fn complete_followup_limit_is_degenerate() {
    let g = gammas(1, 5, &[0.999_999_9]);
    assert!(g[0] > 1.0 - 1e-6, "{g:?}");
}

#[test]
fn monte_carlo_oracle_agrees_on_a_few_tallies() {
    for (i, (y, n, ws)) in [(1, 5, vec![0.3]), (2, 6, vec![0.1, 0.5]), (0, 3, vec![0.2, 0.4, 0.9]), (3, 9, vec![0.0, 0.6])]
        .into_iter()
        .enumerate()
    {
        let g = gammas(y, n, &ws);
        let (mc, se) = common::gammas_by_monte_carlo(y, n, &ws, 25, 35, 200_000, 100 + i as u64);
        for a in 0..3 {
            assert!((g[a] - mc[a]).abs() <= 4.0 * se[a].max(1e-12), "case {i} action {a}: {g:?} vs {mc:?}");
        }
    }
}

/// Beta-binomial pmf with Beta(a, b) prior over m future patients.
fn beta_binomial(m: u32, k: u32, a: f64, b: f64) -> f64 {
    use statrs::function::beta::ln_beta;
    let lf = |n: u32| (1..=n).map(|i| (i as f64).ln()).sum::<f64>();
    (lf(m) - lf(k) - lf(m - k) + ln_beta(a + k as f64, b + (m - k) as f64) - ln_beta(a, b)).exp()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_enumeration_oracle((y, n, ws) in pod_case()) {
        let g = gammas(y, n, &ws);
        let reference = common::gammas_by_enumeration(y, n, &ws, 25, 35);
        for a in 0..3 {
            prop_assert!((g[a] - reference[a]).abs() < 1e-8, "{g:?} vs {reference:?}");
        }
    }

    #[test]
    fn probabilities_sum_to_one(
        n in 0u32..=20, y in 0u32..=20, ws in prop::collection::vec(0.0f64..1.0, 0..=8)
    ) {
        let y = y.min(n);
        prop_assume!(n + ws.len() as u32 > 0);
        let g = gammas(y, n, &ws);
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(g.iter().all(|&x| (-1e-12..=1.0 + 1e-12).contains(&x)));
    }

    #[test]
    fn continuous_in_followup((y, n, ws) in pod_case(), j in 0usize..3) {
        let j = j % ws.len();
        let mut moved = ws.clone();
        moved[j] = (moved[j] + 1e-6).min(0.999);
        let (a, b) = (gammas(y, n, &ws), gammas(y, n, &moved));
        for k in 0..3 {
            prop_assert!((a[k] - b[k]).abs() < 1e-4);
        }
    }

    #[test]
    fn an_observed_dlt_shifts_mass_toward_deescalation((y, n, ws) in pod_case(), j in 0usize..3) {
        let j = j % ws.len();
        let before = gammas(y, n, &ws);
        let mut rest = ws.clone();
        rest.remove(j);
        let after = gammas(y + 1, n + 1, &rest);
        prop_assert!(after[2] >= before[2] - 1e-9, "{before:?} -> {after:?}");
        prop_assert!(after[0] <= before[0] + 1e-9, "{before:?} -> {after:?}");
    }

    #[test]
    fn zero_followup_reduces_to_beta_binomial(n in 0u32..=10, y in 0u32..=10, m in 1usize..=6) {
        let y = y.min(n);
        let t = tally(y, n, &vec![0.0; m]);
        let configs = configuration_weights(&t, &DesignParams::default(), &PendingModel::default()).unwrap();
        let mut by_count = vec![0.0; m + 1];
        for c in &configs {
            by_count[c.outcomes.iter().filter(|&&o| o).count()] += c.weight;
        }
        for (k, &w) in by_count.iter().enumerate() {
            let bb = beta_binomial(m as u32, k as u32, 1.0 + y as f64, 1.0 + (n - y) as f64);
            prop_assert!((w - bb).abs() < 1e-8, "k={k}: {w} vs {bb}");
        }
    }
}

/// Main cohort at dose `d` with three clean outcomes, plus backfill patients.
/// `backfill` lists (dose, Some(dlt) | None for pending) per patient.
fn trial_at(d: usize, num_doses: usize, history: &[(usize, [bool; 3])], backfill: &[(usize, Option<bool>)], params: DesignParams) -> TrialState {
    let mut s = TrialState::new(DoseGrid::new(num_doses), params).unwrap();
    let mut id = 0;
    let mut t = 0.0;
    let mut cohorts: Vec<(usize, [bool; 3])> = history.to_vec();
    cohorts.push((d, [false; 3]));
    for (i, (dose, outcomes)) in cohorts.iter().enumerate() {
        if i > 0 {
            let decision = Decision::complete(Action::E, s.current_main_dose);
            s.push(t, Event::MainCohortOpened { dose: *dose, decision }, Actor::Engine).unwrap();
        }
        let first = id;
        for _ in 0..3 {
            s.push(t, Event::Enroll { patient: id, dose: *dose, cohort: CohortKind::Main }, Actor::Coordinator).unwrap();
            id += 1;
        }
        if i + 1 == cohorts.len() {
            // Backfill enrolls while the last main cohort is followed: resolved
            // patients early on, pending ones the day before the main readout.
            let mut pending = Vec::new();
            let mut resolved = Vec::new();
            for &(bd, dlt) in backfill {
                match dlt {
                    Some(dlt) => {
                        s.push(t, Event::Enroll { patient: id, dose: bd, cohort: CohortKind::Backfill }, Actor::Coordinator).unwrap();
                        resolved.push((id, dlt));
                        id += 1;
                    }
                    None => pending.push(bd),
                }
            }
            for (pid, dlt) in resolved {
                s.push(t + 10.0, Event::DltResolved { patient: pid, dlt }, Actor::Coordinator).unwrap();
            }
            for bd in pending {
                s.push(t + 27.0, Event::Enroll { patient: id, dose: bd, cohort: CohortKind::Backfill }, Actor::Coordinator).unwrap();
                id += 1;
            }
        }
        t += 28.0;
        for (k, &dlt) in outcomes.iter().enumerate() {
            s.push(t, Event::DltResolved { patient: first + k as u32, dlt }, Actor::Coordinator).unwrap();
        }
    }
    s
}

#[test]
fn lowest_deescalating_backfill_dose_restarts_the_main_cohort() {
    // Dose 1 stays (1/3 plus a clean backfill), dose 2 de-escalates (2/3 + 1 DLT), dose 3 escalates.
    let clean = [false; 3];
    let history = [(1, [true, false, false]), (2, [true, false, false]), (3, clean)];
    let backfill = [(1, Some(false)), (2, Some(true)), (2, Some(true))];
    let s = trial_at(4, 5, &history, &backfill, DesignParams::default());
    assert!(!s.is_excluded(2));
    let main = Decision::complete(Action::E, 4);
    let round = backfill_round(&s, &main, &PendingModel::default()).unwrap();
    let actions: Vec<_> = round.assessments.iter().map(|a| (a.dose, a.result.a_star)).collect();
    assert_eq!(actions, vec![(1, Action::S), (2, Action::D), (3, Action::E)]);
    match round.outcome {
        RoundOutcome::NextMainDose { dose, .. } => assert_eq!(dose, 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn clean_backfill_lets_the_main_decision_stand() {
    let history = [(1, [false; 3]), (2, [false; 3])];
    let s = trial_at(3, 5, &history, &[(1, Some(false)), (2, None)], DesignParams::default());
    let main = Decision::complete(Action::E, 3);
    match backfill_round(&s, &main, &PendingModel::default()).unwrap().outcome {
        RoundOutcome::MainDecision { dose, .. } => assert_eq!(dose, 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn suspension_needs_stay_as_the_most_probable_action() {
    // Dose 2 has 2 DLTs in 6 plus one patient pending near the start of follow-up:
    // γ_D is sizeable but S is the most probable action.
    let history = [(1, [false; 3]), (2, [true, false, false])];
    let backfill = [(2, Some(true)), (2, Some(false)), (2, Some(false)), (2, None)];
    let pi_low = DesignParams { pi_d: 0.3, ..DesignParams::default() };
    let s = trial_at(3, 5, &history, &backfill, pi_low.clone());
    let t = bi33_core::trial::tally(&s, 2).unwrap();
    let g = pod_gammas(&t, &pi_low, &PendingModel::default()).unwrap();
    assert_eq!(g.a_star, Action::S);
    assert!(g.gamma.d > 0.3 && g.gamma.d < 0.5, "{:?}", g.gamma);
    // Cross-check the de-escalation probability against sampling.
    let (mc, se) = common::gammas_by_monte_carlo(t.y, t.n_tox_evaluable, &t.pending_fractions, 25, 35, 400_000, 9);
    assert!((g.gamma.d - mc[2]).abs() < 4.0 * se[2]);
    let main = Decision::complete(Action::E, 3);
    assert!(matches!(
        backfill_round(&s, &main, &PendingModel::default()).unwrap().outcome,
        RoundOutcome::SuspendAll { .. }
    ));
    // The engine suspends, and does not reopen until the pending outcomes resolve.
    let cfg = EngineConfig::default();
    let mut cache = FloorCache::default();
    let ev = next_engine_event(&s, &cfg, &mut cache, false).unwrap();
    assert!(matches!(ev, Some(Event::Suspended { .. })), "{ev:?}");

    // Under the default threshold the same data do not suspend: γ_D > 0.8 would
    // already make D the most probable action.
    let s = trial_at(3, 5, &history, &backfill, DesignParams::default());
    let main = Decision::complete(Action::E, 3);
    assert!(matches!(
        backfill_round(&s, &main, &PendingModel::default()).unwrap().outcome,
        RoundOutcome::MainDecision { .. }
    ));
}
