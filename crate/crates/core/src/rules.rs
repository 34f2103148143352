//! Complete-data i3+3 decisions, safety rules, and MTD selection.

use serde::{Deserialize, Serialize};

use crate::error::RuleError;
use crate::numerics::beta_sf;
use crate::trial::{tally, Action, Decision, DesignParams, Dose, TrialState};

/// Tolerance for placing an observed rate relative to the equivalence interval,
/// so that e.g. 1/4 counts as inside [0.25, 0.35] despite 0.3 - 0.05 rounding low.
const EI_TOL: f64 = 1e-12;

/// Prior pseudo-counts used for the MTD posterior means.
pub const MTD_PRIOR: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Zone {
    Below,
    Inside,
    Above,
}

fn zone(rate: f64, params: &DesignParams) -> Zone {
    if rate < params.ei_lower() - EI_TOL {
        Zone::Below
    } else if rate > params.ei_upper() + EI_TOL {
        Zone::Above
    } else {
        Zone::Inside
    }
}

/// The i3+3 decision for `y` DLTs among `n` evaluable patients.
pub fn ei_decision(y: u32, n: u32, params: &DesignParams) -> Result<Action, RuleError> {
    if n == 0 || y > n {
        return Err(RuleError::InvalidTally { y, n });
    }
    let nf = n as f64;
    let action = match zone(y as f64 / nf, params) {
        Zone::Below => Action::E,
        Zone::Inside => Action::S,
        Zone::Above => match zone((y as f64 - 1.0) / nf, params) {
            Zone::Below => Action::S,
            Zone::Inside | Zone::Above => Action::D,
        },
    };
    Ok(action)
}

/// Pr(p > p_T | Beta(1 + y, 1 + n - y)).
pub fn toxicity_tail(y: u32, n: u32, params: &DesignParams) -> f64 {
    beta_sf(1.0 + y as f64, 1.0 + (n - y) as f64, params.p_t)
}

/// Dose-exclusion rule: true when the posterior probability of excess toxicity exceeds eta.
pub fn safety_exclude(y: u32, n: u32, params: &DesignParams) -> Result<bool, RuleError> {
    if n == 0 || y > n {
        return Err(RuleError::InvalidTally { y, n });
    }
    Ok(toxicity_tail(y, n, params) > params.eta)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Guarded {
    Proceed(Decision),
    StopForSafety,
}

/// The complete-data decision at `dose` with the safety overrides applied.
pub fn guarded_decision(state: &TrialState, dose: Dose) -> Result<Guarded, RuleError> {
    if state.stopped_safety {
        return Ok(Guarded::StopForSafety);
    }
    let t = tally(state, dose).map_err(|_| RuleError::Untried(dose))?;
    if t.n_pending > 0 {
        return Err(RuleError::PendingOutcomes(dose));
    }
    if t.excluded {
        if dose == 1 {
            return Ok(Guarded::StopForSafety);
        }
        return Ok(Guarded::Proceed(Decision::complete(Action::D, dose)));
    }
    if t.n_tox_evaluable == 0 {
        return Err(RuleError::Untried(dose));
    }
    let mut action = ei_decision(t.y, t.n_tox_evaluable, &state.params)?;
    if action == Action::E && (dose == state.num_doses() || state.is_excluded(dose + 1)) {
        action = Action::S;
    }
    Ok(Guarded::Proceed(Decision::complete(action, dose)))
}

/// Dose for the next main cohort after `action` at `dose`.
pub fn next_dose(action: Action, dose: Dose, num_doses: usize) -> Dose {
    match action {
        Action::E => (dose + 1).min(num_doses),
        Action::S | Action::Suspend => dose,
        Action::D => dose.saturating_sub(1).max(1),
    }
}

/// Weighted isotonic (non-decreasing) least-squares fit by pooling adjacent violators.
pub fn pava_isotonic(values: &[f64], weights: &[f64]) -> Result<Vec<f64>, RuleError> {
    if values.is_empty() {
        return Err(RuleError::EmptyInput);
    }
    assert_eq!(values.len(), weights.len(), "values and weights must align");
    // Blocks of (mean, weight, count).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let (m2, w2, c2) = blocks[blocks.len() - 1];
            let (m1, w1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            let w = w1 + w2;
            let m = if w > 0.0 {
                (m1 * w1 + m2 * w2) / w
            } else {
                (m1 * c1 as f64 + m2 * c2 as f64) / (c1 + c2) as f64
            };
            blocks.pop();
            *blocks.last_mut().unwrap() = (m, w, c1 + c2);
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for (m, _, c) in blocks {
        out.extend(std::iter::repeat_n(m, c));
    }
    Ok(out)
}

/// Isotonic toxicity estimates over tried doses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicFit {
    /// PAVA-smoothed posterior means; `None` for untried doses.
    pub post_means: Vec<Option<f64>>,
    pub weights: Vec<u32>,
    pub tried: Vec<bool>,
}

/// Posterior means (0.005 + y)/(0.01 + n) over doses with evaluable DLT data, smoothed by PAVA.
pub fn isotonic_fit(y: &[u32], n: &[u32]) -> IsotonicFit {
    let tried: Vec<bool> = n.iter().map(|&n| n > 0).collect();
    let (raw, w): (Vec<f64>, Vec<f64>) = y
        .iter()
        .zip(n)
        .filter(|(_, &n)| n > 0)
        .map(|(&y, &n)| ((MTD_PRIOR + y as f64) / (2.0 * MTD_PRIOR + n as f64), n as f64))
        .unzip();
    let mut post_means = vec![None; n.len()];
    if let Ok(fit) = pava_isotonic(&raw, &w) {
        let mut it = fit.into_iter();
        for (slot, &t) in post_means.iter_mut().zip(&tried) {
            if t {
                *slot = it.next();
            }
        }
    }
    IsotonicFit { post_means, weights: n.to_vec(), tried }
}

/// argmin |p̂ - p_T| over eligible doses with p̂ <= p_T + eps2. Ties go to the
/// lower dose, except that a tied isotonic block below p_T resolves to its top dose.
pub fn select_mtd_from_estimates(
    estimates: &[Option<f64>],
    eligible: &[bool],
    params: &DesignParams,
) -> Option<Dose> {
    let candidates: Vec<(Dose, f64)> = estimates
        .iter()
        .zip(eligible)
        .enumerate()
        .filter_map(|(i, (est, &ok))| match *est {
            Some(p) if ok && p <= params.ei_upper() + EI_TOL => Some((i + 1, p)),
            _ => None,
        })
        .collect();
    let best = candidates
        .iter()
        .map(|&(_, p)| (p - params.p_t).abs())
        .fold(f64::INFINITY, f64::min);
    let mut tied = candidates
        .iter()
        .filter(|&&(_, p)| (p - params.p_t).abs() <= best + EI_TOL);
    let &(lowest, p_low) = tied.next()?;
    if p_low < params.p_t {
        // Doses pooled into one isotonic block share an estimate; below the
        // target the highest dose of the block is the tolerated one.
        let block_top = tied
            .filter(|&&(_, p)| (p - p_low).abs() <= EI_TOL)
            .map(|&(d, _)| d)
            .next_back();
        return Some(block_top.unwrap_or(lowest));
    }
    Some(lowest)
}

/// End-of-trial MTD from the resolved DLT data.
pub fn select_mtd(state: &TrialState) -> Option<Dose> {
    if state.stopped_safety {
        return None;
    }
    let y: Vec<u32> = state.counts.iter().map(|c| c.y).collect();
    let n: Vec<u32> = state.counts.iter().map(|c| c.n_tox_evaluable).collect();
    let fit = isotonic_fit(&y, &n);
    let eligible: Vec<bool> = state
        .counts
        .iter()
        .map(|c| c.n_tox_evaluable > 0 && !c.excluded)
        .collect();
    select_mtd_from_estimates(&fit.post_means, &eligible, &state.params)
}

/// CSV (n, y, action) of the i3+3 decisions for n = 1..=max_n.
pub fn decision_table_csv(params: &DesignParams, max_n: u32) -> String {
    let mut out = String::from("n,y,action\n");
    for n in 1..=max_n {
        for y in 0..=n {
            let a = ei_decision(y, n, params).expect("y <= n and n >= 1");
            out.push_str(&format!("{n},{y},{}\n", a.as_str()));
        }
    }
    out
}
