//! Probability-of-decision (POD) handling of pending DLT outcomes at backfill doses.
//!
//! Each pending patient eventually has a DLT or not. Enumerating those missing
//! outcomes and weighting them under a Beta posterior for the dose's toxicity
//! gives a probability for every decision the complete-data rule could make.

use serde::{Deserialize, Serialize};

use crate::error::PodError;
use crate::numerics::{ln_beta, UnitQuadrature};
use crate::rules::{ei_decision, next_dose};
use crate::trial::{tally, Action, Decision, DecisionSource, DesignParams, Dose, DoseTally, PodProbs, TrialState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendingModel {
    pub alpha0: f64,
    pub beta0: f64,
    pub quadrature_points: usize,
    /// Enumeration is 2^m in the number of pending patients.
    pub max_pending: usize,
}

impl Default for PendingModel {
    fn default() -> Self {
        PendingModel { alpha0: 1.0, beta0: 1.0, quadrature_points: 256, max_pending: 12 }
    }
}

impl PendingModel {
    pub fn validate(&self) -> Result<(), crate::error::ValidationError> {
        use crate::error::{FieldError, ValidationError};
        let mut errs = Vec::new();
        if !(self.alpha0 > 0.0) || !(self.beta0 > 0.0) {
            errs.push(FieldError { field: "alpha0/beta0".into(), message: "must be positive".into() });
        }
        if self.quadrature_points < 32 {
            errs.push(FieldError { field: "quadrature_points".into(), message: "must be at least 32".into() });
        }
        if self.max_pending > 20 {
            errs.push(FieldError { field: "max_pending".into(), message: "must be at most 20".into() });
        }
        if errs.is_empty() { Ok(()) } else { Err(ValidationError(errs)) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodResult {
    pub gamma: PodProbs,
    pub a_star: Action,
    pub suspend: bool,
}

/// Probability that a patient who is DLT-free through fraction `w` of the window
/// eventually has a DLT, when time to DLT is uniform over the window.
pub fn pending_dlt_prob(p: f64, w: f64) -> f64 {
    p * (1.0 - w) / (1.0 - p * w)
}

/// Posterior-weighted quadrature rule for Beta(a, b): weights sum to one.
fn posterior_rule(a: f64, b: f64, points: usize) -> (Vec<f64>, Vec<f64>) {
    let rule = UnitQuadrature::cached(points);
    let lb = ln_beta(a, b);
    let mut weights: Vec<f64> = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&p, &w)| w * ((a - 1.0) * p.ln() + (b - 1.0) * (1.0 - p).ln() - lb).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    (rule.nodes.clone(), weights)
}

fn check_pending(tally: &DoseTally, model: &PendingModel) -> Result<(), PodError> {
    let m = tally.pending_fractions.len();
    if m > model.max_pending {
        return Err(PodError::TooManyPending { pending: m, cap: model.max_pending });
    }
    Ok(())
}

/// Distribution of the number of eventual DLTs among the pending patients.
pub fn pending_count_distribution(tally: &DoseTally, model: &PendingModel) -> Result<Vec<f64>, PodError> {
    check_pending(tally, model)?;
    let ws = &tally.pending_fractions;
    let m = ws.len();
    let a = model.alpha0 + tally.y as f64;
    let b = model.beta0 + (tally.n_tox_evaluable - tally.y) as f64;
    let (nodes, weights) = posterior_rule(a, b, model.quadrature_points);
    let mut total = vec![0.0; m + 1];
    let mut dist = vec![0.0; m + 1];
    for (&p, &wt) in nodes.iter().zip(&weights) {
        dist.iter_mut().for_each(|x| *x = 0.0);
        dist[0] = 1.0;
        for (j, &w) in ws.iter().enumerate() {
            let pi = pending_dlt_prob(p, w);
            for s in (0..=j + 1).rev() {
                let stay = dist[s] * (1.0 - pi);
                let up = if s > 0 { dist[s - 1] * pi } else { 0.0 };
                dist[s] = stay + up;
            }
        }
        for (t, d) in total.iter_mut().zip(&dist) {
            *t += wt * d;
        }
    }
    Ok(total)
}

fn conservative_argmax(g: &PodProbs) -> Action {
    // Ties resolve toward the more conservative action: D, then S, then E.
    const TIE: f64 = 1e-12;
    let mut best = (Action::D, g.d);
    for (a, v) in [(Action::S, g.s), (Action::E, g.e)] {
        if v > best.1 + TIE {
            best = (a, v);
        }
    }
    best.0
}

/// POD for one dose: probabilities of E/S/D, the most probable action and the suspension flag.
pub fn pod_gammas(tally: &DoseTally, params: &DesignParams, model: &PendingModel) -> Result<PodResult, PodError> {
    let m = tally.pending_fractions.len();
    let n_total = tally.n_tox_evaluable + m as u32;
    let mut gamma = PodProbs { e: 0.0, s: 0.0, d: 0.0 };
    if m == 0 {
        let a = ei_decision(tally.y, tally.n_tox_evaluable, params)?;
        match a {
            Action::E => gamma.e = 1.0,
            Action::S => gamma.s = 1.0,
            _ => gamma.d = 1.0,
        }
        return Ok(PodResult { gamma, a_star: a, suspend: false });
    }
    let dist = pending_count_distribution(tally, model)?;
    for (s, &mass) in dist.iter().enumerate() {
        match ei_decision(tally.y + s as u32, n_total, params)? {
            Action::E => gamma.e += mass,
            Action::S => gamma.s += mass,
            _ => gamma.d += mass,
        }
    }
    let a_star = conservative_argmax(&gamma);
    let suspend = a_star == Action::S && gamma.d > params.pi_d;
    Ok(PodResult { gamma, a_star, suspend })
}

/// Weight and induced action of one configuration of missing outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationWeight {
    /// Eventual DLT indicator per pending patient, in `pending_fractions` order.
    pub outcomes: Vec<bool>,
    pub weight: f64,
    pub action: Action,
}

/// Per-configuration weights by explicit enumeration of all 2^m outcomes.
pub fn configuration_weights(
    tally: &DoseTally,
    params: &DesignParams,
    model: &PendingModel,
) -> Result<Vec<ConfigurationWeight>, PodError> {
    check_pending(tally, model)?;
    let ws = &tally.pending_fractions;
    let m = ws.len();
    let n_total = tally.n_tox_evaluable + m as u32;
    let a = model.alpha0 + tally.y as f64;
    let b = model.beta0 + (tally.n_tox_evaluable - tally.y) as f64;
    let (nodes, weights) = posterior_rule(a, b, model.quadrature_points);
    let mut out = Vec::with_capacity(1 << m);
    for mask in 0u32..(1u32 << m) {
        let outcomes: Vec<bool> = (0..m).map(|j| mask & (1 << j) != 0).collect();
        let weight: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(&p, &wt)| {
                wt * outcomes
                    .iter()
                    .zip(ws)
                    .map(|(&dlt, &w)| {
                        let pi = pending_dlt_prob(p, w);
                        if dlt { pi } else { 1.0 - pi }
                    })
                    .product::<f64>()
            })
            .sum();
        let y = tally.y + mask.count_ones();
        let action = ei_decision(y, n_total, params)?;
        out.push(ConfigurationWeight { outcomes, weight, action });
    }
    Ok(out)
}

/// Audit dump: one CSV row per configuration.
pub fn configurations_csv(configs: &[ConfigurationWeight]) -> String {
    let mut out = String::from("configuration,n_dlt,weight,action\n");
    for c in configs {
        let bits: String = c.outcomes.iter().map(|&b| if b { '1' } else { '0' }).collect();
        let n_dlt = c.outcomes.iter().filter(|&&b| b).count();
        out.push_str(&format!("{bits},{n_dlt},{},{}\n", c.weight, c.action.as_str()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackfillAssessment {
    pub dose: Dose,
    pub n_pending: u32,
    pub result: PodResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RoundOutcome {
    /// Pause enrollment everywhere; `decision` names the dose that triggered it.
    SuspendAll { decision: Decision },
    /// Restart the main cohort below the lowest backfill dose with a D decision.
    NextMainDose { dose: Dose, decision: Decision },
    /// No backfill dose objects; execute the main-dose decision.
    MainDecision { dose: Dose, decision: Decision },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackfillRound {
    pub assessments: Vec<BackfillAssessment>,
    pub outcome: RoundOutcome,
}

/// POD assessment of every backfill dose in B_d with enrolled patients.
pub fn assess_backfill(state: &TrialState, model: &PendingModel) -> Result<Vec<BackfillAssessment>, PodError> {
    state
        .backfill_set()
        .into_iter()
        .map(|k| {
            let t = tally(state, k).expect("backfill doses are in range");
            let result = pod_gammas(&t, &state.params, model)?;
            Ok(BackfillAssessment { dose: k, n_pending: t.n_pending, result })
        })
        .collect()
}

fn pod_decision(a: &BackfillAssessment, action: Action) -> Decision {
    if a.n_pending > 0 {
        Decision { action, dose: a.dose, source: DecisionSource::Pod, pod_probs: Some(a.result.gamma) }
    } else {
        Decision::complete(action, a.dose)
    }
}

/// Combine the main-dose decision with the backfill-dose PODs.
pub fn backfill_round(state: &TrialState, main: &Decision, model: &PendingModel) -> Result<BackfillRound, PodError> {
    let assessments = assess_backfill(state, model)?;
    let outcome = if let Some(a) = assessments.iter().find(|a| a.result.suspend) {
        RoundOutcome::SuspendAll { decision: pod_decision(a, Action::Suspend) }
    } else if let Some(a) = assessments.iter().find(|a| a.result.a_star == Action::D) {
        RoundOutcome::NextMainDose { dose: a.dose.saturating_sub(1).max(1), decision: pod_decision(a, Action::D) }
    } else {
        RoundOutcome::MainDecision {
            dose: next_dose(main.action, main.dose, state.num_doses()),
            decision: main.clone(),
        }
    };
    Ok(BackfillRound { assessments, outcome })
}
