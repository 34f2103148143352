//! Trial state, the event log, and event-sourced state transitions.
//!
//! A [`TrialState`] is only ever changed by applying an [`EventRecord`]. The
//! simulator, the conduct service, and the audit trail all go through
//! [`TrialState::apply`], so replaying a log reproduces the state exactly.

use serde::{Deserialize, Serialize};

use crate::error::{TrialError, ValidationError, FieldError};
use crate::rules;

/// 1-based dose index.
pub type Dose = usize;

/// Slack used when comparing event times against DLT window ends.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseGrid {
    pub num_doses: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl DoseGrid {
    pub fn new(num_doses: usize) -> Self {
        DoseGrid { num_doses, labels: None }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut errs = Vec::new();
        if self.num_doses < 2 {
            errs.push(FieldError {
                field: "num_doses".into(),
                message: "at least two doses are required".into(),
            });
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.num_doses {
                errs.push(FieldError {
                    field: "labels".into(),
                    message: format!("expected {} labels, got {}", self.num_doses, labels.len()),
                });
            }
        }
        if errs.is_empty() { Ok(()) } else { Err(ValidationError(errs)) }
    }
}

/// Design parameters of a Bi3+3 trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignParams {
    /// Target toxicity probability.
    pub p_t: f64,
    /// Lower half-width of the equivalence interval.
    pub eps1: f64,
    /// Upper half-width of the equivalence interval.
    pub eps2: f64,
    /// Efficacy-screen threshold for raising the backfill floor.
    pub xi0: f64,
    /// Posterior threshold of the dose-exclusion safety rule.
    pub eta: f64,
    /// Suspension threshold on the de-escalation probability.
    pub pi_d: f64,
    pub cohort_size: u32,
    pub max_main_n: u32,
    pub max_per_dose_n: Option<u32>,
    pub dlt_window_days: f64,
    pub efficacy_lag_days: f64,
    /// Prior mass for the change point at each untried dose.
    pub prior_e: f64,
    /// Minimum number of toxicity-evaluable patients before the exclusion rule is evaluated.
    pub safety_min_n: u32,
    /// Restrict backfill to the dose directly below the main dose.
    pub backfill_adjacent_only: bool,
}

impl Default for DesignParams {
    fn default() -> Self {
        DesignParams {
            p_t: 0.3,
            eps1: 0.05,
            eps2: 0.05,
            xi0: 0.8,
            eta: 0.95,
            pi_d: 0.8,
            cohort_size: 3,
            max_main_n: 30,
            max_per_dose_n: None,
            dlt_window_days: 28.0,
            efficacy_lag_days: 90.0,
            prior_e: 0.05,
            safety_min_n: 3,
            backfill_adjacent_only: false,
        }
    }
}

impl DesignParams {
    pub fn ei_lower(&self) -> f64 {
        self.p_t - self.eps1
    }

    pub fn ei_upper(&self) -> f64 {
        self.p_t + self.eps2
    }

    /// Field-level validation against a grid of `num_doses` doses.
    pub fn validate(&self, num_doses: usize) -> Result<(), ValidationError> {
        let mut errs = Vec::new();
        let mut push = |field: &str, message: String| {
            errs.push(FieldError { field: field.into(), message })
        };
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.p_t) {
            push("p_t", format!("must lie in (0,1), got {}", self.p_t));
        }
        if !(self.eps1 >= 0.0) || self.eps1 >= self.p_t {
            push("eps1", format!("must satisfy 0 <= eps1 < p_t, got {}", self.eps1));
        }
        if !(self.eps2 >= 0.0) || self.p_t + self.eps2 >= 1.0 {
            push("eps2", format!("must satisfy 0 <= eps2 and p_t + eps2 < 1, got {}", self.eps2));
        }
        for (name, v) in [("xi0", self.xi0), ("eta", self.eta), ("pi_d", self.pi_d)] {
            if !open_unit(v) {
                push(name, format!("must lie in (0,1), got {v}"));
            }
        }
        if self.cohort_size < 1 {
            push("cohort_size", "must be at least 1".into());
        }
        if self.max_main_n < self.cohort_size {
            push("max_main_n", "must be at least one cohort".into());
        }
        if let Some(cap) = self.max_per_dose_n {
            if cap < 1 {
                push("max_per_dose_n", "must be positive when set".into());
            }
        }
        if !(self.dlt_window_days > 0.0) || !self.dlt_window_days.is_finite() {
            push("dlt_window_days", "must be a positive number of days".into());
        }
        if !(self.efficacy_lag_days > 0.0) || !self.efficacy_lag_days.is_finite() {
            push("efficacy_lag_days", "must be a positive number of days".into());
        }
        if !(self.prior_e > 0.0) || self.prior_e * (num_doses as f64 - 1.0) >= 1.0 {
            push("prior_e", format!("must satisfy 0 < prior_e*(D-1) < 1 for D={num_doses}"));
        }
        if errs.is_empty() { Ok(()) } else { Err(ValidationError(errs)) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CohortKind {
    Main,
    Backfill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DltStatus {
    Pending,
    No,
    Yes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EfficacyStatus {
    Pending,
    No,
    Yes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: u32,
    pub dose: Dose,
    pub cohort_kind: CohortKind,
    pub enroll_time: f64,
    pub dlt: DltStatus,
    pub dlt_resolve_time: Option<f64>,
    pub efficacy: EfficacyStatus,
    pub efficacy_resolve_time: Option<f64>,
}

impl PatientRecord {
    /// Elapsed DLT follow-up as a fraction of the window, clamped to [0, 1).
    pub fn followup_fraction(&self, clock: f64, window: f64) -> f64 {
        let w = (clock - self.enroll_time) / window;
        w.clamp(0.0, 1.0 - 1e-12)
    }

    pub fn window_end(&self, window: f64) -> f64 {
        self.enroll_time + window
    }
}

/// Per-dose summary of the patient list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseTally {
    pub n_tox_evaluable: u32,
    pub y: u32,
    pub n_pending: u32,
    /// Follow-up fractions of pending patients, ascending.
    pub pending_fractions: Vec<f64>,
    pub n_eff_evaluable: u32,
    pub v: u32,
    pub n_enrolled: u32,
    pub excluded: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DoseCounts {
    pub n_enrolled: u32,
    pub n_backfill: u32,
    pub n_tox_evaluable: u32,
    pub y: u32,
    pub n_eff_evaluable: u32,
    pub v: u32,
    pub excluded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrialStatus {
    EnrollingMain,
    EnrollingBackfill,
    AwaitingOutcomes,
    Suspended,
    StoppedSafety,
    Completed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    E,
    S,
    D,
    Suspend,
}

impl Action {
    pub fn as_str(&self) -> &'static str {
        match self {
            Action::E => "E",
            Action::S => "S",
            Action::D => "D",
            Action::Suspend => "Suspend",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionSource {
    CompleteData,
    #[serde(rename = "POD")]
    Pod,
}

/// Probabilities of (escalate, stay, de-escalate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PodProbs {
    pub e: f64,
    pub s: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: Action,
    pub dose: Dose,
    pub source: DecisionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pod_probs: Option<PodProbs>,
}

impl Decision {
    pub fn complete(action: Action, dose: Dose) -> Self {
        Decision { action, dose, source: DecisionSource::CompleteData, pod_probs: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CloseReason {
    MaxSampleSize,
    Manual,
}

/// State transitions. Coordinator events describe what happened to patients;
/// engine events record the decisions the design executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum Event {
    Enroll { patient: u32, dose: Dose, cohort: CohortKind },
    DltResolved { patient: u32, dlt: bool },
    EfficacyResolved { patient: u32, response: bool },
    ClockAdvance {},
    MainCohortOpened { dose: Dose, decision: Decision },
    BackfillFloorSet { floor: Dose },
    Suspended { decision: Decision },
    Resumed {},
    EnrollmentClosed { reason: CloseReason },
}

impl Event {
    pub fn is_engine_event(&self) -> bool {
        matches!(
            self,
            Event::MainCohortOpened { .. }
                | Event::BackfillFloorSet { .. }
                | Event::Suspended { .. }
                | Event::Resumed {}
                | Event::EnrollmentClosed { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Coordinator,
    Engine,
    Simulator,
}

/// One line of the event log. Field order is the canonical serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub time_days: f64,
    #[serde(flatten)]
    pub event: Event,
    pub actor: Actor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_id: Option<String>,
}

pub fn to_ndjson(records: &[EventRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("event records always serialize"));
        out.push('\n');
    }
    out
}

pub fn from_ndjson(text: &str) -> Result<Vec<EventRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialState {
    pub grid: DoseGrid,
    pub params: DesignParams,
    pub patients: Vec<PatientRecord>,
    /// Index 0 holds dose 1.
    pub counts: Vec<DoseCounts>,
    pub current_main_dose: Dose,
    pub backfill_floor: Dose,
    pub status: TrialStatus,
    pub clock: f64,
    /// Patient ids of the currently open main cohort.
    pub cohort: Vec<u32>,
    pub main_enrolled: u32,
    pub last_decision: Option<Decision>,
    pub suspension: Option<Decision>,
    pub stopped_safety: bool,
    pub closed: bool,
    pub next_seq: u64,
    /// Bumped on each efficacy outcome; lets callers cache the efficacy screen.
    pub efficacy_version: u64,
}

impl TrialState {
    pub fn new(grid: DoseGrid, params: DesignParams) -> Result<Self, ValidationError> {
        grid.validate()?;
        params.validate(grid.num_doses)?;
        let counts = vec![DoseCounts::default(); grid.num_doses];
        Ok(TrialState {
            grid,
            params,
            patients: Vec::new(),
            counts,
            current_main_dose: 1,
            backfill_floor: 1,
            status: TrialStatus::EnrollingMain,
            clock: 0.0,
            cohort: Vec::new(),
            main_enrolled: 0,
            last_decision: None,
            suspension: None,
            stopped_safety: false,
            closed: false,
            next_seq: 0,
            efficacy_version: 0,
        })
    }

    pub fn num_doses(&self) -> usize {
        self.grid.num_doses
    }

    pub fn counts(&self, dose: Dose) -> &DoseCounts {
        &self.counts[dose - 1]
    }

    pub fn is_excluded(&self, dose: Dose) -> bool {
        self.counts[dose - 1].excluded
    }

    pub fn is_tried(&self, dose: Dose) -> bool {
        self.counts[dose - 1].n_enrolled > 0
    }

    pub fn num_tried(&self) -> usize {
        self.counts.iter().filter(|c| c.n_enrolled > 0).count()
    }

    pub fn patient(&self, id: u32) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.id == id)
    }

    pub fn is_terminal(&self) -> bool {
        self.stopped_safety || self.closed
    }

    pub fn cohort_full(&self) -> bool {
        self.cohort.len() as u32 >= self.params.cohort_size
    }

    /// Whether every enrolled patient has a resolved DLT status.
    pub fn all_dlt_resolved(&self) -> bool {
        self.patients.iter().all(|p| p.dlt != DltStatus::Pending)
    }

    pub fn all_resolved(&self) -> bool {
        self.patients
            .iter()
            .all(|p| p.dlt != DltStatus::Pending && p.efficacy != EfficacyStatus::Pending)
    }

    pub fn pending_at(&self, dose: Dose) -> usize {
        self.patients
            .iter()
            .filter(|p| p.dose == dose && p.dlt == DltStatus::Pending)
            .count()
    }

    /// Whether the main cohort at the current dose is complete and fully observed.
    pub fn main_cohort_observed(&self) -> bool {
        self.cohort_full() && self.pending_at(self.current_main_dose) == 0
    }

    /// The backfill set B_d: doses k0..d-1 that were tried and are not excluded.
    pub fn backfill_set(&self) -> Vec<Dose> {
        let d = self.current_main_dose;
        (self.backfill_floor.max(1)..d)
            .filter(|&k| {
                let c = self.counts(k);
                !c.excluded && c.n_enrolled > 0
            })
            .collect()
    }

    /// Doses that may receive the next backfill patient: B_d restricted by the
    /// per-dose cap and, when configured, to the dose directly below the main dose.
    pub fn backfill_targets(&self) -> Vec<Dose> {
        let d = self.current_main_dose;
        self.backfill_set()
            .into_iter()
            .filter(|&k| !self.params.backfill_adjacent_only || k + 1 == d)
            .filter(|&k| {
                self.params
                    .max_per_dose_n
                    .is_none_or(|cap| self.counts(k).n_enrolled < cap)
            })
            .collect()
    }

    /// Highest dose that is not excluded, if any.
    pub fn highest_open_dose(&self) -> Option<Dose> {
        (1..=self.num_doses()).rev().find(|&d| !self.is_excluded(d))
    }

    fn derive_status(&self) -> TrialStatus {
        if self.stopped_safety {
            TrialStatus::StoppedSafety
        } else if self.closed {
            TrialStatus::Completed
        } else if self.suspension.is_some() {
            TrialStatus::Suspended
        } else if !self.cohort_full() {
            TrialStatus::EnrollingMain
        } else if !self.backfill_targets().is_empty() {
            TrialStatus::EnrollingBackfill
        } else {
            TrialStatus::AwaitingOutcomes
        }
    }

    fn check_dose(&self, dose: Dose) -> Result<(), TrialError> {
        if dose == 0 || dose > self.num_doses() {
            Err(TrialError::DoseOutOfRange { dose, num_doses: self.num_doses() })
        } else {
            Ok(())
        }
    }

    fn patient_index(&self, id: u32) -> Result<usize, TrialError> {
        self.patients
            .iter()
            .position(|p| p.id == id)
            .ok_or_else(|| inconsistent(format!("unknown patient {id}")))
    }

    /// Validate `rec` against the current state without changing anything.
    fn validate(&self, rec: &EventRecord) -> Result<(), TrialError> {
        if rec.seq != self.next_seq {
            return Err(inconsistent(format!("expected seq {}, got {}", self.next_seq, rec.seq)));
        }
        if !rec.time_days.is_finite() || rec.time_days < self.clock - TIME_EPS {
            return Err(inconsistent(format!(
                "event time {} precedes trial clock {}",
                rec.time_days, self.clock
            )));
        }
        let t = rec.time_days;
        let window = self.params.dlt_window_days;
        let mut resolving = None;
        match &rec.event {
            Event::Enroll { patient, dose, cohort } => {
                self.check_dose(*dose)?;
                if self.patients.iter().any(|p| p.id == *patient) {
                    return Err(inconsistent(format!("patient {patient} already enrolled")));
                }
                if self.is_excluded(*dose) {
                    return Err(inconsistent(format!("dose {dose} is excluded")));
                }
                if self.stopped_safety {
                    return Err(inconsistent("trial stopped for safety".into()));
                }
                if self.closed {
                    return Err(inconsistent("enrollment is closed".into()));
                }
                if self.suspension.is_some() {
                    return Err(inconsistent("enrollment is suspended".into()));
                }
                match cohort {
                    CohortKind::Main => {
                        if *dose != self.current_main_dose {
                            return Err(inconsistent(format!(
                                "main cohort is enrolling at dose {}, not {dose}",
                                self.current_main_dose
                            )));
                        }
                        if self.cohort_full() {
                            return Err(inconsistent("main cohort is already full".into()));
                        }
                    }
                    CohortKind::Backfill => {
                        if !self.cohort_full() {
                            return Err(inconsistent(
                                "backfill opens only after the main cohort is enrolled".into(),
                            ));
                        }
                        if !self.backfill_targets().contains(dose) {
                            return Err(inconsistent(format!("dose {dose} is not in the backfill set")));
                        }
                    }
                }
            }
            Event::DltResolved { patient, .. } => {
                let p = &self.patients[self.patient_index(*patient)?];
                if p.dlt != DltStatus::Pending {
                    return Err(inconsistent(format!("DLT status of patient {patient} already resolved")));
                }
                if t < p.enroll_time - TIME_EPS || t > p.window_end(window) + TIME_EPS {
                    return Err(inconsistent(format!(
                        "patient {patient}: DLT resolution at day {t} is outside the follow-up window"
                    )));
                }
                resolving = Some(*patient);
            }
            Event::EfficacyResolved { patient, .. } => {
                let p = &self.patients[self.patient_index(*patient)?];
                if p.efficacy != EfficacyStatus::Pending {
                    return Err(inconsistent(format!("efficacy of patient {patient} already resolved")));
                }
                if t < p.enroll_time - TIME_EPS {
                    return Err(inconsistent(format!("patient {patient}: efficacy before enrollment")));
                }
            }
            Event::ClockAdvance {} => {}
            Event::MainCohortOpened { dose, decision } => {
                self.check_dose(*dose)?;
                if self.is_terminal() {
                    return Err(inconsistent("trial is no longer enrolling".into()));
                }
                if self.is_excluded(*dose) {
                    return Err(inconsistent(format!("dose {dose} is excluded")));
                }
                if *dose > self.current_main_dose + 1 {
                    return Err(inconsistent(format!(
                        "escalation from {} to {dose} skips a dose",
                        self.current_main_dose
                    )));
                }
                if !self.cohort_full() && !self.is_excluded(self.current_main_dose) {
                    return Err(inconsistent("current main cohort is still open".into()));
                }
                if self.main_enrolled >= self.params.max_main_n {
                    return Err(inconsistent("main cohort sample size exhausted".into()));
                }
                self.check_dose(decision.dose)?;
            }
            Event::BackfillFloorSet { floor } => self.check_dose(*floor)?,
            Event::Suspended { .. } => {
                if self.is_terminal() {
                    return Err(inconsistent("trial is no longer enrolling".into()));
                }
            }
            Event::Resumed {} => {
                if self.suspension.is_none() {
                    return Err(inconsistent("trial is not suspended".into()));
                }
            }
            Event::EnrollmentClosed { .. } => {
                if self.stopped_safety {
                    return Err(inconsistent("trial already stopped for safety".into()));
                }
            }
        }
        // No patient may pass the end of the DLT window unresolved.
        for p in &self.patients {
            if p.dlt == DltStatus::Pending
                && Some(p.id) != resolving
                && t > p.window_end(window) + TIME_EPS
            {
                return Err(inconsistent(format!(
                    "clock {t} passes the DLT window of pending patient {}",
                    p.id
                )));
            }
        }
        Ok(())
    }

    /// Apply one event in place. On error the state is unchanged.
    pub fn apply(&mut self, rec: &EventRecord) -> Result<(), TrialError> {
        self.validate(rec)?;
        self.clock = self.clock.max(rec.time_days);
        self.next_seq += 1;
        match &rec.event {
            Event::Enroll { patient, dose, cohort } => {
                self.patients.push(PatientRecord {
                    id: *patient,
                    dose: *dose,
                    cohort_kind: *cohort,
                    enroll_time: rec.time_days,
                    dlt: DltStatus::Pending,
                    dlt_resolve_time: None,
                    efficacy: EfficacyStatus::Pending,
                    efficacy_resolve_time: None,
                });
                let c = &mut self.counts[dose - 1];
                c.n_enrolled += 1;
                match cohort {
                    CohortKind::Main => {
                        self.cohort.push(*patient);
                        self.main_enrolled += 1;
                    }
                    CohortKind::Backfill => c.n_backfill += 1,
                }
            }
            Event::DltResolved { patient, dlt } => {
                let i = self.patient_index(*patient)?;
                let p = &mut self.patients[i];
                p.dlt = if *dlt { DltStatus::Yes } else { DltStatus::No };
                p.dlt_resolve_time = Some(rec.time_days);
                let c = &mut self.counts[p.dose - 1];
                c.n_tox_evaluable += 1;
                if *dlt {
                    c.y += 1;
                }
                self.recheck_safety();
            }
            Event::EfficacyResolved { patient, response } => {
                let i = self.patient_index(*patient)?;
                let p = &mut self.patients[i];
                p.efficacy = if *response { EfficacyStatus::Yes } else { EfficacyStatus::No };
                p.efficacy_resolve_time = Some(rec.time_days);
                let c = &mut self.counts[p.dose - 1];
                c.n_eff_evaluable += 1;
                if *response {
                    c.v += 1;
                }
                self.efficacy_version += 1;
            }
            Event::ClockAdvance {} => {}
            Event::MainCohortOpened { dose, decision } => {
                self.current_main_dose = *dose;
                self.cohort.clear();
                self.last_decision = Some(decision.clone());
                self.suspension = None;
            }
            Event::BackfillFloorSet { floor } => self.backfill_floor = *floor,
            Event::Suspended { decision } => self.suspension = Some(decision.clone()),
            Event::Resumed {} => self.suspension = None,
            Event::EnrollmentClosed { .. } => {
                self.closed = true;
                self.suspension = None;
            }
        }
        self.status = self.derive_status();
        Ok(())
    }

    /// Safety rule: exclude the lowest excessively toxic dose and everything above it.
    fn recheck_safety(&mut self) {
        let min_n = self.params.safety_min_n.max(1);
        let first_toxic = (1..=self.num_doses()).find(|&d| {
            let c = self.counts(d);
            c.n_tox_evaluable >= min_n
                && rules::safety_exclude(c.y, c.n_tox_evaluable, &self.params).unwrap_or(false)
        });
        if let Some(d) = first_toxic {
            for c in &mut self.counts[d - 1..] {
                c.excluded = true;
            }
            if d == 1 {
                self.stopped_safety = true;
                self.suspension = None;
            }
        }
    }

    /// Build the next record for `event` at `time_days`.
    pub fn record(&self, time_days: f64, event: Event, actor: Actor) -> EventRecord {
        EventRecord { seq: self.next_seq, time_days, event, actor, event_id: None }
    }

    /// Convenience: build and apply a record, returning it.
    pub fn push(&mut self, time_days: f64, event: Event, actor: Actor) -> Result<EventRecord, TrialError> {
        let rec = self.record(time_days, event, actor);
        self.apply(&rec)?;
        Ok(rec)
    }
}

fn inconsistent(msg: String) -> TrialError {
    TrialError::InconsistentEvent(msg)
}

/// Pure transition: returns the state after `rec`.
pub fn apply_event(state: &TrialState, rec: &EventRecord) -> Result<TrialState, TrialError> {
    let mut next = state.clone();
    next.apply(rec)?;
    Ok(next)
}

/// Pure projection of the patient list onto one dose.
pub fn tally(state: &TrialState, dose: Dose) -> Result<DoseTally, TrialError> {
    state.check_dose(dose)?;
    let c = state.counts(dose);
    let window = state.params.dlt_window_days;
    let mut pending_fractions: Vec<f64> = state
        .patients
        .iter()
        .filter(|p| p.dose == dose && p.dlt == DltStatus::Pending)
        .map(|p| p.followup_fraction(state.clock, window))
        .collect();
    pending_fractions.sort_by(f64::total_cmp);
    Ok(DoseTally {
        n_tox_evaluable: c.n_tox_evaluable,
        y: c.y,
        n_pending: pending_fractions.len() as u32,
        pending_fractions,
        n_eff_evaluable: c.n_eff_evaluable,
        v: c.v,
        n_enrolled: c.n_enrolled,
        excluded: c.excluded,
    })
}

/// Check the structural invariants of a state.
pub fn check_invariants(state: &TrialState) -> Result<(), String> {
    let total: u32 = state.counts.iter().map(|c| c.n_enrolled).sum();
    if total as usize != state.patients.len() {
        return Err(format!("tally conservation broken: {total} != {}", state.patients.len()));
    }
    for (i, c) in state.counts.iter().enumerate() {
        let dose = i + 1;
        if c.y > c.n_tox_evaluable || c.v > c.n_eff_evaluable || c.n_tox_evaluable > c.n_enrolled {
            return Err(format!("dose {dose}: counts out of range {c:?}"));
        }
        let pending = state.pending_at(dose) as u32;
        if c.n_tox_evaluable + pending != c.n_enrolled {
            return Err(format!("dose {dose}: evaluable + pending != enrolled"));
        }
        if c.n_backfill > c.n_enrolled {
            return Err(format!("dose {dose}: more backfill than enrolled"));
        }
    }
    let cs = state.params.cohort_size;
    for j in 1..state.current_main_dose {
        if state.counts(j).n_enrolled < cs {
            return Err(format!(
                "dose {j} lies below the main dose {} but has fewer than {cs} patients",
                state.current_main_dose
            ));
        }
    }
    for p in &state.patients {
        if let Some(t) = p.dlt_resolve_time {
            if t < p.enroll_time {
                return Err(format!("patient {} resolved before enrollment", p.id));
            }
        }
    }
    Ok(())
}

/// Replay a log from a fresh state, validating invariants after every event.
pub fn replay(
    grid: DoseGrid,
    params: DesignParams,
    records: &[EventRecord],
) -> Result<TrialState, TrialError> {
    let mut state =
        TrialState::new(grid, params).map_err(|e| inconsistent(e.to_string()))?;
    let mut excluded_before = vec![false; state.num_doses()];
    for rec in records {
        state.apply(rec)?;
        check_invariants(&state).map_err(inconsistent)?;
        for (was, c) in excluded_before.iter_mut().zip(&state.counts) {
            if *was && !c.excluded {
                return Err(inconsistent("exclusion flag was cleared".into()));
            }
            *was = c.excluded;
        }
    }
    Ok(state)
}
