//! The design's decision loop: turns the trial state into engine events, and
//! summarizes the state for the people conducting the trial.
//!
//! Both the simulator and the conduct service drive trials through [`advance`],
//! so a live session and a simulated trial make identical decisions on
//! identical data.

use serde::{Deserialize, Serialize};

use crate::efficacy::{
    fit_obd_posterior_with, screen_state, select_obd, EfficacyScreenConfig, FloorScreen, ObdPosterior,
    DEFAULT_IS_DRAWS,
};
use crate::error::{ConductError, PodError, ValidationError};
use crate::numerics::derive_seed;
use crate::pod::{assess_backfill, backfill_round, BackfillAssessment, PendingModel, RoundOutcome};
use crate::rules::{guarded_decision, isotonic_fit, select_mtd, Guarded};
use crate::trial::{
    Action, Actor, CloseReason, Decision, Dose, Event, EventRecord, TrialState, TrialStatus,
};

/// Version tag carried by every JSON document the engine emits.
pub const SCHEMA: &str = "bi33/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub pending: PendingModel,
    pub screen: EfficacyScreenConfig,
    /// Importance-sampling draws for the change-point posterior.
    pub obd_draws: usize,
    pub obd_seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            pending: PendingModel::default(),
            screen: EfficacyScreenConfig::default(),
            obd_draws: DEFAULT_IS_DRAWS,
            obd_seed: 0,
        }
    }
}

impl EngineConfig {
    /// Default configuration with all randomized analyses keyed off one seed.
    pub fn seeded(seed: u64) -> Self {
        let mut cfg = EngineConfig::default();
        cfg.reseed(seed);
        cfg
    }

    pub fn reseed(&mut self, seed: u64) {
        self.screen.seed = derive_seed(seed, &[1]);
        self.obd_seed = derive_seed(seed, &[2]);
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut errs = Vec::new();
        for r in [self.pending.validate(), self.screen.validate()] {
            if let Err(ValidationError(e)) = r {
                errs.extend(e);
            }
        }
        if self.obd_draws < 1000 {
            errs.push(crate::error::FieldError {
                field: "obd_draws".into(),
                message: "must be at least 1000".into(),
            });
        }
        if errs.is_empty() { Ok(()) } else { Err(ValidationError(errs)) }
    }
}

/// Memo of the last efficacy screen, keyed by the efficacy data version and
/// the main dose. The screen is a pure function of those two, so skipping a
/// recomputation never changes a result.
#[derive(Debug, Clone, Default)]
pub struct FloorCache {
    key: Option<(u64, Dose)>,
    screen: Option<FloorScreen>,
}

impl FloorCache {
    pub fn screen(&mut self, state: &TrialState, cfg: &EngineConfig) -> &FloorScreen {
        let key = (state.efficacy_version, state.current_main_dose);
        if self.key != Some(key) || self.screen.is_none() {
            self.screen = Some(screen_state(state, &cfg.screen));
            self.key = Some(key);
        }
        self.screen.as_ref().expect("just filled")
    }
}

/// A `BackfillFloorSet` event if the screened floor differs from the recorded one.
pub fn refresh_floor(state: &TrialState, cfg: &EngineConfig, cache: &mut FloorCache) -> Option<Event> {
    if state.is_terminal() {
        return None;
    }
    let floor = cache.screen(state, cfg).floor;
    (floor != state.backfill_floor).then_some(Event::BackfillFloorSet { floor })
}

/// The decision at the current main dose, if its cohort is complete and fully observed.
pub fn main_decision(state: &TrialState) -> Result<Option<Decision>, ConductError> {
    if state.is_terminal() || !state.main_cohort_observed() {
        return Ok(None);
    }
    match guarded_decision(state, state.current_main_dose).map_err(crate::error::PodError::from)? {
        Guarded::Proceed(d) => Ok(Some(d)),
        Guarded::StopForSafety => Ok(None),
    }
}

/// The next engine event the design calls for, or `None` if the trial must wait.
///
/// With `eager_floor` the efficacy screen is refreshed on every call; otherwise
/// only right before it is needed by a dosing decision (callers that allocate
/// backfill patients must call [`refresh_floor`] first).
pub fn next_engine_event(
    state: &TrialState,
    cfg: &EngineConfig,
    cache: &mut FloorCache,
    eager_floor: bool,
) -> Result<Option<Event>, ConductError> {
    if state.is_terminal() {
        return Ok(None);
    }
    if eager_floor {
        if let Some(ev) = refresh_floor(state, cfg, cache) {
            return Ok(Some(ev));
        }
    }
    let d = state.current_main_dose;
    if state.is_excluded(d) {
        // Safety rule 1 removed the current dose: restart below it straight away.
        return Ok(Some(match state.highest_open_dose() {
            Some(h) if state.main_enrolled < state.params.max_main_n => {
                Event::MainCohortOpened { dose: h, decision: Decision::complete(Action::D, d) }
            }
            _ => Event::EnrollmentClosed { reason: CloseReason::MaxSampleSize },
        }));
    }
    if state.cohort_full() && state.main_enrolled >= state.params.max_main_n {
        // The last main cohort is enrolled: stop enrolling and follow everyone up.
        return Ok(Some(Event::EnrollmentClosed { reason: CloseReason::MaxSampleSize }));
    }
    let Some(main) = main_decision(state)? else {
        return Ok(None);
    };
    if !eager_floor {
        if let Some(ev) = refresh_floor(state, cfg, cache) {
            return Ok(Some(ev));
        }
    }
    let round = backfill_round(state, &main, &cfg.pending)?;
    let event = match round.outcome {
        RoundOutcome::SuspendAll { decision } => {
            if state.suspension.is_some() {
                return Ok(None);
            }
            Event::Suspended { decision }
        }
        RoundOutcome::NextMainDose { dose, decision } | RoundOutcome::MainDecision { dose, decision } => {
            if state.suspension.is_some() {
                Event::Resumed {}
            } else {
                Event::MainCohortOpened { dose, decision }
            }
        }
    };
    Ok(Some(event))
}

/// Apply engine events until the design has nothing more to decide at the current clock.
///
/// Too many pending outcomes to enumerate is not an error here: the design
/// holds until some resolve, and the records applied so far are returned. On
/// any other error, records already applied to `state` are lost to the caller,
/// so callers that persist a log should treat that as fatal.
pub fn advance(
    state: &mut TrialState,
    cfg: &EngineConfig,
    cache: &mut FloorCache,
    eager_floor: bool,
) -> Result<Vec<EventRecord>, ConductError> {
    let mut out = Vec::new();
    loop {
        match next_engine_event(state, cfg, cache, eager_floor) {
            Ok(Some(ev)) => out.push(state.push(state.clock, ev, Actor::Engine)?),
            Ok(None) | Err(ConductError::Pod(PodError::TooManyPending { .. })) => return Ok(out),
            Err(e) => return Err(e),
        }
    }
}

/// What the next arriving patient may be enrolled into.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Slot {
    Main { dose: Dose },
    Backfill { doses: Vec<Dose> },
    Wait,
    Closed,
}

/// Enrollment options at the current state. Backfill doses are drawn uniformly from `doses`.
pub fn enrollment_slot(state: &TrialState) -> Slot {
    if state.is_terminal() {
        return Slot::Closed;
    }
    if state.suspension.is_some() {
        return Slot::Wait;
    }
    let d = state.current_main_dose;
    if !state.cohort_full() {
        return if state.is_excluded(d) { Slot::Wait } else { Slot::Main { dose: d } };
    }
    let doses = state.backfill_targets();
    if doses.is_empty() { Slot::Wait } else { Slot::Backfill { doses } }
}

/// End-of-trial (or "analyze now") selections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnalysis {
    pub mtd: Option<Dose>,
    pub obd: Option<Dose>,
    pub posterior: Option<ObdPosterior>,
}

pub fn final_analysis(state: &TrialState, cfg: &EngineConfig) -> FinalAnalysis {
    let mtd = select_mtd(state);
    let v: Vec<u32> = state.counts.iter().map(|c| c.v).collect();
    let n: Vec<u32> = state.counts.iter().map(|c| c.n_eff_evaluable).collect();
    let posterior = fit_obd_posterior_with(&v, &n, &state.params, cfg.obd_seed, cfg.obd_draws)
        .ok()
        .map(|mut p| {
            p.d_star = select_obd(&p, mtd, p.num_tried);
            p
        });
    let obd = posterior.as_ref().and_then(|p| p.d_star);
    FinalAnalysis { mtd, obd, posterior }
}

/// Everything the coordinator needs after posting outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionBundle {
    pub schema: String,
    pub status: TrialStatus,
    pub clock: f64,
    pub current_main_dose: Dose,
    /// The decision executed when the current main cohort was opened.
    pub main_decision: Option<Decision>,
    /// The decision at the current dose once its cohort is observed but not yet executed
    /// (for example while enrollment is suspended).
    pub pending_main_decision: Option<Decision>,
    pub backfill_decisions: Vec<BackfillAssessment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pod_error: Option<String>,
    pub suspend: bool,
    pub suspension: Option<Decision>,
    pub backfill_floor: Dose,
    pub backfill_set: Vec<Dose>,
    pub backfill_targets: Vec<Dose>,
    pub next_enrollment: Slot,
    pub excluded: Vec<Dose>,
    pub xi: Vec<Option<f64>>,
    pub phi: Option<Vec<f64>>,
}

pub fn decision_bundle(state: &TrialState, cfg: &EngineConfig, cache: &mut FloorCache) -> DecisionBundle {
    let (backfill_decisions, pod_error) = match assess_backfill(state, &cfg.pending) {
        Ok(a) => (a, None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    let xi = cache.screen(state, cfg).xi.clone();
    let phi = final_analysis_posterior(state, cfg).map(|p| p.phi);
    DecisionBundle {
        schema: SCHEMA.to_string(),
        status: state.status,
        clock: state.clock,
        current_main_dose: state.current_main_dose,
        main_decision: state.last_decision.clone(),
        pending_main_decision: main_decision(state).ok().flatten(),
        backfill_decisions,
        pod_error,
        suspend: state.suspension.is_some(),
        suspension: state.suspension.clone(),
        backfill_floor: state.backfill_floor,
        backfill_set: state.backfill_set(),
        backfill_targets: state.backfill_targets(),
        next_enrollment: enrollment_slot(state),
        excluded: (1..=state.num_doses()).filter(|&d| state.is_excluded(d)).collect(),
        xi,
        phi,
    }
}

fn final_analysis_posterior(state: &TrialState, cfg: &EngineConfig) -> Option<ObdPosterior> {
    final_analysis(state, cfg).posterior
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseEstimate {
    pub dose: Dose,
    pub n_enrolled: u32,
    pub n_tox_evaluable: u32,
    pub y: u32,
    pub n_eff_evaluable: u32,
    pub v: u32,
    pub excluded: bool,
    /// Isotonic posterior-mean toxicity; absent without resolved DLT data.
    pub p_hat: Option<f64>,
    pub xi: Option<f64>,
    pub phi: Option<f64>,
    pub post_mean_q: Option<f64>,
    pub insufficient_data: bool,
}

/// Interim or final estimates under "analyze now" semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub schema: String,
    /// False only once enrollment has ended and every outcome is in.
    pub interim: bool,
    pub doses: Vec<DoseEstimate>,
    pub mtd: Option<Dose>,
    pub obd: Option<Dose>,
    pub h_star: Option<Dose>,
    pub ess: Option<Vec<f64>>,
    pub stopped_for_safety: bool,
}

pub fn estimates(state: &TrialState, cfg: &EngineConfig, cache: &mut FloorCache) -> PosteriorSummary {
    let y: Vec<u32> = state.counts.iter().map(|c| c.y).collect();
    let n: Vec<u32> = state.counts.iter().map(|c| c.n_tox_evaluable).collect();
    let iso = isotonic_fit(&y, &n);
    let xi = cache.screen(state, cfg).xi.clone();
    let analysis = final_analysis(state, cfg);
    let post = analysis.posterior.as_ref();
    let doses = state
        .counts
        .iter()
        .enumerate()
        .map(|(i, c)| DoseEstimate {
            dose: i + 1,
            n_enrolled: c.n_enrolled,
            n_tox_evaluable: c.n_tox_evaluable,
            y: c.y,
            n_eff_evaluable: c.n_eff_evaluable,
            v: c.v,
            excluded: c.excluded,
            p_hat: iso.post_means[i],
            xi: xi[i],
            phi: post.map(|p| p.phi[i]),
            post_mean_q: post.map(|p| p.post_mean_q[i]),
            insufficient_data: c.n_tox_evaluable == 0 && c.n_eff_evaluable == 0,
        })
        .collect();
    PosteriorSummary {
        schema: SCHEMA.to_string(),
        interim: !(state.is_terminal() && state.all_resolved()),
        doses,
        mtd: analysis.mtd,
        obd: analysis.obd,
        h_star: post.map(|p| p.h_star),
        ess: post.map(|p| p.ess.clone()),
        stopped_for_safety: state.stopped_safety,
    }
}
