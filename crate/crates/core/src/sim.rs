//! Discrete-event simulation of Bi3+3 trials and replicate-level operating characteristics.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conduct::{enrollment_slot, next_engine_event, final_analysis, refresh_floor, EngineConfig, FloorCache, Slot};
use crate::error::{ConductError, ConfigError, FieldError, PodError, ValidationError};
use crate::numerics::{derive_seed, CompensatedSum};
use crate::trial::{Actor, CohortKind, DesignParams, Dose, DoseGrid, Event, EventRecord, TrialState};

fn default_arrival_mean() -> f64 {
    10.0
}
fn default_window() -> f64 {
    28.0
}
fn default_lag() -> f64 {
    90.0
}

/// True dose-toxicity and dose-efficacy curves plus timing assumptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub tox_probs: Vec<f64>,
    pub eff_probs: Vec<f64>,
    #[serde(default = "default_arrival_mean")]
    pub arrival_mean_days: f64,
    #[serde(default = "default_window")]
    pub dlt_window_days: f64,
    #[serde(default = "default_lag")]
    pub efficacy_lag_days: f64,
}

impl Scenario {
    pub fn num_doses(&self) -> usize {
        self.tox_probs.len()
    }

    /// Validate the scenario; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>, ValidationError> {
        let mut errs = Vec::new();
        let mut push = |field: &str, message: String| errs.push(FieldError { field: field.into(), message });
        if self.tox_probs.len() < 2 {
            push("tox_probs", "at least two doses are required".into());
        }
        if self.eff_probs.len() != self.tox_probs.len() {
            push("eff_probs", format!("expected {} values, got {}", self.tox_probs.len(), self.eff_probs.len()));
        }
        for (field, probs) in [("tox_probs", &self.tox_probs), ("eff_probs", &self.eff_probs)] {
            if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                push(field, "probabilities must lie in [0, 1]".into());
            }
        }
        for (field, v) in [
            ("arrival_mean_days", self.arrival_mean_days),
            ("dlt_window_days", self.dlt_window_days),
            ("efficacy_lag_days", self.efficacy_lag_days),
        ] {
            if !(v > 0.0) {
                push(field, "must be positive".into());
            }
        }
        if !errs.is_empty() {
            return Err(ValidationError(errs));
        }
        let mut warnings = Vec::new();
        if self.tox_probs.windows(2).any(|w| w[1] < w[0]) {
            let msg = format!("scenario {:?}: toxicity probabilities are not monotone in dose", self.name);
            tracing::warn!("{msg}");
            warnings.push(msg);
        }
        Ok(warnings)
    }

    /// Design parameters with the scenario's window and lag carried over.
    pub fn align(&self, params: &DesignParams) -> DesignParams {
        DesignParams {
            dlt_window_days: self.dlt_window_days,
            efficacy_lag_days: self.efficacy_lag_days,
            ..params.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrivals {
    /// Exponential inter-arrival times with the scenario's mean.
    #[default]
    Exponential,
    /// Each main cohort arrives all at once when it opens; nobody else arrives.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DltTiming {
    /// Time to DLT uniform over the window.
    #[default]
    Uniform,
    /// Every DLT is observed at the end of the window.
    WindowEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    pub arrivals: Arrivals,
    pub dlt_timing: DltTiming,
    pub backfill: bool,
    pub engine: EngineConfig,
    /// Keep the full event log in each result.
    pub record_log: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            arrivals: Arrivals::Exponential,
            dlt_timing: DltTiming::Uniform,
            backfill: true,
            engine: EngineConfig::default(),
            record_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub selected_mtd: Option<Dose>,
    pub selected_obd: Option<Dose>,
    pub n_enrolled: Vec<u32>,
    pub n_backfill: Vec<u32>,
    pub y: Vec<u32>,
    pub v: Vec<u32>,
    /// Last DLT-window closure, measured from the first enrollment.
    pub duration_days: f64,
    /// Last efficacy readout or window closure, whichever is later.
    pub duration_with_efficacy_days: f64,
    pub stopped_early: bool,
    /// Posterior mean response rate per dose; `None` without efficacy data.
    pub efficacy_estimates: Option<Vec<f64>>,
    /// Dose of every main cohort in order.
    pub main_path: Vec<Dose>,
    pub suspensions: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<Vec<EventRecord>>,
}

impl TrialResult {
    pub fn total_enrolled(&self) -> u32 {
        self.n_enrolled.iter().sum()
    }
}

/// Common random numbers for the k-th arriving patient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatientUniforms {
    pub u_tox: f64,
    pub u_time: f64,
    pub u_eff: f64,
    pub u_alloc: f64,
}

fn unit(seed: u64, parts: &[u64]) -> f64 {
    (derive_seed(seed, parts) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

const STREAM_PATIENT: u64 = 0x5041_5449;
const STREAM_ARRIVAL: u64 = 0x4152_5256;

pub fn patient_uniforms(seed: u64, k: u64) -> PatientUniforms {
    PatientUniforms {
        u_tox: unit(seed, &[STREAM_PATIENT, k, 0]),
        u_time: unit(seed, &[STREAM_PATIENT, k, 1]),
        u_eff: unit(seed, &[STREAM_PATIENT, k, 2]),
        u_alloc: unit(seed, &[STREAM_PATIENT, k, 3]),
    }
}

/// Standard exponential gap before the k-th arrival (k ≥ 1); scale by the mean.
pub fn arrival_gap(seed: u64, k: u64) -> f64 {
    -(1.0 - unit(seed, &[STREAM_ARRIVAL, k])).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pending {
    Dlt { patient: u32, dlt: bool },
    Efficacy { patient: u32, response: bool },
}

#[derive(Debug, Clone, Copy)]
struct Scheduled {
    time: f64,
    order: u64,
    what: Pending,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Min-heap on (time, order).
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.order.cmp(&self.order))
    }
}

struct Sim<'a> {
    scenario: &'a Scenario,
    options: &'a SimOptions,
    engine: EngineConfig,
    seed: u64,
    state: TrialState,
    cache: FloorCache,
    queue: BinaryHeap<Scheduled>,
    order: u64,
    waiting: VecDeque<u32>,
    next_patient: u32,
    next_arrival: f64,
    log: Vec<EventRecord>,
    main_path: Vec<Dose>,
    suspensions: u32,
}

impl Sim<'_> {
    fn push(&mut self, time: f64, event: Event) {
        let rec = self
            .state
            .push(time, event, Actor::Simulator)
            .unwrap_or_else(|e| panic!("simulator produced an invalid event: {e}"));
        if self.options.record_log {
            self.log.push(rec);
        }
    }

    fn step_engine(&mut self) {
        loop {
            match next_engine_event(&self.state, &self.engine, &mut self.cache, false) {
                Ok(Some(ev)) => {
                    let rec = self
                        .state
                        .push(self.state.clock, ev, Actor::Engine)
                        .unwrap_or_else(|e| panic!("engine produced an invalid event: {e}"));
                    self.note_engine(vec![rec]);
                }
                Ok(None) => return,
                // Too many pending outcomes to enumerate: hold until some resolve.
                Err(ConductError::Pod(PodError::TooManyPending { .. })) => return,
                Err(e) => panic!("engine failed during simulation: {e}"),
            }
        }
    }

    fn note_engine(&mut self, recs: Vec<EventRecord>) {
        for rec in recs {
            match &rec.event {
                Event::MainCohortOpened { dose, .. } => self.main_path.push(*dose),
                Event::Suspended { .. } => self.suspensions += 1,
                _ => {}
            }
            if self.options.record_log {
                self.log.push(rec);
            }
        }
    }

    fn schedule(&mut self, time: f64, what: Pending) {
        self.order += 1;
        self.queue.push(Scheduled { time, order: self.order, what });
    }

    fn enroll(&mut self, patient: u32, dose: Dose, cohort: CohortKind) {
        let t = self.state.clock;
        self.push(t, Event::Enroll { patient, dose, cohort });
        let u = patient_uniforms(self.seed, patient as u64);
        let window = self.scenario.dlt_window_days;
        let dlt = u.u_tox < self.scenario.tox_probs[dose - 1];
        let resolve = match (dlt, self.options.dlt_timing) {
            (true, DltTiming::Uniform) => t + u.u_time * window,
            _ => t + window,
        };
        self.schedule(resolve, Pending::Dlt { patient, dlt });
        let response = u.u_eff < self.scenario.eff_probs[dose - 1];
        self.schedule(t + self.scenario.efficacy_lag_days, Pending::Efficacy { patient, response });
        self.step_engine();
    }

    /// Dose waiting patients for as long as the design allows.
    fn dose_waiting(&mut self) {
        loop {
            let mut slot = enrollment_slot(&self.state);
            if matches!(slot, Slot::Backfill { .. }) {
                if !self.options.backfill {
                    return;
                }
                if let Some(ev) = refresh_floor(&self.state, &self.engine, &mut self.cache) {
                    let rec = self.state.push(self.state.clock, ev, Actor::Engine).expect("floor event is valid");
                    self.note_engine(vec![rec]);
                    slot = enrollment_slot(&self.state);
                }
            }
            if self.options.arrivals == Arrivals::Batch {
                // Only main-cohort patients ever arrive, exactly when needed.
                let Slot::Main { dose } = slot else { return };
                let id = self.next_patient;
                self.next_patient += 1;
                self.enroll(id, dose, CohortKind::Main);
                continue;
            }
            let Some(&patient) = self.waiting.front() else { return };
            match slot {
                Slot::Main { dose } => self.enroll(patient, dose, CohortKind::Main),
                Slot::Backfill { doses } if self.options.backfill => {
                    let u = patient_uniforms(self.seed, patient as u64).u_alloc;
                    let i = ((u * doses.len() as f64) as usize).min(doses.len() - 1);
                    self.enroll(patient, doses[i], CohortKind::Backfill);
                }
                _ => return,
            }
            self.waiting.pop_front();
        }
    }

    fn run(mut self) -> TrialResult {
        let mut guard = 0u64;
        loop {
            guard += 1;
            assert!(guard < 10_000_000, "simulation failed to terminate");
            self.dose_waiting();
            let next_outcome = self.queue.peek().map(|s| s.time);
            let arrivals_open = self.options.arrivals == Arrivals::Exponential && !self.state.is_terminal();
            let take_arrival = match (arrivals_open, next_outcome) {
                (false, None) => break,
                (true, None) => true,
                (false, Some(_)) => false,
                (true, Some(t)) => self.next_arrival < t,
            };
            if take_arrival {
                let t = self.next_arrival;
                let id = self.next_patient;
                self.next_patient += 1;
                self.next_arrival = t + arrival_gap(self.seed, id as u64 + 1) * self.scenario.arrival_mean_days;
                self.waiting.push_back(id);
                if t > self.state.clock {
                    self.push(t, Event::ClockAdvance {});
                }
                self.step_engine();
            } else {
                let s = self.queue.pop().expect("peeked");
                let event = match s.what {
                    Pending::Dlt { patient, dlt } => Event::DltResolved { patient, dlt },
                    Pending::Efficacy { patient, response } => Event::EfficacyResolved { patient, response },
                };
                self.push(s.time, event);
                self.step_engine();
            }
        }
        self.finish()
    }

    fn finish(self) -> TrialResult {
        let analysis = final_analysis(&self.state, &self.engine);
        let window = self.scenario.dlt_window_days;
        let lag = self.scenario.efficacy_lag_days;
        let last_enroll = self.state.patients.iter().map(|p| p.enroll_time).fold(0.0, f64::max);
        let c = &self.state.counts;
        TrialResult {
            selected_mtd: analysis.mtd,
            selected_obd: analysis.obd,
            n_enrolled: c.iter().map(|c| c.n_enrolled).collect(),
            n_backfill: c.iter().map(|c| c.n_backfill).collect(),
            y: c.iter().map(|c| c.y).collect(),
            v: c.iter().map(|c| c.v).collect(),
            duration_days: last_enroll + window,
            duration_with_efficacy_days: last_enroll + window.max(lag),
            stopped_early: self.state.stopped_safety,
            efficacy_estimates: analysis.posterior.map(|p| p.post_mean_q),
            main_path: self.main_path,
            suspensions: self.suspensions,
            log: self.options.record_log.then_some(self.log),
        }
    }
}

/// Simulate one trial. The scenario's window and lag override those in `params`.
pub fn simulate_trial(
    scenario: &Scenario,
    params: &DesignParams,
    options: &SimOptions,
    seed: u64,
) -> Result<TrialResult, ConfigError> {
    scenario.validate()?;
    let params = scenario.align(params);
    let state = TrialState::new(DoseGrid::new(scenario.num_doses()), params)?;
    options.engine.validate()?;
    let mut engine = options.engine.clone();
    engine.reseed(derive_seed(seed, &[0x0045_4E47]));
    let sim = Sim {
        scenario,
        options,
        engine,
        seed,
        state,
        cache: FloorCache::default(),
        queue: BinaryHeap::new(),
        order: 0,
        waiting: VecDeque::new(),
        next_patient: 0,
        next_arrival: 0.0,
        log: Vec::new(),
        main_path: vec![1],
        suspensions: 0,
    };
    Ok(sim.run())
}

/// Replicate-averaged operating characteristics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingCharacteristics {
    pub scenario: String,
    pub replicates: usize,
    pub num_doses: usize,
    /// Percent of replicates selecting each dose as OBD.
    pub obd_pct: Vec<f64>,
    pub obd_none_pct: f64,
    pub mtd_pct: Vec<f64>,
    pub mtd_none_pct: f64,
    /// Mean posterior response rate per dose over replicates with efficacy data.
    pub mean_efficacy: Vec<f64>,
    pub mean_enrolled: Vec<f64>,
    pub mean_backfill: Vec<f64>,
    pub mean_total_n: f64,
    pub mean_duration_days: f64,
    pub mean_duration_with_efficacy_days: f64,
    pub early_stop_pct: f64,
    pub mean_suspensions: f64,
}

fn mean(sum: CompensatedSum, n: usize) -> f64 {
    if n == 0 { 0.0 } else { sum.value() / n as f64 }
}

/// Aggregate results in index order.
pub fn aggregate(name: &str, num_doses: usize, results: &[TrialResult]) -> OperatingCharacteristics {
    let r = results.len();
    let mut obd = vec![0usize; num_doses];
    let mut mtd = vec![0usize; num_doses];
    let (mut obd_none, mut mtd_none, mut stops) = (0usize, 0usize, 0usize);
    let mut eff = vec![CompensatedSum::default(); num_doses];
    let mut eff_n = 0usize;
    let mut enrolled = vec![CompensatedSum::default(); num_doses];
    let mut backfill = vec![CompensatedSum::default(); num_doses];
    let (mut total, mut dur, mut dur_e, mut susp) = Default::default();
    let add = |s: &mut CompensatedSum, x: f64| s.add(x);
    for t in results {
        match t.selected_obd {
            Some(d) => obd[d - 1] += 1,
            None => obd_none += 1,
        }
        match t.selected_mtd {
            Some(d) => mtd[d - 1] += 1,
            None => mtd_none += 1,
        }
        if t.stopped_early {
            stops += 1;
        }
        if let Some(q) = &t.efficacy_estimates {
            eff_n += 1;
            for (s, x) in eff.iter_mut().zip(q) {
                s.add(*x);
            }
        }
        for d in 0..num_doses {
            enrolled[d].add(t.n_enrolled[d] as f64);
            backfill[d].add(t.n_backfill[d] as f64);
        }
        add(&mut total, t.total_enrolled() as f64);
        add(&mut dur, t.duration_days);
        add(&mut dur_e, t.duration_with_efficacy_days);
        add(&mut susp, t.suspensions as f64);
    }
    let pct = |c: usize| if r == 0 { 0.0 } else { 100.0 * c as f64 / r as f64 };
    OperatingCharacteristics {
        scenario: name.to_string(),
        replicates: r,
        num_doses,
        obd_pct: obd.iter().map(|&c| pct(c)).collect(),
        obd_none_pct: pct(obd_none),
        mtd_pct: mtd.iter().map(|&c| pct(c)).collect(),
        mtd_none_pct: pct(mtd_none),
        mean_efficacy: eff.into_iter().map(|s| mean(s, eff_n)).collect(),
        mean_enrolled: enrolled.into_iter().map(|s| mean(s, r)).collect(),
        mean_backfill: backfill.into_iter().map(|s| mean(s, r)).collect(),
        mean_total_n: mean(total, r),
        mean_duration_days: mean(dur, r),
        mean_duration_with_efficacy_days: mean(dur_e, r),
        early_stop_pct: pct(stops),
        mean_suspensions: mean(susp, r),
    }
}

/// Seed of replicate `index` under `base_seed`.
pub fn replicate_seed(base_seed: u64, index: usize) -> u64 {
    derive_seed(base_seed, &[index as u64])
}

/// Simulate `replicates` trials, optionally on a pool of `threads` workers.
/// Results are in replicate order and do not depend on the thread count.
pub fn simulate_replicates(
    scenario: &Scenario,
    params: &DesignParams,
    options: &SimOptions,
    replicates: usize,
    base_seed: u64,
    threads: Option<usize>,
) -> Result<Vec<TrialResult>, ConfigError> {
    if replicates == 0 {
        return Err(ValidationError::single("replicates", "must be at least 1").into());
    }
    // Surface configuration errors once, before fanning out.
    scenario.validate()?;
    let aligned = scenario.align(params);
    aligned.validate(scenario.num_doses())?;
    options.engine.validate()?;
    let run = || {
        (0..replicates)
            .into_par_iter()
            .map(|i| simulate_trial(scenario, params, options, replicate_seed(base_seed, i)))
            .collect::<Result<Vec<_>, _>>()
    };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| ConfigError::Scenario(format!("cannot start worker pool: {e}")))?
            .install(run),
        None => run(),
    }
}

pub fn run_batch(
    scenario: &Scenario,
    params: &DesignParams,
    replicates: usize,
    base_seed: u64,
) -> Result<OperatingCharacteristics, ConfigError> {
    run_batch_with(scenario, params, &SimOptions::default(), replicates, base_seed, None)
}

pub fn run_batch_with(
    scenario: &Scenario,
    params: &DesignParams,
    options: &SimOptions,
    replicates: usize,
    base_seed: u64,
    threads: Option<usize>,
) -> Result<OperatingCharacteristics, ConfigError> {
    let results = simulate_replicates(scenario, params, options, replicates, base_seed, threads)?;
    Ok(aggregate(&scenario.name, scenario.num_doses(), &results))
}

/// Batch configuration document: a scenario plus run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    #[serde(flatten)]
    pub scenario: Scenario,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub design_params: DesignParams,
    #[serde(default)]
    pub options: SimOptions,
}

fn default_replicates() -> usize {
    1000
}

impl BatchConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: BatchConfig = serde_json::from_str(text)?;
        cfg.scenario.validate()?;
        cfg.scenario.align(&cfg.design_params).validate(cfg.scenario.num_doses())?;
        cfg.options.engine.validate()?;
        Ok(cfg)
    }
}
