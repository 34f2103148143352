//! Bi3+3 dose finding: i3+3 escalation for the main cohort, backfill cohorts at
//! lower doses, probability-of-decision (POD) handling of pending toxicity
//! outcomes, isotonic MTD selection and change-point OBD selection, plus a
//! discrete-event simulator for operating characteristics.
//!
//! Modules:
//! - [`trial`]: domain types and the event-sourced trial state.
//! - [`rules`]: complete-data decisions, safety rules, MTD selection.
//! - [`pod`]: decisions under pending DLT outcomes at backfill doses.
//! - [`efficacy`]: backfill-floor screen and the change-point OBD model.
//! - [`api`]: JSON documents of the conduct service.
//! - [`conduct`]: the decision loop shared by the simulator and live sessions.
//! - [`sim`]: trial simulation and replicate aggregation.
//! - [`report`]: CSV and text renderings of operating characteristics.

// Validation is written as `!(x > 0.0)` on purpose: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod api;
pub mod conduct;
pub mod efficacy;
pub mod error;
pub mod numerics;
pub mod pod;
pub mod report;
pub mod rules;
pub mod sim;
pub mod trial;

pub use conduct::{
    advance, decision_bundle, estimates, final_analysis, DecisionBundle, EngineConfig, FloorCache,
    PosteriorSummary, Slot, SCHEMA,
};
pub use error::{ConductError, ConfigError, TrialError, ValidationError};
pub use sim::{run_batch, simulate_trial, OperatingCharacteristics, Scenario, SimOptions, TrialResult};
pub use trial::{
    Action, Actor, CohortKind, Decision, DecisionSource, DesignParams, Dose, DoseGrid, Event, EventRecord,
    TrialState, TrialStatus,
};
