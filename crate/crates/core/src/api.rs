//! JSON documents exchanged with the conduct service. Shared by the server and
//! its clients so both sides agree on one definition.

use serde::{Deserialize, Serialize};

use crate::conduct::{EngineConfig, SCHEMA};
use crate::error::FieldError;
use crate::trial::{DesignParams, DoseGrid, Event, TrialState};

/// Body of `POST /sessions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub grid: DoseGrid,
    #[serde(default)]
    pub params: DesignParams,
    /// Seed of the session's randomized analyses; drawn at random when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// First line of a session's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub schema: String,
    pub session_id: String,
    pub created_unix_ms: u64,
    pub seed: u64,
    pub grid: DoseGrid,
    pub params: DesignParams,
    pub engine: EngineConfig,
}

/// Response of `GET /sessions/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub schema: String,
    pub session_id: String,
    pub created_unix_ms: u64,
    pub updated_unix_ms: u64,
    pub seed: u64,
    pub grid: DoseGrid,
    pub params: DesignParams,
    pub num_events: u64,
    pub state: TrialState,
}

/// One coordinator event. Resubmitting an `event_id` that was already applied is a no-op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSubmission {
    pub time_days: f64,
    #[serde(flatten)]
    pub event: Event,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_id: Option<String>,
}

/// Body of `POST /sessions/{id}/events`. Events are applied in order, all or none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostEvents {
    pub events: Vec<EventSubmission>,
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub schema: String,
    /// Machine-readable error class: `not_found`, `inconsistent_event`, `validation`,
    /// `unauthorized`, or `internal`.
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

impl ErrorBody {
    pub fn new(error: &str, message: impl Into<String>, fields: Vec<FieldError>) -> Self {
        ErrorBody { schema: SCHEMA.to_string(), error: error.to_string(), message: message.into(), fields }
    }
}
