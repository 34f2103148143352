//! Thin async client for the conduct service. Every method maps to one route
//! and returns the server's document unchanged; no decisions are computed here.

use bi33_core::api::{CreateSession, ErrorBody, EventSubmission, PostEvents, SessionView};
use bi33_core::conduct::{DecisionBundle, PosteriorSummary};
use reqwest::{RequestBuilder, Response, StatusCode};
use serde::de::DeserializeOwned;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server answered {status}: {} ({})", .body.message, .body.error)]
    Api { status: StatusCode, body: ErrorBody },
    #[error("server answered {status} with an unreadable body: {text}")]
    Unexpected { status: StatusCode, text: String },
}

impl ClientError {
    /// HTTP status of an error answered by the server.
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } | ClientError::Unexpected { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    token: Option<String>,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Client {
        Client { base: base.into().trim_end_matches('/').to_string(), token: None, http: reqwest::Client::new() }
    }

    pub fn with_token(mut self, token: Option<String>) -> Client {
        self.token = token;
        self
    }

    fn request(&self, method: reqwest::Method, path: &str) -> RequestBuilder {
        let req = self.http.request(method, format!("{}{path}", self.base));
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    async fn checked(resp: Response) -> Result<Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await?;
        Err(match serde_json::from_str::<ErrorBody>(&text) {
            Ok(body) => ClientError::Api { status, body },
            Err(_) => ClientError::Unexpected { status, text },
        })
    }

    async fn json<T: DeserializeOwned>(req: RequestBuilder) -> Result<T, ClientError> {
        Ok(Self::checked(req.send().await?).await?.json().await?)
    }

    pub async fn create_session(&self, req: &CreateSession) -> Result<SessionView, ClientError> {
        Self::json(self.request(reqwest::Method::POST, "/sessions").json(req)).await
    }

    pub async fn session(&self, id: &str) -> Result<SessionView, ClientError> {
        Self::json(self.request(reqwest::Method::GET, &format!("/sessions/{id}"))).await
    }

    pub async fn post_events(&self, id: &str, events: Vec<EventSubmission>) -> Result<DecisionBundle, ClientError> {
        let body = PostEvents { events };
        Self::json(self.request(reqwest::Method::POST, &format!("/sessions/{id}/events")).json(&body)).await
    }

    pub async fn decision(&self, id: &str) -> Result<DecisionBundle, ClientError> {
        Self::json(self.request(reqwest::Method::GET, &format!("/sessions/{id}/decision"))).await
    }

    pub async fn estimates(&self, id: &str) -> Result<PosteriorSummary, ClientError> {
        Self::json(self.request(reqwest::Method::GET, &format!("/sessions/{id}/estimates"))).await
    }

    /// The session's event log as NDJSON (header line first).
    pub async fn export(&self, id: &str) -> Result<String, ClientError> {
        let resp = self.request(reqwest::Method::GET, &format!("/sessions/{id}/export")).send().await?;
        Ok(Self::checked(resp).await?.text().await?)
    }
}
