//! JSON-over-HTTP model backends.
//!
//! Text models take `{"prompt": ...}` and answer `{"completion": ...}`; the
//! click scorer takes `{"query": ..., "guidance": ...}` and answers
//! `{"probability": ...}`.

use std::time::Duration;

use proguide_core::backend::{BackendError, TextBackend};
use proguide_core::click::ClickScorer;
use serde::{Deserialize, Serialize};

#[derive(Serialize)]
struct PromptBody<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct CompletionBody {
    completion: String,
}

#[derive(Serialize)]
struct ClickBody<'a> {
    query: &'a str,
    guidance: &'a str,
}

#[derive(Deserialize)]
struct ProbabilityBody {
    probability: f64,
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .new_agent()
}

fn map_err(e: ureq::Error, timeout: Duration) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout(timeout),
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => BackendError::Timeout(timeout),
        ureq::Error::StatusCode(code) => BackendError::Transport(format!("HTTP status {code}")),
        other => BackendError::Transport(other.to_string()),
    }
}

fn post<B: Serialize, R: for<'de> Deserialize<'de>>(
    agent: &ureq::Agent,
    url: &str,
    body: &B,
    timeout: Duration,
) -> Result<R, BackendError> {
    let mut resp = agent.post(url).send_json(body).map_err(|e| map_err(e, timeout))?;
    resp.body_mut()
        .read_json::<R>()
        .map_err(|e| BackendError::Malformed(e.to_string()))
}

pub struct HttpTextBackend {
    url: String,
    timeout: Duration,
    agent: ureq::Agent,
}

impl HttpTextBackend {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            timeout,
            agent: agent(timeout),
        }
    }
}

impl TextBackend for HttpTextBackend {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let body: CompletionBody = post(&self.agent, &self.url, &PromptBody { prompt }, self.timeout)?;
        Ok(body.completion)
    }
}

pub struct HttpClickScorer {
    url: String,
    timeout: Duration,
    agent: ureq::Agent,
}

impl HttpClickScorer {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            timeout,
            agent: agent(timeout),
        }
    }
}

impl ClickScorer for HttpClickScorer {
    fn probability(&self, query: &str, guidance: &str) -> Result<f64, BackendError> {
        let body: ProbabilityBody = post(&self.agent, &self.url, &ClickBody { query, guidance }, self.timeout)?;
        if !(0.0..=1.0).contains(&body.probability) {
            return Err(BackendError::Malformed(format!(
                "probability {} outside [0, 1]",
                body.probability
            )));
        }
        Ok(body.probability)
    }
}
