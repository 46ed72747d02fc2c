//! Per-request computation behind a service.

use std::thread;
use std::time::Duration;

use pilot_serve_core::BackendSpec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reply body of the scripted backend.
pub const SCRIPTED_TOKENS: &str = "tok tok tok tok";

#[derive(Debug, Error)]
#[error("{0}")]
pub struct BackendError(pub String);

pub trait Backend: Send {
    /// One-time model load; runs before the endpoint is published.
    fn init(&mut self) -> Result<(), BackendError> {
        Ok(())
    }

    fn infer(&mut self, payload: &str) -> Result<String, BackendError>;
}

pub struct Noop;

impl Backend for Noop {
    fn infer(&mut self, _payload: &str) -> Result<String, BackendError> {
        Ok(String::new())
    }
}

pub struct Echo;

impl Backend for Echo {
    fn infer(&mut self, payload: &str) -> Result<String, BackendError> {
        Ok(payload.to_string())
    }
}

pub struct Scripted {
    init_delay: Duration,
    infer_delay: Duration,
}

impl Backend for Scripted {
    fn init(&mut self) -> Result<(), BackendError> {
        thread::sleep(self.init_delay);
        Ok(())
    }

    fn infer(&mut self, _payload: &str) -> Result<String, BackendError> {
        if !self.infer_delay.is_zero() {
            thread::sleep(self.infer_delay);
        }
        Ok(SCRIPTED_TOKENS.to_string())
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    stream: bool,
}

#[derive(Deserialize)]
struct GenerateResponse {
    response: String,
}

/// Forwards payloads as `POST <base_url>/api/generate {model, prompt}` and
/// returns the `response` field of the reply.
pub struct HttpProxy {
    url: String,
    model: String,
    agent: ureq::Agent,
}

impl HttpProxy {
    pub fn new(base_url: &str, model: &str) -> Self {
        Self {
            url: format!("{}/api/generate", base_url.trim_end_matches('/')),
            model: model.to_string(),
            agent: ureq::AgentBuilder::new()
                .timeout_connect(Duration::from_secs(5))
                .timeout(Duration::from_secs(300))
                .build(),
        }
    }
}

impl Backend for HttpProxy {
    fn infer(&mut self, payload: &str) -> Result<String, BackendError> {
        let body = GenerateRequest {
            model: &self.model,
            prompt: payload,
            stream: false,
        };
        let resp = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .map_err(|e| BackendError(format!("{}: {e}", self.url)))?;
        let parsed: GenerateResponse = resp
            .into_json()
            .map_err(|e| BackendError(format!("bad completion body: {e}")))?;
        Ok(parsed.response)
    }
}

pub fn build(spec: &BackendSpec) -> Box<dyn Backend> {
    match spec {
        BackendSpec::Noop => Box::new(Noop),
        BackendSpec::Echo => Box::new(Echo),
        BackendSpec::Scripted {
            init_delay,
            infer_delay,
        } => Box::new(Scripted {
            init_delay: *init_delay,
            infer_delay: *infer_delay,
        }),
        BackendSpec::HttpProxy {
            base_url,
            model_name,
        } => Box::new(HttpProxy::new(base_url, model_name)),
    }
}
