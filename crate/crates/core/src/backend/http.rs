use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{AttemptError, BackendConfig, BackendError, CompletionBackend, CompletionRequest};

/// Client for `POST {endpoint}/v1/completions`.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    model: String,
    token: Option<String>,
}

#[derive(Deserialize)]
struct CompletionsResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        let endpoint = config
            .endpoint
            .as_deref()
            .ok_or_else(|| BackendError::Config("http backend needs an endpoint".into()))?;
        let token = match &config.auth {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("auth environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            url: format!("{}/v1/completions", endpoint.trim_end_matches('/')),
            model: config.model_name.clone(),
            token,
        })
    }
}

fn is_retryable(status: u16) -> bool {
    status == 429 || status >= 500
}

impl CompletionBackend for HttpBackend {
    fn attempt(&self, req: &CompletionRequest) -> Result<String, AttemptError> {
        let body = json!({
            "model": self.model,
            "prompt": req.prompt,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "stop": req.stop,
            "seed": req.seed,
        });
        let mut call = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = match call.send(body.to_string()) {
            Ok(r) => r,
            Err(e) => return Err(AttemptError::Transient(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| AttemptError::Transient(format!("reading response body: {e}")))?;
        if is_retryable(status) {
            return Err(AttemptError::Transient(format!("HTTP {status}: {text}")));
        }
        if !(200..300).contains(&status) {
            return Err(AttemptError::Fatal(BackendError::Rejected { status, message: text }));
        }
        let parsed: CompletionsResponse = serde_json::from_str(&text).map_err(|e| {
            AttemptError::Fatal(BackendError::Rejected {
                status,
                message: format!("unparseable completions response: {e}"),
            })
        })?;
        parsed.choices.into_iter().next().map(|c| c.text).ok_or_else(|| {
            AttemptError::Fatal(BackendError::Rejected {
                status,
                message: "response has no choices".into(),
            })
        })
    }
}
