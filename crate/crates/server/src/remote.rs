//! Backend that forwards each generation to an HTTP endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use stepwise_core::tutor::{ModelBackend, PromptBundle, TutorError};

#[derive(Debug, Serialize)]
pub struct RemoteRequest<'a> {
    pub system: &'a str,
    pub context: String,
    pub constraint: String,
}

#[derive(Debug, Deserialize)]
pub struct RemoteResponse {
    pub text: String,
}

/// POSTs `{system, context, constraint}` and expects `{text}` back.
pub struct RemoteBackend {
    url: String,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { url: url.into(), agent }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl ModelBackend for RemoteBackend {
    fn generate(&self, bundle: &PromptBundle, _attempt: usize) -> Result<String, TutorError> {
        let body = RemoteRequest {
            system: &bundle.system.persona,
            context: bundle.render_context(),
            constraint: bundle.constraint(),
        };
        let out: RemoteResponse = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .map_err(|e| TutorError::Backend(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| TutorError::Backend(format!("bad response body: {e}")))?;
        Ok(out.text)
    }
}
