//! Client for a frozen embedding service.
//!
//! `POST {endpoint}/embed` with `{"frames":[b64...],"reference":b64,"prompt":str}`;
//! the service answers `{"embedding":[f...],"dim":n,"model":str}`. Pooling
//! over the model's hidden states happens on the service side.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{FeatureKey, FeatureRecord, Modality, Provider};
use crate::error::{Error, Result};
use crate::prompting::PromptBundle;

pub const ENDPOINT_ENV: &str = "VISAFF_ENDPOINT";
const MAX_BACKOFF_MS: u64 = 5_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub url: String,
    pub timeout_ms: u64,
    /// Additional attempts after the first one.
    pub max_retries: u32,
    pub backoff_base_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            url: "http://127.0.0.1:8080".into(),
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_base_ms: 200,
        }
    }
}

impl EndpointConfig {
    /// Applies the `VISAFF_ENDPOINT` override when set.
    pub fn with_env_override(mut self) -> Self {
        if let Ok(url) = std::env::var(ENDPOINT_ENV) {
            if !url.is_empty() {
                self.url = url;
            }
        }
        self
    }

    fn embed_url(&self) -> String {
        format!("{}/embed", self.url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub frames: Vec<String>,
    pub reference: String,
    pub prompt: String,
}

impl EmbedRequest {
    pub fn new(frames: &[Vec<u8>], reference: &[u8], prompt: &str) -> Self {
        EmbedRequest {
            frames: frames.iter().map(|f| STANDARD.encode(f)).collect(),
            reference: STANDARD.encode(reference),
            prompt: prompt.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embedding: Vec<f64>,
    pub dim: usize,
    pub model: String,
}

enum Attempt {
    Done(EmbedResponse),
    Retry(String),
    Fail(Error),
}

#[derive(Debug)]
pub struct EmbeddingClient {
    agent: ureq::Agent,
    config: EndpointConfig,
    requests: AtomicUsize,
}

impl EmbeddingClient {
    pub fn new(config: EndpointConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        EmbeddingClient {
            agent,
            config,
            requests: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// HTTP requests issued so far, including retries.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    fn attempt(&self, req: &EmbedRequest) -> Attempt {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut resp = match self.agent.post(&self.config.embed_url()).send_json(req) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("transport: {e}")),
        };
        let status = resp.status().as_u16();
        let body = match resp.body_mut().read_to_string() {
            Ok(b) => b,
            Err(e) => return Attempt::Retry(format!("reading body: {e}")),
        };
        match status {
            200..=299 => match serde_json::from_str::<EmbedResponse>(&body) {
                Ok(r) => Attempt::Done(r),
                Err(e) => Attempt::Fail(Error::Remote(format!("malformed response: {e}"))),
            },
            429 | 500..=599 => Attempt::Retry(format!("HTTP {status}: {body}")),
            _ => Attempt::Fail(Error::Remote(format!("HTTP {status}: {body}"))),
        }
    }

    /// Sends one request, retrying transport errors, 429 and 5xx with
    /// exponential backoff.
    pub fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse> {
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let ms = self
                    .config
                    .backoff_base_ms
                    .saturating_mul(1 << (attempt - 1).min(16))
                    .min(MAX_BACKOFF_MS);
                thread::sleep(Duration::from_millis(ms));
            }
            match self.attempt(req) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(Error::Remote(format!(
            "giving up after {} attempts: {last}",
            self.config.max_retries + 1
        )))
    }
}

/// Requests the visual embedding for one prompt bundle.
///
/// `expected_dim` is the dimension of the destination cache, when one exists.
pub fn extract_remote(
    bundle: &PromptBundle,
    frames: &[Vec<u8>],
    reference: &[u8],
    client: &EmbeddingClient,
    expected_dim: Option<usize>,
) -> Result<FeatureRecord> {
    if frames.is_empty() {
        return Err(Error::invalid(format!(
            "no frames for ({}, {})",
            bundle.conv_id, bundle.index
        )));
    }
    let resp = client.embed(&EmbedRequest::new(frames, reference, &bundle.composed))?;
    if resp.embedding.len() != resp.dim {
        return Err(Error::Remote(format!(
            "service declared dim {} but sent {} values",
            resp.dim,
            resp.embedding.len()
        )));
    }
    if let Some(expected) = expected_dim {
        if resp.dim != expected {
            return Err(Error::DimMismatch {
                expected,
                found: resp.dim,
            });
        }
    }
    let vector: Vec<f32> = resp.embedding.iter().map(|&v| v as f32).collect();
    let key = FeatureKey::new(
        &bundle.conv_id,
        bundle.index,
        Modality::Visual,
        Provider::Remote.as_str(),
    );
    FeatureRecord::new(key, vector, Provider::Remote, false)
}
