//! Completion backends.
//!
//! Every backend returns the generated text together with, for each
//! generated position, the probability of the most likely token there. The
//! remote backend speaks the OpenAI-compatible chat completions protocol and
//! derives those probabilities from `top_logprobs`; the mock answers from a
//! fixed script; the cassette backends record and replay wire traffic.

mod cassette;
mod limit;
mod mock;
mod remote;

pub use cassette::{CassetteEntry, Recorder, ReplayBackend};
pub use limit::{InFlightGuard, InFlightLimit};
pub use mock::{MockBackend, MockKey, MockReply};
pub use remote::{decode_response, RemoteBackend, RemoteConfig, RetryPolicy};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::PromptBundle;

pub const DEFAULT_TEMPERATURE: f64 = 0.6;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("endpoint unreachable after {attempts} attempts: {message}")]
    Unreachable { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("response lacks per-token log-probabilities; the server must support `logprobs`/`top_logprobs` ({0})")]
    MissingLogprobs(String),
    #[error("token limit exceeded: {0}")]
    TokenLimit(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("no scripted reply for {0}")]
    Unscripted(MockKey),
    #[error("duplicate script key {0}")]
    DuplicateScriptKey(MockKey),
    #[error("cassette has no recorded response for request {0}")]
    ReplayMiss(String),
    #[error("cassette: {0}")]
    Cassette(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

impl LlmError {
    /// Worth retrying: connection failures, 429 and 5xx.
    pub fn is_transient(&self) -> bool {
        match self {
            LlmError::Unreachable { .. } => true,
            LlmError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_logprobs: u32,
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams {
            model: "default".to_string(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: 256,
            top_logprobs: 1,
        }
    }
}

impl CompletionParams {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0) {
            return Err(LlmError::InvalidParams(format!("temperature {} < 0", self.temperature)));
        }
        if self.top_logprobs < 1 {
            return Err(LlmError::InvalidParams("top_logprobs must be >= 1".into()));
        }
        if self.max_tokens < 1 {
            return Err(LlmError::InvalidParams("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    /// Probability of the argmax token at each generated position, in (0, 1].
    pub token_top_probs: Vec<f64>,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub retries: u32,
}

impl ModelResponse {
    pub fn new(text: impl Into<String>, token_top_probs: Vec<f64>) -> Self {
        let completion_tokens = token_top_probs.len() as u64;
        ModelResponse {
            text: text.into(),
            token_top_probs,
            usage: Usage {
                prompt_tokens: 0,
                completion_tokens,
            },
            latency_ms: 0,
            retries: 0,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if let Some(p) = self
            .token_top_probs
            .iter()
            .find(|p| !(**p > 0.0 && **p <= 1.0))
        {
            return Err(LlmError::Protocol(format!("token probability {p} outside (0, 1]")));
        }
        Ok(())
    }
}

/// `exp(logprob)` clamped into (0, 1].
pub fn prob_from_logprob(logprob: f64) -> f64 {
    logprob.exp().clamp(f64::MIN_POSITIVE, 1.0)
}

/// A completion backend. Implementations are shared across worker threads.
pub trait Backend: Send + Sync {
    fn complete(&self, prompt: &PromptBundle, params: &CompletionParams) -> Result<ModelResponse, LlmError>;

    /// Short identifier used in logs and provenance.
    fn describe(&self) -> String;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, prompt: &PromptBundle, params: &CompletionParams) -> Result<ModelResponse, LlmError> {
        (**self).complete(prompt, params)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, prompt: &PromptBundle, params: &CompletionParams) -> Result<ModelResponse, LlmError> {
        (**self).complete(prompt, params)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}
