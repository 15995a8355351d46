//! OpenAI-compatible chat completions client.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{prob_from_logprob, Backend, CompletionParams, InFlightLimit, LlmError, ModelResponse, Usage};
use crate::prompt::PromptBundle;

/// Capped exponential backoff with multiplicative jitter in [0.5, 1.5).
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub factor: f64,
    pub max_delay: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            factor: 2.0,
            max_delay: Duration::from_secs(30),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let raw = self.base_delay.as_secs_f64() * self.factor.powi(retry as i32);
        let scaled = if self.jitter {
            raw * rand::rng().random_range(0.5..1.5)
        } else {
            raw
        };
        Duration::from_secs_f64(scaled.min(self.max_delay.as_secs_f64()))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Base URL such as `http://localhost:8000/v1`; `/chat/completions` is appended
    /// unless already present.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            max_in_flight: 8,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
    logprobs: bool,
    top_logprobs: u32,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct TopLogprob {
    logprob: f64,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

pub struct RemoteBackend {
    url: String,
    config: RemoteConfig,
    agent: ureq::Agent,
    limit: InFlightLimit,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let trimmed = config.endpoint.trim_end_matches('/');
        let url = if trimmed.ends_with("/chat/completions") {
            trimmed.to_string()
        } else {
            format!("{trimmed}/chat/completions")
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteBackend {
            url,
            limit: InFlightLimit::new(config.max_in_flight),
            config,
            agent,
        }
    }

    pub fn in_flight_limit(&self) -> &InFlightLimit {
        &self.limit
    }

    fn attempt(&self, prompt: &PromptBundle, params: &CompletionParams) -> Result<ModelResponse, LlmError> {
        let _slot = self.limit.acquire();
        let body = ChatRequest {
            model: &params.model,
            messages: [ChatMessage {
                role: "user",
                content: &prompt.text,
            }],
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            logprobs: true,
            top_logprobs: params.top_logprobs,
        };
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let started = Instant::now();
        let mut resp = req.send_json(&body).map_err(|e| LlmError::Unreachable {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Protocol(format!("reading body: {e}")))?;
        let latency_ms = started.elapsed().as_millis() as u64;
        if status != 200 {
            let lower = text.to_ascii_lowercase();
            if status == 400
                && (lower.contains("context length") || lower.contains("maximum context") || lower.contains("too many tokens"))
            {
                return Err(LlmError::TokenLimit(text));
            }
            return Err(LlmError::Http { status, body: text });
        }
        let mut parsed = decode_response(&text)?;
        parsed.latency_ms = latency_ms;
        Ok(parsed)
    }
}

/// Decodes a chat completions body into text plus per-position argmax probabilities.
pub fn decode_response(body: &str) -> Result<ModelResponse, LlmError> {
    let wire: ChatResponse =
        serde_json::from_str(body).map_err(|e| LlmError::Protocol(format!("decoding body: {e}")))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| LlmError::Protocol("no choices in response".into()))?;
    if choice.finish_reason.as_deref() == Some("length") {
        return Err(LlmError::TokenLimit("generation stopped at max_tokens".into()));
    }
    let text = choice.message.content.unwrap_or_default();
    let tokens = choice
        .logprobs
        .and_then(|l| l.content)
        .ok_or_else(|| LlmError::MissingLogprobs("choices[0].logprobs.content absent".into()))?;
    if tokens.is_empty() && !text.is_empty() {
        return Err(LlmError::MissingLogprobs("empty logprobs for non-empty text".into()));
    }
    let token_top_probs: Vec<f64> = tokens
        .iter()
        .map(|t| {
            let best = t.top_logprobs.iter().map(|c| c.logprob).fold(t.logprob, f64::max);
            prob_from_logprob(best)
        })
        .collect();
    let usage = wire
        .usage
        .map(|u| Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        })
        .unwrap_or(Usage {
            prompt_tokens: 0,
            completion_tokens: token_top_probs.len() as u64,
        });
    Ok(ModelResponse {
        text,
        token_top_probs,
        usage,
        latency_ms: 0,
        retries: 0,
    })
}

impl Backend for RemoteBackend {
    fn complete(&self, prompt: &PromptBundle, params: &CompletionParams) -> Result<ModelResponse, LlmError> {
        params.validate()?;
        let policy = &self.config.retry;
        let mut retry = 0;
        loop {
            match self.attempt(prompt, params) {
                Ok(mut resp) => {
                    resp.retries = retry;
                    return Ok(resp);
                }
                Err(e) if e.is_transient() && retry < policy.max_retries => {
                    log::warn!("{}: transient failure ({e}), retry {}", self.url, retry + 1);
                    std::thread::sleep(policy.delay(retry));
                    retry += 1;
                }
                Err(e) if e.is_transient() => {
                    return Err(LlmError::Unreachable {
                        attempts: retry + 1,
                        message: e.to_string(),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn describe(&self) -> String {
        format!("openai-compatible({})", self.url)
    }
}
