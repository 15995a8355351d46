//! Record/replay of request/response pairs as JSONL cassettes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, CompletionParams, LlmError, ModelResponse};
use crate::prompt::{PromptBundle, PromptKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteRequest {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_logprobs: u32,
    pub sentence_id: String,
    pub kind: PromptKind,
    pub target: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub key: String,
    pub request: CassetteRequest,
    pub response: ModelResponse,
}

fn request_of(prompt: &PromptBundle, params: &CompletionParams) -> CassetteRequest {
    CassetteRequest {
        model: params.model.clone(),
        temperature: params.temperature,
        max_tokens: params.max_tokens,
        top_logprobs: params.top_logprobs,
        sentence_id: prompt.sentence_id.clone(),
        kind: prompt.kind,
        target: prompt.target(),
        prompt: prompt.text.clone(),
    }
}

/// SHA-256 over everything that determines the model's answer.
pub fn request_key(prompt: &PromptBundle, params: &CompletionParams) -> String {
    let material = serde_json::json!({
        "model": params.model,
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
        "top_logprobs": params.top_logprobs,
        "prompt": prompt.text,
    });
    Sha256::digest(material.to_string().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Wraps a backend and captures every exchange. A request seen before is
/// answered from the capture so the cassette and the run agree.
pub struct Recorder<B> {
    inner: B,
    entries: Mutex<BTreeMap<String, CassetteEntry>>,
}

impl<B: Backend> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Recorder {
            inner,
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("recorder mutex poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the cassette sorted by request key.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LlmError> {
        let entries = self.entries.lock().expect("recorder mutex poisoned");
        let mut out = String::new();
        for entry in entries.values() {
            out.push_str(&serde_json::to_string(entry).expect("cassette entry serializes"));
            out.push('\n');
        }
        fs::write(path.as_ref(), out).map_err(|e| LlmError::Cassette(format!("{}: {e}", path.as_ref().display())))
    }
}

impl<B: Backend> Backend for Recorder<B> {
    fn complete(&self, prompt: &PromptBundle, params: &CompletionParams) -> Result<ModelResponse, LlmError> {
        let key = request_key(prompt, params);
        if let Some(hit) = self.entries.lock().expect("recorder mutex poisoned").get(&key) {
            return Ok(hit.response.clone());
        }
        let response = self.inner.complete(prompt, params)?;
        let mut entries = self.entries.lock().expect("recorder mutex poisoned");
        let entry = entries.entry(key.clone()).or_insert_with(|| CassetteEntry {
            key,
            request: request_of(prompt, params),
            response,
        });
        Ok(entry.response.clone())
    }

    fn describe(&self) -> String {
        format!("record({})", self.inner.describe())
    }
}

/// Answers strictly from a cassette; unknown requests are errors.
#[derive(Debug)]
pub struct ReplayBackend {
    entries: HashMap<String, ModelResponse>,
}

impl ReplayBackend {
    pub fn from_jsonl(text: &str) -> Result<Self, LlmError> {
        let mut entries = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(line)
                .map_err(|e| LlmError::Cassette(format!("line {}: {e}", i + 1)))?;
            entries.insert(entry.key, entry.response);
        }
        Ok(ReplayBackend { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| LlmError::Cassette(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, prompt: &PromptBundle, params: &CompletionParams) -> Result<ModelResponse, LlmError> {
        let key = request_key(prompt, params);
        self.entries
            .get(&key)
            .cloned()
            .ok_or_else(|| LlmError::ReplayMiss(format!("{} {} {}", prompt.sentence_id, prompt.kind.as_str(), prompt.target())))
    }

    fn describe(&self) -> String {
        format!("replay({} entries)", self.entries.len())
    }
}
