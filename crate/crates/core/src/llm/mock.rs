use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, CompletionParams, LlmError, ModelResponse};
use crate::prompt::{PromptBundle, PromptKind};

/// Identifies a call by sentence, prompt kind and target
/// (`g<index>`, `all`, or a relation name; see [`PromptBundle::target`]).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MockKey {
    pub sentence_id: String,
    pub kind: PromptKind,
    pub target: String,
}

impl MockKey {
    pub fn new(sentence_id: impl Into<String>, kind: PromptKind, target: impl Into<String>) -> Self {
        MockKey {
            sentence_id: sentence_id.into(),
            kind,
            target: target.into(),
        }
    }

    pub fn of(prompt: &PromptBundle) -> Self {
        MockKey::new(prompt.sentence_id.clone(), prompt.kind, prompt.target())
    }
}

impl fmt::Display for MockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.sentence_id, self.kind.as_str(), self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockReply {
    pub text: String,
    pub token_top_probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScriptLine {
    #[serde(flatten)]
    key: MockKey,
    #[serde(flatten)]
    reply: MockReply,
}

/// Scripted backend. Unscripted calls are hard errors.
#[derive(Debug)]
pub struct MockBackend {
    script: HashMap<MockKey, MockReply>,
    calls: Mutex<Vec<MockKey>>,
}

impl MockBackend {
    pub fn new(entries: impl IntoIterator<Item = (MockKey, MockReply)>) -> Result<Self, LlmError> {
        let mut script = HashMap::new();
        for (key, reply) in entries {
            if script.contains_key(&key) {
                return Err(LlmError::DuplicateScriptKey(key));
            }
            script.insert(key, reply);
        }
        Ok(MockBackend {
            script,
            calls: Mutex::new(Vec::new()),
        })
    }

    /// Parses a JSONL script: `{"sentence_id", "kind", "target", "text", "token_top_probs"}` per line.
    pub fn from_jsonl(text: &str) -> Result<Self, LlmError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ScriptLine = serde_json::from_str(line)
                .map_err(|e| LlmError::Cassette(format!("script line {}: {e}", i + 1)))?;
            entries.push((parsed.key, parsed.reply));
        }
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| LlmError::Cassette(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    /// Serializes a script in the format [`MockBackend::from_jsonl`] reads, sorted by key.
    pub fn script_to_jsonl(entries: &[(MockKey, MockReply)]) -> String {
        let mut sorted: Vec<&(MockKey, MockReply)> = entries.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut out = String::new();
        for (key, reply) in sorted {
            let line = ScriptLine {
                key: key.clone(),
                reply: reply.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("script serializes"));
            out.push('\n');
        }
        out
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("mock mutex poisoned").len()
    }

    pub fn calls(&self) -> Vec<MockKey> {
        self.calls.lock().expect("mock mutex poisoned").clone()
    }
}

impl Backend for MockBackend {
    fn complete(&self, prompt: &PromptBundle, _params: &CompletionParams) -> Result<ModelResponse, LlmError> {
        let key = MockKey::of(prompt);
        let mut calls = self.calls.lock().expect("mock mutex poisoned");
        let reply = self
            .script
            .get(&key)
            .ok_or_else(|| LlmError::Unscripted(key.clone()))?;
        calls.push(key);
        let resp = ModelResponse::new(reply.text.clone(), reply.token_top_probs.clone());
        resp.validate()?;
        Ok(resp)
    }

    fn describe(&self) -> String {
        format!("mock({} entries)", self.script.len())
    }
}
