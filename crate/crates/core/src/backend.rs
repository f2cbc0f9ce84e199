//! Pluggable text-completion backends (goal tracker, answerer, teacher) and
//! deterministic in-process stand-ins.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend timed out after {0:?}")]
    Timeout(Duration),
    #[error("no fixture response for prompt key {0}")]
    MissingFixture(String),
    #[error("malformed backend reply: {0}")]
    Malformed(String),
}

/// Prompt in, completion out.
pub trait TextBackend: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, BackendError>;
}

impl<T: TextBackend + ?Sized> TextBackend for Arc<T> {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        (**self).complete(prompt)
    }
}

impl<T: TextBackend + ?Sized> TextBackend for Box<T> {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        (**self).complete(prompt)
    }
}

/// 64-bit FNV-1a. Stable across platforms and releases, which matters for
/// fixture keys and persisted feature hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Key under which a fixture response for `prompt` is stored.
pub fn prompt_key(prompt: &str) -> String {
    format!("{:016x}", fnv1a64(prompt.as_bytes()))
}

/// Canned responses keyed by [`prompt_key`].
///
/// The file is JSONL: `{"key": "...", "completion": "..."}` per line. A record
/// may carry `"prompt"` instead of `"key"`, in which case the key is computed.
#[derive(Debug, Clone, Default)]
pub struct FixtureBackend {
    responses: HashMap<String, String>,
    fallback: Option<String>,
}

#[derive(Deserialize)]
struct FixtureLine {
    #[serde(default)]
    key: Option<String>,
    #[serde(default)]
    prompt: Option<String>,
    completion: String,
}

impl FixtureBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| BackendError::Transport(format!("{}: {e}", path.as_ref().display())))?;
        let mut backend = Self::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureLine = serde_json::from_str(line)
                .map_err(|e| BackendError::Malformed(format!("line {}: {e}", n + 1)))?;
            let key = match (rec.key, rec.prompt) {
                (Some(k), _) => k,
                (None, Some(p)) => prompt_key(&p),
                (None, None) => {
                    return Err(BackendError::Malformed(format!(
                        "line {}: needs `key` or `prompt`",
                        n + 1
                    )))
                }
            };
            backend.responses.insert(key, rec.completion);
        }
        Ok(backend)
    }

    pub fn insert(&mut self, prompt: &str, completion: impl Into<String>) {
        self.responses.insert(prompt_key(prompt), completion.into());
    }

    /// Response returned for prompts without a fixture entry.
    pub fn with_fallback(mut self, completion: impl Into<String>) -> Self {
        self.fallback = Some(completion.into());
        self
    }
}

impl TextBackend for FixtureBackend {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let key = prompt_key(prompt);
        match self.responses.get(&key) {
            Some(r) => Ok(r.clone()),
            None => self
                .fallback
                .clone()
                .ok_or(BackendError::MissingFixture(key)),
        }
    }
}

/// Returns the prompt unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoBackend;

impl TextBackend for EchoBackend {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        Ok(format!("You asked: {prompt}"))
    }
}

/// Wraps a backend and sleeps before every call.
#[derive(Debug, Clone)]
pub struct Delayed<B> {
    pub inner: B,
    pub delay: Duration,
}

impl<B> Delayed<B> {
    pub fn new(inner: B, delay: Duration) -> Self {
        Self { inner, delay }
    }
}

impl<B: TextBackend> TextBackend for Delayed<B> {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        std::thread::sleep(self.delay);
        self.inner.complete(prompt)
    }
}

/// Always fails with a transport error.
#[derive(Debug, Clone, Copy, Default)]
pub struct FailingBackend;

impl TextBackend for FailingBackend {
    fn complete(&self, _prompt: &str) -> Result<String, BackendError> {
        Err(BackendError::Transport("backend unavailable".into()))
    }
}
