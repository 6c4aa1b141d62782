use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{prompt_digest, ChatBackend, ChatMessage, CompletionRequest, LlmError};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockKey {
    /// Hex digest of the full message sequence.
    Digest(String),
    /// Matches requests whose `scenario` label equals this string.
    Label(String),
}

impl MockKey {
    pub fn digest_of(messages: &[ChatMessage]) -> Self {
        MockKey::Digest(prompt_digest(messages))
    }

    pub fn label(s: impl Into<String>) -> Self {
        MockKey::Label(s.into())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptMode {
    /// Rebinding a key is an error.
    #[default]
    Strict,
    /// Rebinding a key replaces the previous response.
    Lenient,
}

#[derive(Deserialize)]
struct ScriptLine {
    #[serde(flatten)]
    key: MockKey,
    response: String,
}

/// Deterministic scripted backend. Lookup tries the prompt digest first, then
/// the scenario label, then the optional fallback backend.
pub struct MockBackend {
    mode: ScriptMode,
    scripts: RwLock<HashMap<MockKey, String>>,
    fallback: Option<Arc<dyn ChatBackend>>,
}

impl MockBackend {
    pub fn new(mode: ScriptMode) -> Self {
        MockBackend { mode, scripts: RwLock::new(HashMap::new()), fallback: None }
    }

    pub fn with_fallback(mut self, fallback: Arc<dyn ChatBackend>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn register(&self, key: MockKey, response: impl Into<String>) -> Result<(), LlmError> {
        let mut scripts = self.scripts.write().unwrap_or_else(|e| e.into_inner());
        if self.mode == ScriptMode::Strict && scripts.contains_key(&key) {
            let label = match &key {
                MockKey::Digest(d) => format!("digest {d}"),
                MockKey::Label(l) => format!("label {l}"),
            };
            return Err(LlmError::DuplicateScript(label));
        }
        scripts.insert(key, response.into());
        Ok(())
    }

    /// Loads newline-delimited `{"digest"|"label": ..., "response": ...}`
    /// records.
    pub fn load_scripts(&self, path: &Path) -> Result<usize, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::InvalidRequest(format!("reading {}: {e}", path.display())))?;
        let mut n = 0;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: ScriptLine = serde_json::from_str(line)
                .map_err(|e| LlmError::InvalidRequest(format!("{}:{}: {e}", path.display(), i + 1)))?;
            self.register(rec.key, rec.response)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn len(&self) -> usize {
        self.scripts.read().map(|s| s.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let digest = request.digest();
        {
            let scripts = self.scripts.read().unwrap_or_else(|e| e.into_inner());
            if let Some(r) = scripts.get(&MockKey::Digest(digest.clone())) {
                return Ok(r.clone());
            }
            if let Some(label) = &request.scenario {
                if let Some(r) = scripts.get(&MockKey::Label(label.clone())) {
                    return Ok(r.clone());
                }
            }
        }
        match &self.fallback {
            Some(f) => f.send(request),
            None => Err(LlmError::UnscriptedPrompt { digest }),
        }
    }

    fn name(&self) -> &str {
        "mock"
    }
}

/// Test double that fails with queued errors before delegating, counting
/// every call it receives.
pub struct FlakyBackend<B> {
    inner: B,
    failures: Mutex<VecDeque<LlmError>>,
    calls: AtomicUsize,
}

impl<B: ChatBackend> FlakyBackend<B> {
    pub fn new(inner: B, failures: Vec<LlmError>) -> Self {
        FlakyBackend { inner, failures: Mutex::new(failures.into()), calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: ChatBackend> ChatBackend for FlakyBackend<B> {
    fn send(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(e) = self.failures.lock().unwrap_or_else(|e| e.into_inner()).pop_front() {
            return Err(e);
        }
        self.inner.send(request)
    }

    fn name(&self) -> &str {
        "flaky"
    }
}
