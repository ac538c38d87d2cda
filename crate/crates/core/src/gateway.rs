//! Chat-completion backends behind one interface.
//!
//! A [`Gateway`] owns named [`ChatBackend`]s and adds retry with exponential
//! backoff and a bound on in-flight calls. Shipped backends:
//!
//! * [`ReplayBackend`]: responses looked up by a digest of the messages.
//! * [`ScriptedBackend`]: a fixed queue of responses, for tests.
//! * [`FailureInjector`]: fails a configured number of calls, then delegates.
//! * [`RecordingBackend`]: delegates and keeps successful replies as a
//!   [`ReplayStore`].
//! * [`LiveBackend`]: HTTP POST to a hosted chat-completions endpoint.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ENV_API_KEY: &str = "URBANLLM_API_KEY";
pub const ENV_API_BASE: &str = "URBANLLM_API_BASE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub backend: String,
}

impl ChatRequest {
    /// Single user message at temperature 0.
    pub fn user(backend: impl Into<String>, prompt: impl Into<String>) -> Self {
        ChatRequest {
            messages: vec![ChatMessage::user(prompt)],
            temperature: 0.0,
            max_output_tokens: 2048,
            backend: backend.into(),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    /// Replay key: hex SHA-256 of the role-tagged message list as JSON.
    pub fn digest(&self) -> String {
        prompt_digest(&self.messages)
    }

    fn check(&self) -> Result<(), GatewayError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest("at least one user message is required".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

pub fn prompt_digest(messages: &[ChatMessage]) -> String {
    let bytes = serde_json::to_vec(messages).expect("messages serialize");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub backend: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
    /// Sleep before each retry, in order.
    pub backoff_ms: Vec<u64>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("backend '{backend}' unavailable after {attempts} attempt(s): {last_error}")]
    BackendUnavailable { backend: String, attempts: u32, last_error: String },
    #[error("backend '{backend}' rejected the credential (HTTP {status})")]
    AuthError { backend: String, status: u16 },
    #[error("backend '{backend}' rejected the request (HTTP {status}): {body}")]
    Rejected { backend: String, status: u16, body: String },
    #[error("no stored response for prompt digest {digest}")]
    ReplayMiss { digest: String },
    #[error("no backend registered as '{0}'")]
    UnknownBackend(String),
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
}

/// Outcome of a single backend attempt.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum CallError {
    /// Transport failure or 5xx; retried.
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("credential rejected (HTTP {0})")]
    Auth(u16),
    /// Other 4xx; never retried.
    #[error("request rejected (HTTP {0}): {1}")]
    Rejected(u16, String),
    #[error("replay miss for {0}")]
    ReplayMiss(String),
}

pub trait ChatBackend: Send + Sync {
    fn call(&self, request: &ChatRequest) -> Result<String, CallError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub base_ms: u64,
    pub factor: u64,
    pub max_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { base_ms: 500, factor: 2, max_retries: 3 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based).
    pub fn delay_ms(&self, retry: u32) -> u64 {
        self.base_ms.saturating_mul(self.factor.saturating_pow(retry))
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Counting semaphore guarding concurrent backend calls.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Registry of named backends plus the shared retry and concurrency policy.
pub struct Gateway {
    backends: BTreeMap<String, Arc<dyn ChatBackend>>,
    retry: RetryPolicy,
    sleeper: Sleeper,
    slots: Slots,
}

impl Default for Gateway {
    fn default() -> Self {
        Gateway::new(RetryPolicy::default(), 4)
    }
}

impl Gateway {
    pub fn new(retry: RetryPolicy, max_inflight: usize) -> Self {
        Gateway {
            backends: BTreeMap::new(),
            retry,
            sleeper: Arc::new(std::thread::sleep),
            slots: Slots { free: Mutex::new(max_inflight.max(1)), cv: Condvar::new() },
        }
    }

    /// Replaces the sleep used between retries (tests pass a recorder).
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn register(&mut self, name: impl Into<String>, backend: impl ChatBackend + 'static) -> &mut Self {
        self.backends.insert(name.into(), Arc::new(backend));
        self
    }

    pub fn register_shared(&mut self, name: impl Into<String>, backend: Arc<dyn ChatBackend>) -> &mut Self {
        self.backends.insert(name.into(), backend);
        self
    }

    pub fn has_backend(&self, name: &str) -> bool {
        self.backends.contains_key(name)
    }

    pub fn backend_names(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.check()?;
        let backend = self
            .backends
            .get(&request.backend)
            .ok_or_else(|| GatewayError::UnknownBackend(request.backend.clone()))?;
        let started = Instant::now();
        let mut backoff_ms = Vec::new();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let result = {
                let _slot = self.slots.acquire();
                backend.call(request)
            };
            let name = &request.backend;
            match result {
                Ok(content) => {
                    return Ok(ChatResponse {
                        content,
                        backend: name.clone(),
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt_count: attempt,
                        backoff_ms,
                    })
                }
                Err(CallError::Auth(status)) => return Err(GatewayError::AuthError { backend: name.clone(), status }),
                Err(CallError::Rejected(status, body)) => {
                    return Err(GatewayError::Rejected { backend: name.clone(), status, body })
                }
                Err(CallError::ReplayMiss(digest)) => return Err(GatewayError::ReplayMiss { digest }),
                Err(CallError::Transient(msg)) => {
                    let retries_done = attempt - 1;
                    if retries_done >= self.retry.max_retries {
                        return Err(GatewayError::BackendUnavailable {
                            backend: name.clone(),
                            attempts: attempt,
                            last_error: msg,
                        });
                    }
                    let delay = self.retry.delay_ms(retries_done);
                    tracing::warn!(backend = %name, attempt, delay_ms = delay, "retrying after transient failure: {msg}");
                    backoff_ms.push(delay);
                    (self.sleeper)(Duration::from_millis(delay));
                }
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ReplayStoreError {
    #[error("reading replay store {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("replay store {path} line {line}: {source}")]
    Format { path: String, line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub digest: String,
    pub content: String,
}

/// Digest-keyed responses; the on-disk format is JSONL of [`ReplayEntry`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayStore {
    entries: BTreeMap<String, String>,
}

impl ReplayStore {
    pub fn load(path: &Path) -> Result<Self, ReplayStoreError> {
        let text = fs::read_to_string(path).map_err(|source| ReplayStoreError::Io { path: path.display().to_string(), source })?;
        Self::from_jsonl(&text, &path.display().to_string())
    }

    /// Parses JSONL text; `origin` names the source in errors.
    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self, ReplayStoreError> {
        let mut store = ReplayStore::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ReplayEntry = serde_json::from_str(line)
                .map_err(|source| ReplayStoreError::Format { path: origin.to_string(), line: i + 1, source })?;
            store.entries.insert(entry.digest, entry.content);
        }
        Ok(store)
    }

    /// Adds every entry of `other`, replacing duplicates.
    pub fn merge(&mut self, other: ReplayStore) {
        self.entries.extend(other.entries);
    }

    /// Merges several store files; later files win on duplicate digests.
    pub fn load_all<P: AsRef<Path>>(paths: &[P]) -> Result<Self, ReplayStoreError> {
        let mut store = ReplayStore::default();
        for p in paths {
            store.merge(ReplayStore::load(p.as_ref())?);
        }
        Ok(store)
    }

    pub fn insert(&mut self, digest: impl Into<String>, content: impl Into<String>) {
        self.entries.insert(digest.into(), content.into());
    }

    /// Stores `content` as the answer to a single-user-message prompt.
    pub fn insert_prompt(&mut self, prompt: &str, content: impl Into<String>) {
        self.insert(prompt_digest(&[ChatMessage::user(prompt)]), content);
    }

    pub fn get(&self, digest: &str) -> Option<&str> {
        self.entries.get(digest).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// JSONL rendering sorted by digest, so rebuilt stores diff cleanly.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (digest, content) in &self.entries {
            let entry = ReplayEntry { digest: digest.clone(), content: content.clone() };
            out.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())
    }
}

pub struct ReplayBackend {
    store: ReplayStore,
}

impl ReplayBackend {
    pub fn new(store: ReplayStore) -> Self {
        ReplayBackend { store }
    }
}

impl ChatBackend for ReplayBackend {
    fn call(&self, request: &ChatRequest) -> Result<String, CallError> {
        let digest = request.digest();
        self.store.get(&digest).map(str::to_string).ok_or(CallError::ReplayMiss(digest))
    }
}

/// Delegates to `inner` and records every successful reply by digest.
pub struct RecordingBackend<B> {
    inner: B,
    store: Mutex<ReplayStore>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend { inner, store: Mutex::default() }
    }

    /// Snapshot of the replies recorded so far.
    pub fn store(&self) -> ReplayStore {
        self.store.lock().unwrap().clone()
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn call(&self, request: &ChatRequest) -> Result<String, CallError> {
        let reply = self.inner.call(request)?;
        self.store.lock().unwrap().insert(request.digest(), reply.clone());
        Ok(reply)
    }
}

/// Returns queued outcomes in order; an exhausted queue is a transient error.
#[derive(Default)]
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<Result<String, CallError>>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new(responses: impl IntoIterator<Item = Result<String, CallError>>) -> Self {
        ScriptedBackend { queue: Mutex::new(responses.into_iter().collect()), seen: Mutex::default() }
    }

    pub fn replies<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::new(replies.into_iter().map(|s| Ok(s.into())))
    }

    /// Requests received so far.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn call(&self, request: &ChatRequest) -> Result<String, CallError> {
        self.seen.lock().unwrap().push(request.clone());
        self.queue
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(CallError::Transient("script exhausted".into())))
    }
}

/// Fails the first `failures` calls with `error`, then delegates.
pub struct FailureInjector<B> {
    inner: B,
    error: CallError,
    remaining: Mutex<u32>,
    calls: Mutex<u32>,
}

impl<B: ChatBackend> FailureInjector<B> {
    pub fn new(inner: B, failures: u32, error: CallError) -> Self {
        FailureInjector { inner, error, remaining: Mutex::new(failures), calls: Mutex::new(0) }
    }

    pub fn transient(inner: B, failures: u32) -> Self {
        Self::new(inner, failures, CallError::Transient("injected failure".into()))
    }

    pub fn calls(&self) -> u32 {
        *self.calls.lock().unwrap()
    }
}

impl<B: ChatBackend> ChatBackend for FailureInjector<B> {
    fn call(&self, request: &ChatRequest) -> Result<String, CallError> {
        *self.calls.lock().unwrap() += 1;
        {
            let mut remaining = self.remaining.lock().unwrap();
            if *remaining > 0 {
                *remaining -= 1;
                return Err(self.error.clone());
            }
        }
        self.inner.call(request)
    }
}

/// Hosted chat-completions endpoint (`POST {base}/chat/completions`).
pub struct LiveBackend {
    base_url: String,
    api_key: String,
    model: String,
    agent: ureq::Agent,
}

impl LiveBackend {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        LiveBackend { base_url: base_url.into(), api_key: api_key.into(), model: model.into(), agent }
    }

    /// Reads the endpoint and credential from `URBANLLM_API_BASE` and
    /// `URBANLLM_API_KEY`; `None` if either is unset.
    pub fn from_env(model: impl Into<String>, timeout: Duration) -> Option<Self> {
        let base = std::env::var(ENV_API_BASE).ok()?;
        let key = std::env::var(ENV_API_KEY).ok()?;
        Some(Self::new(base, key, model, timeout))
    }

    pub fn request_body(&self, request: &ChatRequest) -> serde_json::Value {
        json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
    }
}

impl ChatBackend for LiveBackend {
    fn call(&self, request: &ChatRequest) -> Result<String, CallError> {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let mut resp = self
            .agent
            .post(&url)
            .header("Authorization", format!("Bearer {}", self.api_key))
            .send_json(self.request_body(request))
            .map_err(|e| CallError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| CallError::Transient(e.to_string()))?;
        match status {
            200..=299 => first_choice_text(&body).ok_or_else(|| CallError::Rejected(status, "response has no choices[0].message.content".into())),
            401 | 403 => Err(CallError::Auth(status)),
            400..=499 => Err(CallError::Rejected(status, body)),
            _ => Err(CallError::Transient(format!("HTTP {status}"))),
        }
    }
}

/// Extracts `choices[0].message.content` from a chat-completions body.
pub fn first_choice_text(body: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(body).ok()?;
    v.pointer("/choices/0/message/content")?.as_str().map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recording_gateway() -> (Gateway, Arc<Mutex<Vec<Duration>>>) {
        let slept = Arc::new(Mutex::new(Vec::new()));
        let s = slept.clone();
        let gw = Gateway::default().with_sleeper(move |d| s.lock().unwrap().push(d));
        (gw, slept)
    }

    #[test]
    fn replay_lookup_is_direct() {
        let mut store = ReplayStore::default();
        store.insert_prompt("p", "[]");
        let mut gw = Gateway::default();
        gw.register("replay", ReplayBackend::new(store));
        let r = gw.complete(&ChatRequest::user("replay", "p")).unwrap();
        assert_eq!(r.content, "[]");
        assert_eq!(r.attempt_count, 1);
        assert!(r.backoff_ms.is_empty());
    }

    #[test]
    fn replay_miss_is_not_retried() {
        let mut gw = Gateway::default();
        gw.register("replay", ReplayBackend::new(ReplayStore::default()));
        let req = ChatRequest::user("replay", "unknown");
        assert_eq!(gw.complete(&req), Err(GatewayError::ReplayMiss { digest: req.digest() }));
    }

    #[test]
    fn two_failures_then_success_takes_three_attempts() {
        let (mut gw, slept) = recording_gateway();
        gw.register("flaky", FailureInjector::transient(ScriptedBackend::replies(["ok"]), 2));
        let r = gw.complete(&ChatRequest::user("flaky", "q")).unwrap();
        assert_eq!(r.attempt_count, 3);
        assert_eq!(r.backoff_ms, vec![500, 1000]);
        assert_eq!(*slept.lock().unwrap(), vec![Duration::from_millis(500), Duration::from_millis(1000)]);
    }

    #[test]
    fn retries_are_bounded() {
        let (mut gw, slept) = recording_gateway();
        gw.register("down", FailureInjector::transient(ScriptedBackend::replies(["never"]), 100));
        match gw.complete(&ChatRequest::user("down", "q")) {
            Err(GatewayError::BackendUnavailable { attempts, .. }) => assert_eq!(attempts, 4),
            other => panic!("{other:?}"),
        }
        assert_eq!(slept.lock().unwrap().len(), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (mut gw, slept) = recording_gateway();
        gw.register("auth", FailureInjector::new(ScriptedBackend::replies(["x"]), 5, CallError::Auth(401)));
        gw.register("bad", FailureInjector::new(ScriptedBackend::replies(["x"]), 5, CallError::Rejected(400, "no".into())));
        assert!(matches!(gw.complete(&ChatRequest::user("auth", "q")), Err(GatewayError::AuthError { status: 401, .. })));
        assert!(matches!(gw.complete(&ChatRequest::user("bad", "q")), Err(GatewayError::Rejected { status: 400, .. })));
        assert!(slept.lock().unwrap().is_empty());
    }

    #[test]
    fn request_shape_is_checked() {
        let gw = Gateway::default();
        let mut req = ChatRequest::user("x", "q");
        req.messages = vec![ChatMessage::system("s")];
        assert!(matches!(gw.complete(&req), Err(GatewayError::InvalidRequest(_))));
        assert!(matches!(gw.complete(&ChatRequest::user("x", "q")), Err(GatewayError::UnknownBackend(_))));
    }

    #[test]
    fn digest_depends_on_roles_and_content() {
        let a = prompt_digest(&[ChatMessage::user("a")]);
        assert_eq!(a, prompt_digest(&[ChatMessage::user("a")]));
        assert_ne!(a, prompt_digest(&[ChatMessage::system("a")]));
        assert_ne!(a, prompt_digest(&[ChatMessage::user("a ")]));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn store_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut store = ReplayStore::default();
        store.insert("b", "two\nlines");
        store.insert("a", "one");
        store.save(&path).unwrap();
        assert_eq!(ReplayStore::load(&path).unwrap(), store);
        assert!(store.to_jsonl().starts_with("{\"digest\":\"a\""));
    }

    #[test]
    fn inflight_calls_are_bounded() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        struct Slow {
            now: AtomicUsize,
            peak: AtomicUsize,
        }
        impl ChatBackend for Slow {
            fn call(&self, _: &ChatRequest) -> Result<String, CallError> {
                let n = self.now.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(n, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(20));
                self.now.fetch_sub(1, Ordering::SeqCst);
                Ok(String::new())
            }
        }
        let slow = Arc::new(Slow { now: AtomicUsize::new(0), peak: AtomicUsize::new(0) });
        let mut gw = Gateway::new(RetryPolicy::default(), 2);
        gw.register_shared("slow", slow.clone());
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| gw.complete(&ChatRequest::user("slow", "q")).unwrap());
            }
        });
        assert!(slow.peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn choice_text_extraction() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"[]"}}]}"#;
        assert_eq!(first_choice_text(body).as_deref(), Some("[]"));
        assert_eq!(first_choice_text("{}"), None);
    }
}
