//! Uniform client over inference backends.
//!
//! [`Gateway`] wraps a [`Backend`] with the retry budget, rate limiting,
//! bounded concurrency and audit logging described by a [`BackendProfile`].
//! Two backends ship with the crate: [`mock::MockBackend`], driven by a
//! JSON script and fully deterministic, and [`http::HttpBackend`], which
//! speaks a chat-completion style HTTP API.

pub mod http;
pub mod mock;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grammar;
use crate::model::{validate_feedback, Feedback};
use crate::prompts;
use crate::segmenter::{EmbeddingMatrix, SegmentError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

/// Connection and sampling settings for one backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendProfile {
    pub kind: BackendKind,
    pub endpoint: String,
    pub chat_path: String,
    pub embeddings_path: String,
    pub model: String,
    pub embedding_model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: f64,
    /// Extra attempts after the first one.
    pub retries: u32,
    pub backoff_ms: u64,
    pub backoff_max_ms: u64,
    /// Requests per second; 0 disables the limiter.
    pub rate_limit_rps: f64,
    pub max_concurrency: usize,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub mock_script: Option<PathBuf>,
    pub embedding_dim: usize,
    pub audit_log: Option<PathBuf>,
}

impl Default for BackendProfile {
    fn default() -> Self {
        BackendProfile {
            kind: BackendKind::Mock,
            endpoint: "http://127.0.0.1:8000".into(),
            chat_path: "/v1/chat/completions".into(),
            embeddings_path: "/v1/embeddings".into(),
            model: "feedback-model".into(),
            embedding_model: "all-MiniLM-L6-v2".into(),
            temperature: 0.7,
            max_tokens: 512,
            timeout_secs: 60.0,
            retries: 3,
            backoff_ms: 500,
            backoff_max_ms: 8_000,
            rate_limit_rps: 0.0,
            max_concurrency: 4,
            api_key_env: "PEERFEEDBACK_API_KEY".into(),
            mock_script: None,
            embedding_dim: 384,
            audit_log: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("invalid profile: {0}")]
    Invalid(String),
    #[error("mock script {path}: {message}")]
    Script { path: PathBuf, message: String },
}

impl BackendProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ProfileError::Invalid(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if !(self.rate_limit_rps.is_finite() && self.rate_limit_rps >= 0.0) {
            return Err(ProfileError::Invalid("rate_limit_rps must be >= 0".into()));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(ProfileError::Invalid("timeout_secs must be > 0".into()));
        }
        if self.max_concurrency == 0 {
            return Err(ProfileError::Invalid("max_concurrency must be >= 1".into()));
        }
        if self.embedding_dim == 0 {
            return Err(ProfileError::Invalid("embedding_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Loads a TOML profile. Relative `mock_script` and `audit_log` paths
    /// resolve against the profile's directory.
    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ProfileError::Read { path: path.to_path_buf(), source })?;
        let mut profile: BackendProfile =
            toml::from_str(&text).map_err(|source| ProfileError::Toml { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new(""));
        profile.mock_script = profile.mock_script.map(|p| base.join(p));
        profile.audit_log = profile.audit_log.map(|p| base.join(p));
        profile.validate()?;
        Ok(profile)
    }
}

/// Identifies what a request is about; used for mock lookup and auditing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RequestKey {
    pub conversation_id: String,
    pub utterance_index: usize,
    pub chunk: Option<usize>,
    pub fingerprint: String,
}

impl RequestKey {
    pub fn utterance(conversation_id: &str, utterance_index: usize, context: &str) -> Self {
        RequestKey {
            conversation_id: conversation_id.to_string(),
            utterance_index,
            chunk: None,
            fingerprint: fingerprint(conversation_id, utterance_index, context),
        }
    }

    pub fn chunk(conversation_id: &str, chunk: usize, first_index: usize, context: &str) -> Self {
        RequestKey {
            conversation_id: conversation_id.to_string(),
            utterance_index: first_index,
            chunk: Some(chunk),
            fingerprint: fingerprint(conversation_id, first_index, context),
        }
    }
}

/// Stable 64-bit hex digest of (conversation id, utterance index, context).
pub fn fingerprint(conversation_id: &str, utterance_index: usize, context: &str) -> String {
    let mut h = Sha256::new();
    h.update(conversation_id.as_bytes());
    h.update([0u8]);
    h.update(utterance_index.to_string().as_bytes());
    h.update([0u8]);
    h.update(context.as_bytes());
    hex_prefix(&h.finalize(), 8)
}

pub(crate) fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().take(n).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub key: RequestKey,
    pub prompt: String,
    pub sample_index: usize,
    /// 0 for the first try, incremented on every re-request.
    pub attempt: usize,
    /// Utterance indices the response must cover.
    pub targets: Vec<usize>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRequest {
    pub key: RequestKey,
    pub prompt: String,
    /// The helper response being judged.
    pub response_text: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenerationResponse {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("rate limited by backend")]
    RateLimited,
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        matches!(self, BackendError::Unavailable(_) | BackendError::RateLimited)
    }
}

/// A raw inference backend. Implementations perform a single attempt;
/// retries and pacing live in [`Gateway`].
pub trait Backend: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError>;
    /// Unnormalized probability mass for the labels `true` and `false`.
    fn label_masses(&self, req: &LabelRequest) -> Result<(f64, f64), BackendError>;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("backend unavailable after {attempts} attempts: {last}")]
    BackendUnavailable { attempts: usize, last: String },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: usize },
    #[error("unparseable generation after {attempts} attempts ({reason}): {raw:?}")]
    UnparseableGeneration { attempts: usize, reason: String, raw: String },
    #[error("both label masses are zero")]
    DegenerateMass,
    #[error("invalid label masses ({0}, {1})")]
    InvalidMass(f64, f64),
    #[error("embedding dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Probability that the appropriateness label is `true`, renormalized over
/// the two label alternatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelProbability {
    pub p_true: f64,
    pub raw: (f64, f64),
}

impl LabelProbability {
    pub fn from_masses(mass_true: f64, mass_false: f64) -> Result<Self, GatewayError> {
        if !(mass_true.is_finite() && mass_false.is_finite()) || mass_true < 0.0 || mass_false < 0.0 {
            return Err(GatewayError::InvalidMass(mass_true, mass_false));
        }
        let total = mass_true + mass_false;
        if total == 0.0 {
            return Err(GatewayError::DegenerateMass);
        }
        Ok(LabelProbability { p_true: mass_true / total, raw: (mass_true, mass_false) })
    }
}

/// Minimum spacing between request starts.
struct RateLimiter {
    interval: Option<Duration>,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn new(rps: f64) -> Self {
        let interval = (rps > 0.0).then(|| Duration::from_secs_f64(1.0 / rps));
        RateLimiter { interval, next: Mutex::new(None) }
    }

    fn acquire(&self) {
        let Some(interval) = self.interval else { return };
        let wait = {
            let mut next = self.next.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let start = next.map_or(now, |t| t.max(now));
            *next = Some(start + interval);
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Serialize)]
struct AuditEntry<'a> {
    request_id: u64,
    kind: &'a str,
    conversation_id: &'a str,
    utterance_index: Option<usize>,
    fingerprint: &'a str,
    attempt: usize,
    latency_ms: f64,
    prompt_chars: usize,
    completion_chars: usize,
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
    outcome: &'a str,
}

/// Append-only JSONL log of backend traffic.
struct AuditLog {
    out: Mutex<BufWriter<File>>,
}

impl AuditLog {
    fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog { out: Mutex::new(BufWriter::new(file)) })
    }

    fn record(&self, entry: &AuditEntry<'_>) {
        let mut out = self.out.lock().expect("audit log poisoned");
        // Audit failures must not fail the request.
        if serde_json::to_writer(&mut *out, entry).is_ok() {
            let _ = out.write_all(b"\n");
            let _ = out.flush();
        }
    }
}

/// Request counters, mainly for tests and run logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct GatewayStats {
    pub requests: u64,
    pub retries: u64,
}

/// Retrying, rate-limited client over a [`Backend`].
pub struct Gateway {
    backend: Arc<dyn Backend>,
    profile: BackendProfile,
    limiter: RateLimiter,
    slots: Semaphore,
    audit: Option<AuditLog>,
    next_id: AtomicU64,
    retries: AtomicU64,
}

enum Failure {
    Backend(BackendError),
    Parse { raw: String, reason: String },
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, profile: BackendProfile) -> std::io::Result<Self> {
        let audit = profile.audit_log.as_deref().map(AuditLog::open).transpose()?;
        Ok(Gateway {
            backend,
            limiter: RateLimiter::new(profile.rate_limit_rps),
            slots: Semaphore::new(profile.max_concurrency.max(1)),
            audit,
            profile,
            next_id: AtomicU64::new(0),
            retries: AtomicU64::new(0),
        })
    }

    /// Builds the backend named by the profile.
    pub fn from_profile(profile: BackendProfile) -> Result<Self, ProfileError> {
        profile.validate()?;
        let backend: Arc<dyn Backend> = match profile.kind {
            BackendKind::Mock => {
                let script = match &profile.mock_script {
                    Some(path) => mock::MockScript::load(path)?,
                    None => mock::MockScript::default(),
                };
                Arc::new(mock::MockBackend::new(script, profile.embedding_dim))
            }
            BackendKind::Http => Arc::new(http::HttpBackend::new(&profile).map_err(ProfileError::Invalid)?),
        };
        Gateway::new(backend, profile).map_err(|source| ProfileError::Read {
            path: PathBuf::from("audit log"),
            source,
        })
    }

    pub fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            requests: self.next_id.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
        }
    }

    fn backoff(&self, attempt: usize) {
        if self.profile.backoff_ms == 0 {
            return;
        }
        let factor = 1u64 << attempt.min(16);
        let ms = self.profile.backoff_ms.saturating_mul(factor).min(self.profile.backoff_max_ms);
        std::thread::sleep(Duration::from_millis(ms));
    }

    /// Runs `call` under the limiter, concurrency bound and audit log.
    fn dispatch<T>(
        &self,
        kind: &str,
        key: Option<&RequestKey>,
        attempt: usize,
        prompt_chars: usize,
        call: impl FnOnce() -> Result<(T, usize, Option<u64>, Option<u64>), BackendError>,
    ) -> Result<T, BackendError> {
        self.limiter.acquire();
        let _permit = self.slots.acquire();
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let started = Instant::now();
        let result = call();
        if let Some(audit) = &self.audit {
            let (completion_chars, pt, ct, outcome) = match &result {
                Ok((_, chars, pt, ct)) => (*chars, *pt, *ct, "ok".to_string()),
                Err(e) => (0, None, None, e.to_string()),
            };
            audit.record(&AuditEntry {
                request_id: id,
                kind,
                conversation_id: key.map_or("", |k| k.conversation_id.as_str()),
                utterance_index: key.map(|k| k.utterance_index),
                fingerprint: key.map_or("", |k| k.fingerprint.as_str()),
                attempt,
                latency_ms: started.elapsed().as_secs_f64() * 1e3,
                prompt_chars,
                completion_chars,
                prompt_tokens: pt,
                completion_tokens: ct,
                outcome: &outcome,
            });
        }
        result.map(|(v, ..)| v)
    }

    fn retry_loop<T>(&self, mut once: impl FnMut(usize) -> Result<T, Failure>) -> Result<T, GatewayError> {
        let budget = self.profile.retries as usize + 1;
        let mut last = None;
        for attempt in 0..budget {
            if attempt > 0 {
                self.retries.fetch_add(1, Ordering::Relaxed);
            }
            match once(attempt) {
                Ok(v) => return Ok(v),
                Err(Failure::Backend(e)) if !e.retryable() => {
                    return Err(GatewayError::BackendUnavailable { attempts: attempt + 1, last: e.to_string() })
                }
                Err(Failure::Backend(e)) => {
                    last = Some(Failure::Backend(e));
                    if attempt + 1 < budget {
                        self.backoff(attempt);
                    }
                }
                Err(parse) => last = Some(parse),
            }
        }
        Err(match last {
            Some(Failure::Backend(BackendError::RateLimited)) => GatewayError::RateLimited { attempts: budget },
            Some(Failure::Backend(e)) => GatewayError::BackendUnavailable { attempts: budget, last: e.to_string() },
            Some(Failure::Parse { raw, reason }) => GatewayError::UnparseableGeneration { attempts: budget, reason, raw },
            None => GatewayError::Precondition("empty retry budget".into()),
        })
    }

    /// Requests a generation and parses it with `parse`; unparseable
    /// output is re-requested within the retry budget.
    pub fn generate_with<T>(
        &self,
        key: &RequestKey,
        prompt: &str,
        sample_index: usize,
        targets: &[usize],
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, GatewayError> {
        self.retry_loop(|attempt| {
            let req = GenerationRequest {
                key: key.clone(),
                prompt: prompt.to_string(),
                sample_index,
                attempt,
                targets: targets.to_vec(),
                temperature: self.profile.temperature,
                max_tokens: self.profile.max_tokens,
            };
            let resp = self
                .dispatch("generate", Some(key), attempt, prompt.len(), || {
                    self.backend.generate(&req).map(|r| {
                        let chars = r.text.len();
                        let (pt, ct) = (r.prompt_tokens, r.completion_tokens);
                        (r, chars, pt, ct)
                    })
                })
                .map_err(Failure::Backend)?;
            parse(&resp.text).map_err(|reason| Failure::Parse { raw: resp.text, reason })
        })
    }

    /// Draws `n` feedback samples for the response described by `input`.
    /// Every returned record passes validation.
    pub fn sample_feedback(&self, key: &RequestKey, input: &str, n: usize) -> Result<Vec<Feedback>, GatewayError> {
        if n == 0 {
            return Err(GatewayError::Precondition("sample count must be >= 1".into()));
        }
        let prompt = prompts::feedback_prompt(input);
        (0..n)
            .map(|k| self.generate_with(key, &prompt, k, &[key.utterance_index], parse_valid_feedback))
            .collect()
    }

    /// Probability that the feedback model labels `response_text`
    /// (shown after `input`'s context) as appropriate.
    pub fn appropriateness_prob(
        &self,
        key: &RequestKey,
        input: &str,
        response_text: &str,
    ) -> Result<LabelProbability, GatewayError> {
        let prompt = prompts::label_prompt(input);
        let req = LabelRequest { key: key.clone(), prompt, response_text: response_text.to_string() };
        let (t, f) = self.retry_loop(|attempt| {
            self.dispatch("label", Some(key), attempt, req.prompt.len(), || {
                self.backend.label_masses(&req).map(|m| (m, 0, None, None))
            })
            .map_err(Failure::Backend)
        })?;
        LabelProbability::from_masses(t, f)
    }

    pub fn embed(&self, texts: &[String]) -> Result<EmbeddingMatrix, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::Precondition("embed needs at least one text".into()));
        }
        let chars = texts.iter().map(String::len).sum();
        let rows = self.retry_loop(|attempt| {
            self.dispatch("embed", None, attempt, chars, || self.backend.embed(texts).map(|r| (r, 0, None, None)))
                .map_err(Failure::Backend)
        })?;
        if rows.len() != texts.len() {
            return Err(GatewayError::DimensionMismatch(format!(
                "{} vectors for {} texts",
                rows.len(),
                texts.len()
            )));
        }
        EmbeddingMatrix::new(rows).map_err(|e| match e {
            SegmentError::RaggedRow { .. } | SegmentError::NonFinite { .. } => {
                GatewayError::DimensionMismatch(e.to_string())
            }
            other => GatewayError::Precondition(other.to_string()),
        })
    }
}

/// Parses one canonical record and rejects invalid ones.
pub fn parse_valid_feedback(text: &str) -> Result<Feedback, String> {
    let fb = grammar::parse_feedback(text).map_err(|e| e.to_string())?;
    let violations = validate_feedback(&fb);
    if violations.is_empty() {
        Ok(fb)
    } else {
        Err(violations.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))
    }
}

/// Parses a block response and requires a valid record for every target.
pub fn parse_valid_blocks(text: &str, targets: &[usize]) -> Result<BTreeMap<usize, Feedback>, String> {
    let blocks = grammar::parse_blocks(text).map_err(|e| e.to_string())?;
    for t in targets {
        let fb = blocks.get(t).ok_or_else(|| format!("no block for utterance {t}"))?;
        let violations = validate_feedback(fb);
        if !violations.is_empty() {
            return Err(format!(
                "utterance {t}: {}",
                violations.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
            ));
        }
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    #[test]
    fn normalization_arithmetic() {
        let p = LabelProbability::from_masses(0.6, 0.2).unwrap();
        assert!((p.p_true - 0.75).abs() < 1e-15);
        assert_eq!(LabelProbability::from_masses(0.0, 0.0), Err(GatewayError::DegenerateMass));
        assert!(matches!(LabelProbability::from_masses(-1.0, 2.0), Err(GatewayError::InvalidMass(..))));
        assert!(matches!(LabelProbability::from_masses(f64::NAN, 2.0), Err(GatewayError::InvalidMass(..))));
    }

    #[test]
    fn fingerprint_is_stable() {
        let a = fingerprint("c1", 3, "ctx");
        assert_eq!(a, fingerprint("c1", 3, "ctx"));
        assert_ne!(a, fingerprint("c1", 4, "ctx"));
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn profile_validation() {
        let mut p = BackendProfile::default();
        assert!(p.validate().is_ok());
        p.temperature = -0.1;
        assert!(p.validate().is_err());
    }

    struct Flaky {
        calls: AtomicUsize,
        fail_first: usize,
        error: BackendError,
    }

    impl Backend for Flaky {
        fn generate(&self, _: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
            if self.calls.fetch_add(1, Ordering::SeqCst) < self.fail_first {
                return Err(self.error.clone());
            }
            Ok(GenerationResponse { text: "appropriate: true\n".into(), ..Default::default() })
        }
        fn label_masses(&self, _: &LabelRequest) -> Result<(f64, f64), BackendError> {
            Err(self.error.clone())
        }
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
            Ok(texts.iter().enumerate().map(|(i, _)| vec![1.0; i + 1]).collect())
        }
    }

    fn quiet_profile(retries: u32) -> BackendProfile {
        BackendProfile { retries, backoff_ms: 0, ..BackendProfile::default() }
    }

    #[test]
    fn transient_failures_are_retried() {
        let backend = Arc::new(Flaky {
            calls: AtomicUsize::new(0),
            fail_first: 2,
            error: BackendError::Unavailable("down".into()),
        });
        let gw = Gateway::new(backend, quiet_profile(3)).unwrap();
        let key = RequestKey::utterance("c", 1, "");
        let out = gw.sample_feedback(&key, "in", 1).unwrap();
        assert_eq!(out, vec![Feedback::appropriate()]);
        assert_eq!(gw.stats(), GatewayStats { requests: 3, retries: 2 });
    }

    #[test]
    fn exhausted_budget_surfaces_error_kind() {
        let backend = Arc::new(Flaky { calls: AtomicUsize::new(0), fail_first: 100, error: BackendError::RateLimited });
        let gw = Gateway::new(backend, quiet_profile(1)).unwrap();
        let key = RequestKey::utterance("c", 1, "");
        assert_eq!(gw.sample_feedback(&key, "in", 1), Err(GatewayError::RateLimited { attempts: 2 }));
        assert!(matches!(gw.appropriateness_prob(&key, "in", "x"), Err(GatewayError::RateLimited { .. })));
    }

    #[test]
    fn protocol_errors_are_not_retried() {
        let backend = Arc::new(Flaky {
            calls: AtomicUsize::new(0),
            fail_first: 100,
            error: BackendError::Protocol("bad request".into()),
        });
        let gw = Gateway::new(backend, quiet_profile(5)).unwrap();
        let key = RequestKey::utterance("c", 1, "");
        assert!(matches!(gw.sample_feedback(&key, "in", 1), Err(GatewayError::BackendUnavailable { attempts: 1, .. })));
    }

    #[test]
    fn ragged_embeddings_and_empty_input() {
        let backend = Arc::new(Flaky { calls: AtomicUsize::new(0), fail_first: 0, error: BackendError::RateLimited });
        let gw = Gateway::new(backend, quiet_profile(0)).unwrap();
        assert!(matches!(gw.embed(&["a".into(), "b".into()]), Err(GatewayError::DimensionMismatch(_))));
        assert!(matches!(gw.embed(&[]), Err(GatewayError::Precondition(_))));
        assert!(matches!(gw.sample_feedback(&RequestKey::utterance("c", 0, ""), "in", 0), Err(GatewayError::Precondition(_))));
    }

    #[test]
    fn audit_log_records_each_attempt() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("audit.jsonl");
        let backend = Arc::new(Flaky {
            calls: AtomicUsize::new(0),
            fail_first: 1,
            error: BackendError::Unavailable("x".into()),
        });
        let profile = BackendProfile { audit_log: Some(log.clone()), ..quiet_profile(2) };
        let gw = Gateway::new(backend, profile).unwrap();
        gw.sample_feedback(&RequestKey::utterance("conv", 2, "ctx"), "in", 1).unwrap();
        let text = std::fs::read_to_string(&log).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["attempt"], 0);
        assert_eq!(lines[1]["outcome"], "ok");
        assert_eq!(lines[1]["conversation_id"], "conv");
    }

    #[test]
    fn rate_limiter_spaces_requests() {
        let limiter = RateLimiter::new(50.0);
        let t = Instant::now();
        for _ in 0..4 {
            limiter.acquire();
        }
        assert!(t.elapsed() >= Duration::from_millis(55));
    }
}
