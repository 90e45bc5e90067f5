//! Scripted, bit-deterministic backend for tests and offline runs.
//!
//! A script is a JSON document:
//!
//! ```json
//! {
//!   "rules": [{"contains": "open-ended", "p_true": 0.9}],
//!   "default_p_true": 0.2,
//!   "generations": [
//!     {"conversation": "c1", "utterance": 3, "samples": [{"appropriate": true}]},
//!     {"conversation": "c1", "chunk": 1, "responses": [{"error": "unavailable"}]}
//!   ],
//!   "default_generations": [{"appropriate": true}],
//!   "outage": {"after_calls": 100}
//! }
//! ```
//!
//! Label rules are checked in order against the judged response text; the
//! first rule whose predicates all hold decides the label masses, otherwise
//! `default_p_true` applies. Generation entries are matched in order by
//! their selectors. Requests without a matching entry draw from
//! `default_generations` by a hash of the request fingerprint and sample
//! index.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Backend, BackendError, GenerationRequest, GenerationResponse, LabelRequest, ProfileError, RequestKey,
};
use crate::grammar::{serialize_blocks, serialize_feedback};
use crate::model::{Feedback, SkillCategory};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_true: Option<f64>,
    /// Raw `(true, false)` masses, for exercising normalization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masses: Option<(f64, f64)>,
}

impl LabelRule {
    pub fn contains(text: &str, p_true: f64) -> Self {
        LabelRule { contains: Some(text.into()), p_true: Some(p_true), ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFailure {
    Unavailable,
    RateLimited,
}

/// One scripted reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockResponse {
    Feedback(Feedback),
    Chunk(BTreeMap<usize, Feedback>),
    Raw(String),
    Error(MockFailure),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    /// Sample index `k` answers with `samples[k]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<Feedback>>,
    /// Attempt `a` answers with `responses[min(a, len - 1)]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responses: Option<Vec<MockResponse>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Outage {
    /// Every backend call after this many fails as unavailable.
    pub after_calls: usize,
}

fn default_p() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<LabelRule>,
    #[serde(default = "default_p")]
    pub default_p_true: f64,
    #[serde(default)]
    pub generations: Vec<GenerationEntry>,
    #[serde(default)]
    pub default_generations: Vec<Feedback>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outage: Option<Outage>,
}

impl Default for MockScript {
    fn default() -> Self {
        MockScript {
            rules: Vec::new(),
            default_p_true: default_p(),
            generations: Vec::new(),
            default_generations: Vec::new(),
            outage: None,
        }
    }
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ProfileError::Read { path: path.to_path_buf(), source })?;
        let script: MockScript = serde_json::from_str(&text)
            .map_err(|e| ProfileError::Script { path: path.to_path_buf(), message: e.to_string() })?;
        script
            .check()
            .map_err(|message| ProfileError::Script { path: path.to_path_buf(), message })?;
        Ok(script)
    }

    /// Checks rule values and regexes.
    pub fn check(&self) -> Result<(), String> {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !unit(self.default_p_true) {
            return Err(format!("default_p_true {} outside [0, 1]", self.default_p_true));
        }
        for (i, r) in self.rules.iter().enumerate() {
            match (r.p_true, r.masses) {
                (Some(p), None) if unit(p) => {}
                (Some(p), None) => return Err(format!("rule {i}: p_true {p} outside [0, 1]")),
                (None, Some(_)) => {}
                _ => return Err(format!("rule {i}: exactly one of p_true and masses is required")),
            }
            if let Some(re) = &r.regex {
                Regex::new(re).map_err(|e| format!("rule {i}: {e}"))?;
            }
        }
        for (i, g) in self.generations.iter().enumerate() {
            if g.samples.is_none() && g.responses.as_ref().is_none_or(Vec::is_empty) {
                return Err(format!("generation entry {i}: needs samples or non-empty responses"));
            }
        }
        Ok(())
    }
}

/// Generations used when a script defines none.
pub fn builtin_generations() -> Vec<Feedback> {
    use SkillCategory::*;
    vec![
        Feedback::appropriate().with_positive([Empathy]),
        Feedback::needs_improvement(
            "Help the seeker explore their feelings before moving to solutions; an open question keeps the focus on them.",
            [Suggestions, Questions],
            "It sounds like a lot is weighing on you right now. What has been the hardest part for you?",
        ),
        Feedback::appropriate(),
        Feedback::needs_improvement(
            "Let the seeker know their reaction makes sense so they feel heard before going further.",
            [Validation, Empathy],
            "That sounds really painful, and it makes sense that you feel this way.",
        ),
        Feedback::needs_improvement(
            "Reflect the conflict the seeker described to check understanding.",
            [Reflections],
            "So you feel stuck between what your family expects and what you want for yourself?",
        )
        .with_positive([Questions]),
        Feedback::appropriate().with_positive([Reflections, Validation]),
    ]
}

/// Stable hash of a key, reduced into `0..n`.
fn pick(parts: &[&str], n: usize) -> usize {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let d = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    (u64::from_le_bytes(b) % n as u64) as usize
}

pub struct MockBackend {
    script: MockScript,
    regexes: Vec<Option<Regex>>,
    pool: Vec<Feedback>,
    embedding_dim: usize,
    calls: AtomicUsize,
}

impl MockBackend {
    /// `script` must pass [`MockScript::check`].
    pub fn new(script: MockScript, embedding_dim: usize) -> Self {
        let regexes = script
            .rules
            .iter()
            .map(|r| r.regex.as_deref().map(|re| Regex::new(re).expect("checked regex")))
            .collect();
        let pool = if script.default_generations.is_empty() {
            builtin_generations()
        } else {
            script.default_generations.clone()
        };
        MockBackend { script, regexes, pool, embedding_dim: embedding_dim.max(1), calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn tick(&self) -> Result<(), BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        match self.script.outage {
            Some(o) if n >= o.after_calls => Err(BackendError::Unavailable("scripted outage".into())),
            _ => Ok(()),
        }
    }

    fn selector_matches(e: &GenerationEntry, key: &RequestKey, sample: usize) -> bool {
        e.conversation.as_ref().is_none_or(|c| *c == key.conversation_id)
            && e.utterance.is_none_or(|u| u == key.utterance_index)
            && e.chunk.is_none_or(|c| Some(c) == key.chunk)
            && e.fingerprint.as_ref().is_none_or(|f| *f == key.fingerprint)
            && e.sample.is_none_or(|s| s == sample)
    }

    fn scripted(&self, req: &GenerationRequest) -> Option<MockResponse> {
        for e in &self.script.generations {
            if !Self::selector_matches(e, &req.key, req.sample_index) {
                continue;
            }
            if let Some(r) = &e.responses {
                return Some(r[req.attempt.min(r.len() - 1)].clone());
            }
            if let Some(fb) = e.samples.as_ref().and_then(|s| s.get(req.sample_index)) {
                return Some(MockResponse::Feedback(fb.clone()));
            }
        }
        None
    }

    /// Default pick for one utterance of a conversation.
    fn default_for(&self, conversation: &str, utterance: usize, fingerprint: &str, sample: usize) -> Feedback {
        let i = pick(&[conversation, &utterance.to_string(), fingerprint, &sample.to_string()], self.pool.len());
        self.pool[i].clone()
    }

    fn render(resp: MockResponse) -> Result<String, BackendError> {
        match resp {
            MockResponse::Feedback(fb) => serialize_feedback(&fb).map_err(|e| BackendError::Protocol(e.to_string())),
            MockResponse::Chunk(map) => serialize_blocks(&map).map_err(|e| BackendError::Protocol(e.to_string())),
            MockResponse::Raw(s) => Ok(s),
            MockResponse::Error(MockFailure::Unavailable) => Err(BackendError::Unavailable("scripted failure".into())),
            MockResponse::Error(MockFailure::RateLimited) => Err(BackendError::RateLimited),
        }
    }

    fn label_for(&self, req: &LabelRequest) -> (f64, f64) {
        for (rule, re) in self.script.rules.iter().zip(&self.regexes) {
            let ok = rule.contains.as_ref().is_none_or(|s| req.response_text.contains(s.as_str()))
                && re.as_ref().is_none_or(|re| re.is_match(&req.response_text))
                && rule.conversation.as_ref().is_none_or(|c| *c == req.key.conversation_id)
                && rule.utterance.is_none_or(|u| u == req.key.utterance_index);
            if ok {
                return match (rule.p_true, rule.masses) {
                    (Some(p), _) => (p, 1.0 - p),
                    (None, Some(m)) => m,
                    (None, None) => unreachable!("checked script"),
                };
            }
        }
        (self.script.default_p_true, 1.0 - self.script.default_p_true)
    }

    /// Signed feature hashing of lowercase whitespace tokens.
    fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.embedding_dim];
        for token in text.split_whitespace() {
            let t = token.to_lowercase();
            let t = t.trim_matches(|c: char| !c.is_alphanumeric());
            let t = if t.is_empty() { token } else { t };
            let d = Sha256::digest(t.as_bytes());
            let mut b = [0u8; 8];
            b.copy_from_slice(&d[..8]);
            let bucket = (u64::from_le_bytes(b) % self.embedding_dim as u64) as usize;
            let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
            let weight = 0.5 + f64::from(d[9]) / 255.0;
            v[bucket] += sign * weight;
        }
        v
    }
}

impl Backend for MockBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        self.tick()?;
        let text = match self.scripted(req) {
            Some(resp) => Self::render(resp)?,
            None if req.targets.len() == 1 && req.key.chunk.is_none() => {
                let fb = self.default_for(&req.key.conversation_id, req.targets[0], &req.key.fingerprint, req.sample_index);
                Self::render(MockResponse::Feedback(fb))?
            }
            None => {
                let map = req
                    .targets
                    .iter()
                    .map(|&t| (t, self.default_for(&req.key.conversation_id, t, "chunk", req.sample_index)))
                    .collect();
                Self::render(MockResponse::Chunk(map))?
            }
        };
        Ok(GenerationResponse { text, prompt_tokens: None, completion_tokens: None })
    }

    fn label_masses(&self, req: &LabelRequest) -> Result<(f64, f64), BackendError> {
        self.tick()?;
        Ok(self.label_for(req))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        self.tick()?;
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}
