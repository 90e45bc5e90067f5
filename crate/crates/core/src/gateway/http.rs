//! Chat-completion style HTTP backend.
//!
//! * generation: `POST {endpoint}{chat_path}` with
//!   `{"model", "messages": [{"role": "user", "content"}], "temperature", "max_tokens", "seed"}`;
//!   reads `choices[0].message.content` and `usage`.
//! * label masses: same path with `max_tokens: 1`, `temperature: 0`,
//!   `logprobs: true`, `top_logprobs: 20`; sums `exp(logprob)` of the
//!   candidate tokens that read `true` / `false` after trimming and
//!   lowercasing.
//! * embeddings: `POST {endpoint}{embeddings_path}` with `{"model", "input"}`;
//!   reads `data[].embedding`, ordered by `data[].index`.
//!
//! The bearer token is read from the environment variable named by the
//! profile's `api_key_env`, when set.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{Backend, BackendError, BackendProfile, GenerationRequest, GenerationResponse, LabelRequest};

pub struct HttpBackend {
    client: Client,
    chat_url: String,
    embeddings_url: String,
    model: String,
    embedding_model: String,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

#[derive(Deserialize)]
struct Logprobs {
    content: Vec<TokenLogprob>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    index: usize,
    embedding: Vec<f64>,
}

impl HttpBackend {
    pub fn new(profile: &BackendProfile) -> Result<Self, String> {
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(profile.timeout_secs))
            .build()
            .map_err(|e| format!("http client: {e}"))?;
        let base = profile.endpoint.trim_end_matches('/');
        Ok(HttpBackend {
            client,
            chat_url: format!("{base}{}", profile.chat_path),
            embeddings_url: format!("{base}{}", profile.embeddings_path),
            model: profile.model.clone(),
            embedding_model: profile.embedding_model.clone(),
            api_key: std::env::var(&profile.api_key_env).ok().filter(|k| !k.is_empty()),
        })
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, BackendError> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let status = resp.status();
        if status == StatusCode::TOO_MANY_REQUESTS {
            return Err(BackendError::RateLimited);
        }
        if status.is_server_error() {
            return Err(BackendError::Unavailable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(BackendError::Protocol(format!("HTTP {status}: {text}")));
        }
        resp.json().map_err(|e| BackendError::Protocol(format!("invalid JSON body: {e}")))
    }

    fn chat(&self, body: &Value) -> Result<ChatResponse, BackendError> {
        let v = self.post(&self.chat_url, body)?;
        serde_json::from_value(v).map_err(|e| BackendError::Protocol(format!("unexpected chat response: {e}")))
    }
}

/// Sums label probability mass over candidate tokens.
fn label_mass(choice: &Choice) -> (f64, f64) {
    let Some(lp) = &choice.logprobs else { return (0.0, 0.0) };
    let Some(first) = lp.content.first() else { return (0.0, 0.0) };
    let mut candidates: Vec<(&str, f64)> = first.top_logprobs.iter().map(|t| (t.token.as_str(), t.logprob)).collect();
    if candidates.is_empty() {
        candidates.push((first.token.as_str(), first.logprob));
    }
    let (mut t, mut f) = (0.0, 0.0);
    for (token, logprob) in candidates {
        match token.trim().to_lowercase().as_str() {
            "true" => t += logprob.exp(),
            "false" => f += logprob.exp(),
            _ => {}
        }
    }
    (t, f)
}

impl Backend for HttpBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "seed": req.sample_index,
        });
        let resp = self.chat(&body)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
        Ok(GenerationResponse {
            text: choice.message.content.unwrap_or_default(),
            prompt_tokens: resp.usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: resp.usage.as_ref().and_then(|u| u.completion_tokens),
        })
    }

    fn label_masses(&self, req: &LabelRequest) -> Result<(f64, f64), BackendError> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": 0.0,
            "max_tokens": 1,
            "logprobs": true,
            "top_logprobs": 20,
        });
        let resp = self.chat(&body)?;
        let choice = resp
            .choices
            .first()
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
        Ok(label_mass(choice))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let body = json!({"model": self.embedding_model, "input": texts});
        let v = self.post(&self.embeddings_url, &body)?;
        let mut resp: EmbeddingResponse =
            serde_json::from_value(v).map_err(|e| BackendError::Protocol(format!("unexpected embeddings response: {e}")))?;
        resp.data.sort_by_key(|d| d.index);
        Ok(resp.data.into_iter().map(|d| d.embedding).collect())
    }
}
