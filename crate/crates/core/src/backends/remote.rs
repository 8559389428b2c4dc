//! HTTP+JSON adapter for a remote model server. Field names are documented in
//! `docs/protocol.md`.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    BackendError, Embedder, FirstTokenModel, FirstTokenRequest, GenerateRequest, Generator, TokenDistribution,
    TokenScorer,
};
use crate::util::normalize;

pub const CAP_GENERATE: &str = "generate";
pub const CAP_TOKEN_LOGPROBS: &str = "token_logprobs";
pub const CAP_FIRST_TOKEN: &str = "first_token_logprobs";
pub const CAP_EMBED: &str = "embed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    /// Embedding server; defaults to `base_url`.
    pub embedding_url: Option<String>,
    pub timeout_ms: u64,
    /// Extra attempts after the first failure.
    pub retries: usize,
    pub max_in_flight: usize,
    pub max_tokens: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            embedding_url: None,
            timeout_ms: 30_000,
            retries: 2,
            max_in_flight: 8,
            max_tokens: 128,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CapabilitiesResponse {
    pub capabilities: Vec<String>,
    #[serde(default)]
    pub embedding_dim: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateBody {
    pub messages: Vec<Message>,
    pub images: Vec<String>,
    pub max_tokens: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreBody {
    pub context: String,
    pub continuation: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub token_logprobs: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FirstTokenBody {
    pub messages: Vec<Message>,
    pub images: Vec<String>,
    pub top_k: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FirstTokenResponse {
    pub logprobs: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedBody {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vector: Vec<f64>,
}

/// Counting semaphore capping concurrent requests.
#[derive(Debug)]
struct InFlight {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for the remote protocol. Safe to share across threads.
#[derive(Debug)]
pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    embed_dim: usize,
    in_flight: InFlight,
}

fn user_messages(text: &str) -> Vec<Message> {
    vec![Message {
        role: "user".into(),
        content: text.into(),
    }]
}

impl RemoteBackend {
    /// Connects and checks capabilities up front; a server without
    /// log-probabilities or embeddings is rejected here rather than at the
    /// first call.
    pub fn connect(config: RemoteConfig) -> Result<Self, BackendError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let mut backend = Self {
            in_flight: InFlight {
                cap: config.max_in_flight.max(1),
                used: Mutex::new(0),
                freed: Condvar::new(),
            },
            config,
            agent,
            embed_dim: 0,
        };
        let caps: CapabilitiesResponse = backend.get(&backend.url("/v1/capabilities"))?;
        for need in [CAP_GENERATE, CAP_TOKEN_LOGPROBS, CAP_FIRST_TOKEN] {
            if !caps.capabilities.iter().any(|c| c == need) {
                return Err(BackendError::Capability(need.into()));
            }
        }
        let embed_caps: CapabilitiesResponse = match &backend.config.embedding_url {
            Some(_) => backend.get(&backend.embed_url("/v1/capabilities"))?,
            None => caps,
        };
        if !embed_caps.capabilities.iter().any(|c| c == CAP_EMBED) {
            return Err(BackendError::Capability(CAP_EMBED.into()));
        }
        backend.embed_dim = embed_caps
            .embedding_dim
            .ok_or_else(|| BackendError::Capability("embedding_dim".into()))?;
        Ok(backend)
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn embed_url(&self, path: &str) -> String {
        let base = self.config.embedding_url.as_deref().unwrap_or(&self.config.base_url);
        format!("{}{}", base.trim_end_matches('/'), path)
    }

    fn get<R: DeserializeOwned>(&self, url: &str) -> Result<R, BackendError> {
        self.with_retries(|| self.agent.get(url).call())
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, url: &str, body: &B) -> Result<R, BackendError> {
        self.with_retries(|| self.agent.post(url).send_json(body))
    }

    /// Transport failures and 5xx answers are retried; 4xx answers and
    /// undecodable bodies are not.
    fn with_retries<R: DeserializeOwned>(
        &self,
        call: impl Fn() -> Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<R, BackendError> {
        let _slot = self.in_flight.acquire();
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match call() {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status >= 500 {
                        last = format!("HTTP {status}");
                    } else if status >= 400 {
                        return Err(BackendError::Protocol(format!("HTTP {status}")));
                    } else {
                        return resp
                            .body_mut()
                            .read_json::<R>()
                            .map_err(|e| BackendError::Protocol(e.to_string()));
                    }
                }
                Err(e) => last = e.to_string(),
            }
            log::debug!("remote attempt {attempt}/{attempts} failed: {last}");
        }
        Err(BackendError::Unavailable {
            attempts,
            message: last,
        })
    }
}

impl Generator for RemoteBackend {
    fn generate(&self, req: &GenerateRequest<'_>) -> Result<String, BackendError> {
        let body = GenerateBody {
            messages: user_messages(&req.prompt.text),
            images: req.prompt.media.clone(),
            max_tokens: req.max_tokens,
        };
        let resp: GenerateResponse = self.post(&self.url("/v1/generate"), &body)?;
        Ok(resp.text)
    }
}

impl TokenScorer for RemoteBackend {
    fn token_logprobs(&self, conditioning: &[String], continuation: &[String]) -> Result<Vec<f64>, BackendError> {
        let body = ScoreBody {
            context: crate::promptkit::reconstruction_text(conditioning),
            continuation: continuation.to_vec(),
        };
        let resp: ScoreResponse = self.post(&self.url("/v1/score"), &body)?;
        if resp.token_logprobs.len() != continuation.len() {
            return Err(BackendError::Protocol(format!(
                "expected {} log-probs, got {}",
                continuation.len(),
                resp.token_logprobs.len()
            )));
        }
        if resp.token_logprobs.iter().any(|lp| !(*lp <= 0.0)) {
            return Err(BackendError::Protocol("log-probability above 0 or NaN".into()));
        }
        Ok(resp.token_logprobs)
    }
}

impl Embedder for RemoteBackend {
    fn dim(&self) -> usize {
        self.embed_dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let resp: EmbedResponse = self.post(&self.embed_url("/v1/embed"), &EmbedBody { text: text.into() })?;
        if resp.vector.len() != self.embed_dim {
            return Err(BackendError::Protocol(format!(
                "embedding of length {}, expected {}",
                resp.vector.len(),
                self.embed_dim
            )));
        }
        let mut v = resp.vector;
        normalize(&mut v);
        Ok(v)
    }
}

impl FirstTokenModel for RemoteBackend {
    fn first_token(&self, req: &FirstTokenRequest<'_>) -> Result<TokenDistribution, BackendError> {
        let body = FirstTokenBody {
            messages: user_messages(&req.prompt.text),
            images: req.prompt.media.clone(),
            top_k: req.top_k,
        };
        let resp: FirstTokenResponse = self.post(&self.url("/v1/first_token"), &body)?;
        Ok(TokenDistribution(
            resp.logprobs.into_iter().map(|(t, lp)| (t, lp.exp())).collect(),
        ))
    }
}
