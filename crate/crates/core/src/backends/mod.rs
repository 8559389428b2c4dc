//! Model-backend contracts used by every stage.
//!
//! A [`BackendSuite`] bundles the four capabilities the pipeline needs:
//! text generation, per-token log-probabilities of a continuation, text
//! embedding and the first-token distribution of a prompt. Each capability is
//! its own trait so that, for example, a frozen scorer can sit next to a
//! generator under training.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::Item;

mod mock;
mod remote;

pub use mock::{MockBackend, MockMode, MockState};
pub use remote::{RemoteBackend, RemoteConfig};

#[derive(Debug, Clone, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: usize, message: String },
    #[error("backend lacks capability: {0}")]
    Capability(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("unsupported request: {0}")]
    Unsupported(String),
}

/// Prompt text plus the media referenced by its `<image>` slots, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub media: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct GenerateRequest<'a> {
    pub prompt: &'a Prompt,
    pub max_tokens: usize,
    /// The item being summarized. Real backends ignore it; the mock reads
    /// its fields instead of understanding the prompt.
    pub item: Option<&'a Item>,
}

/// Structured view of a pointwise scoring prompt, consumed by the mock.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptFeatures {
    /// User keywords plus, when present, neighbor keywords.
    pub context_keywords: Vec<String>,
    pub candidate_keywords: Vec<String>,
    /// Whether the candidate is the ground-truth next item, when the caller
    /// chooses to reveal it.
    pub label_hint: Option<bool>,
    pub user_id: String,
    pub item_id: String,
}

#[derive(Debug, Clone)]
pub struct FirstTokenRequest<'a> {
    pub prompt: &'a Prompt,
    pub top_k: usize,
    pub features: &'a PromptFeatures,
}

/// Probability mass per candidate first token. Masses are non-negative and
/// sum to at most 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution(pub BTreeMap<String, f64>);

impl TokenDistribution {
    pub fn mass(&self, tokens: &[String]) -> f64 {
        tokens.iter().filter_map(|t| self.0.get(t)).sum()
    }
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenerateRequest<'_>) -> Result<String, BackendError>;
}

pub trait TokenScorer: Send + Sync {
    /// One log-probability (≤ 0) per continuation token, conditioned on the
    /// keyword list.
    fn token_logprobs(&self, conditioning: &[String], continuation: &[String]) -> Result<Vec<f64>, BackendError>;
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    /// A vector of length [`Embedder::dim`], unit-norm or all-zero.
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

pub trait FirstTokenModel: Send + Sync {
    fn first_token(&self, req: &FirstTokenRequest<'_>) -> Result<TokenDistribution, BackendError>;
}

#[derive(Clone)]
pub struct BackendSuite {
    pub generator: Arc<dyn Generator>,
    pub token_scorer: Arc<dyn TokenScorer>,
    pub embedder: Arc<dyn Embedder>,
    pub first_token: Arc<dyn FirstTokenModel>,
    /// Short description echoed into reports, e.g. `mock-oracle`.
    pub label: String,
}

impl BackendSuite {
    pub fn mock(state: MockState) -> Self {
        let label = format!("mock-{}", state.mode.as_str());
        let m = Arc::new(MockBackend::new(state));
        Self {
            generator: m.clone(),
            token_scorer: m.clone(),
            embedder: m.clone(),
            first_token: m,
            label,
        }
    }

    pub fn remote(config: RemoteConfig) -> Result<Self, BackendError> {
        let label = format!("remote:{}", config.base_url);
        let r = Arc::new(RemoteBackend::connect(config)?);
        Ok(Self {
            generator: r.clone(),
            token_scorer: r.clone(),
            embedder: r.clone(),
            first_token: r,
            label,
        })
    }
}

impl std::fmt::Debug for BackendSuite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendSuite").field("label", &self.label).finish()
    }
}
