use std::collections::{BTreeMap, HashMap, HashSet};

use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    BackendError, Embedder, FirstTokenModel, FirstTokenRequest, GenerateRequest, Generator, TokenDistribution,
    TokenScorer,
};
use crate::summarizer::format_summary;
use crate::text::{fnv1a64, tokenize, top_tokens};
use crate::util::{keyed_rng, normalize, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockMode {
    /// Yes-probability driven by keyword overlap, optionally told the label.
    Oracle,
    /// Yes-probability uniform on (0, 1), seeded per (user, item).
    Random,
}

impl MockMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MockMode::Oracle => "oracle",
            MockMode::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockState {
    pub seed: u64,
    pub mode: MockMode,
    pub embed_dim: usize,
    /// Additive smoothing of the unigram scorer.
    pub smoothing: f64,
    /// Virtual vocabulary size of the unigram scorer.
    pub vocab: f64,
    /// Keywords per list in generated summaries.
    pub summary_keywords: usize,
}

impl Default for MockState {
    fn default() -> Self {
        Self {
            seed: 42,
            mode: MockMode::Oracle,
            embed_dim: 256,
            smoothing: 1.0,
            vocab: 65536.0,
            summary_keywords: 4,
        }
    }
}

impl MockState {
    pub fn with_mode(mode: MockMode, seed: u64) -> Self {
        Self {
            seed,
            mode,
            ..Self::default()
        }
    }
}

/// Deterministic backend; every output is a pure function of the state and
/// the request.
#[derive(Debug, Clone)]
pub struct MockBackend {
    state: MockState,
}

impl MockBackend {
    pub fn new(state: MockState) -> Self {
        Self { state }
    }

    pub fn state(&self) -> &MockState {
        &self.state
    }

    /// Signed feature hashing of the token bag, L2-normalized.
    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let d = self.state.embed_dim;
        let mut v = vec![0.0; d];
        for tok in tokenize(text) {
            let h = fnv1a64(tok.as_bytes());
            let sign = if (h >> 8) & 1 == 1 { 1.0 } else { -1.0 };
            v[(h % d as u64) as usize] += sign;
        }
        normalize(&mut v);
        v
    }

    /// Smoothed unigram log-probabilities over the conditioning tokens.
    pub fn unigram_logprobs(&self, conditioning: &[String], targets: &[String]) -> Vec<f64> {
        let mut counts: HashMap<String, f64> = HashMap::new();
        let mut total = 0.0;
        for kw in conditioning {
            for t in tokenize(kw) {
                *counts.entry(t).or_default() += 1.0;
                total += 1.0;
            }
        }
        let lambda = self.state.smoothing;
        let denom = total + lambda * self.state.vocab;
        targets
            .iter()
            .map(|w| {
                let c = counts.get(&w.to_lowercase()).copied().unwrap_or(0.0);
                ((c + lambda) / denom).ln()
            })
            .collect()
    }

    /// `Cover:` / `Content:` summary from the caption and the item text.
    pub fn summary_for(&self, item: &crate::corpus::Item) -> String {
        let m = self.state.summary_keywords;
        let content = top_tokens(&item.text(), m);
        let cover = top_tokens(&item.image_ref, m);
        format_summary(&cover, &content)
    }

    /// Yes-probability for a pointwise prompt.
    pub fn yes_probability(&self, f: &super::PromptFeatures) -> f64 {
        match self.state.mode {
            MockMode::Oracle => {
                let p = sigmoid(8.0 * (jaccard(&f.context_keywords, &f.candidate_keywords) - 0.05));
                if f.label_hint == Some(true) {
                    p.max(0.99)
                } else {
                    p
                }
            }
            MockMode::Random => {
                let mut rng = keyed_rng(self.state.seed, &["first-token", &f.user_id, &f.item_id]);
                rng.sample(Open01)
            }
        }
    }
}

/// Jaccard overlap of two keyword sets; 0 when both are empty.
pub fn jaccard(a: &[String], b: &[String]) -> f64 {
    let a: HashSet<&str> = a.iter().map(String::as_str).collect();
    let b: HashSet<&str> = b.iter().map(String::as_str).collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

impl Generator for MockBackend {
    fn generate(&self, req: &GenerateRequest<'_>) -> Result<String, BackendError> {
        match req.item {
            Some(item) => Ok(self.summary_for(item)),
            None => Err(BackendError::Unsupported(
                "mock generator only produces item summaries".into(),
            )),
        }
    }
}

impl TokenScorer for MockBackend {
    fn token_logprobs(&self, conditioning: &[String], continuation: &[String]) -> Result<Vec<f64>, BackendError> {
        Ok(self.unigram_logprobs(conditioning, continuation))
    }
}

impl Embedder for MockBackend {
    fn dim(&self) -> usize {
        self.state.embed_dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        Ok(self.embed_text(text))
    }
}

impl FirstTokenModel for MockBackend {
    fn first_token(&self, req: &FirstTokenRequest<'_>) -> Result<TokenDistribution, BackendError> {
        let p = self.yes_probability(req.features);
        Ok(TokenDistribution(BTreeMap::from([
            ("Yes".to_string(), p),
            ("No".to_string(), 1.0 - p),
        ])))
    }
}
