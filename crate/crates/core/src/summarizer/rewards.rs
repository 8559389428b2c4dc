use serde::{Deserialize, Serialize};

use super::KeywordSummary;
use crate::backends::{BackendError, BackendSuite, Embedder, TokenScorer};
use crate::corpus::Item;
use crate::error::{Error, Result};
use crate::text::tokenize;
use crate::util::cosine;

/// Weights of the information, reconstruction and length rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.05,
        }
    }
}

impl RewardWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.alpha, self.beta, self.gamma];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("reward weights must be finite and >= 0: {ws:?}")));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one reward weight must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    /// Perplexity ceiling applied before negation; `None` disables it.
    pub recon_clamp: Option<f64>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            recon_clamp: Some(100.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_info: f64,
    pub r_recon: f64,
    pub r_len: f64,
    pub total: f64,
    /// N, the number of reconstruction target tokens.
    pub token_count: usize,
}

/// Cosine between the embedding of the joined keywords (cover then content)
/// and the embedding of the item text; 0 when either embedding is all-zero.
pub fn reward_info(summary: &KeywordSummary, item_text: &str, embedder: &dyn Embedder) -> Result<f64, BackendError> {
    let a = embedder.embed(&summary.joined())?;
    let b = embedder.embed(item_text)?;
    Ok(cosine(&a, &b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconReward {
    pub value: f64,
    pub token_count: usize,
    /// The item text had no tokens and the value is the −1 limit.
    pub degenerate: bool,
}

/// Negative perplexity of the item text given the summary keywords,
/// optionally with the perplexity capped at `clamp`.
pub fn reward_recon(
    summary: &KeywordSummary,
    item_text: &str,
    scorer: &dyn TokenScorer,
    clamp: Option<f64>,
) -> Result<ReconReward, BackendError> {
    let target = tokenize(item_text);
    if target.is_empty() {
        log::warn!("item {}: empty reconstruction target, using -1", summary.item_id);
        return Ok(ReconReward {
            value: -1.0,
            token_count: 0,
            degenerate: true,
        });
    }
    let conditioning: Vec<String> = summary.all_keywords().cloned().collect();
    let lps = scorer.token_logprobs(&conditioning, &target)?;
    if lps.len() != target.len() {
        return Err(BackendError::Protocol(format!(
            "scorer returned {} log-probs for {} tokens",
            lps.len(),
            target.len()
        )));
    }
    let mean = lps.iter().sum::<f64>() / target.len() as f64;
    let mut perplexity = (-mean).exp();
    if let Some(c) = clamp {
        perplexity = perplexity.min(c);
    }
    Ok(ReconReward {
        value: -perplexity,
        token_count: target.len(),
        degenerate: false,
    })
}

/// Minus the keyword count.
pub fn reward_len(summary: &KeywordSummary) -> f64 {
    -(summary.len() as f64)
}

pub fn total_reward(r_info: f64, r_recon: f64, r_len: f64, token_count: usize, w: &RewardWeights) -> RewardBreakdown {
    RewardBreakdown {
        r_info,
        r_recon,
        r_len,
        total: w.alpha * r_info + w.beta * r_recon + w.gamma * r_len,
        token_count,
    }
}

/// All three rewards and their weighted total for one summary of `item`.
pub fn score_summary(
    summary: &KeywordSummary,
    item: &Item,
    suite: &BackendSuite,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, BackendError> {
    let text = item.text();
    let info = reward_info(summary, &text, suite.embedder.as_ref())?;
    let recon = reward_recon(summary, &text, suite.token_scorer.as_ref(), cfg.recon_clamp)?;
    Ok(total_reward(info, recon.value, reward_len(summary), recon.token_count, &cfg.weights))
}
