//! Group-relative advantages and a toy categorical policy trained with them.
//!
//! The toy policy has one logit per candidate keyword subset. Each step
//! samples a group of `G` candidates, scores them with the verifiable
//! rewards, normalizes rewards within the group and applies the
//! score-function gradient `A_i * (onehot(a_i) - softmax(logits))`. There is
//! no critic and no reference-policy penalty.

use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use super::rewards::{score_summary, RewardBreakdown, RewardConfig};
use super::{parse_summary, render_summary_prompt, KeywordSummary};
use crate::backends::BackendSuite;
use crate::corpus::Item;
use crate::error::{Error, Result};
use crate::text::top_tokens;
use crate::util::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub std_epsilon: f64,
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            std_epsilon: 1e-6,
            learning_rate: 0.1,
            steps: 200,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if !(self.std_epsilon > 0.0) {
            return Err(Error::Config("std_epsilon must be > 0".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// `(R_i - mean) / (population std + eps)`.
pub fn grpo_advantages(rewards: &[f64], std_epsilon: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Invalid(format!("group of size {} (need >= 2)", rewards.len())));
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g;
    let denom = var.sqrt() + std_epsilon;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Enumerated keyword subsets that form the toy policy's action space.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSpace {
    pub candidates: Vec<KeywordSummary>,
}

impl CandidateSpace {
    /// All subsets of the item's `top` most frequent text tokens with sizes in
    /// `min_size..=max_size`, smaller subsets first.
    pub fn from_item(item: &Item, top: usize, min_size: usize, max_size: usize) -> Self {
        let tokens = top_tokens(&item.text(), top);
        let mut candidates = Vec::new();
        for size in min_size..=max_size.min(tokens.len()) {
            let mut combo: Vec<usize> = (0..size).collect();
            loop {
                let picked: Vec<&String> = combo.iter().map(|&i| &tokens[i]).collect();
                candidates.push(KeywordSummary::new(&item.item_id, Vec::<String>::new(), picked));
                // Advance to the next lexicographic combination.
                let mut i = size;
                while i > 0 && combo[i - 1] == tokens.len() - size + i - 1 {
                    i -= 1;
                }
                if i == 0 {
                    break;
                }
                combo[i - 1] += 1;
                for j in i..size {
                    combo[j] = combo[j - 1] + 1;
                }
            }
        }
        Self { candidates }
    }

    /// Candidate space with the default shape: top 8 tokens, sizes 2 to 6.
    pub fn default_for(item: &Item) -> Self {
        Self::from_item(item, 8, 2, 6)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoStep {
    pub step: usize,
    pub mean_reward: f64,
    /// Largest policy probability after the update.
    pub max_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoTrace {
    pub item_id: String,
    pub steps: Vec<GrpoStep>,
    pub final_logits: Vec<f64>,
    /// Index of the most probable candidate at the end.
    pub best_candidate: usize,
}

impl GrpoTrace {
    /// Mean of the per-step mean rewards over `range`.
    pub fn window_mean(&self, range: std::ops::Range<usize>) -> f64 {
        let w = &self.steps[range];
        w.iter().map(|s| s.mean_reward).sum::<f64>() / w.len() as f64
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Trains the toy categorical policy over `space` and records the mean group
/// reward of every step.
pub fn grpo_toy_optimize(
    item: &Item,
    space: &CandidateSpace,
    suite: &BackendSuite,
    rewards: &RewardConfig,
    config: &GrpoConfig,
    seed: u64,
) -> Result<GrpoTrace> {
    config.validate()?;
    if space.is_empty() {
        return Err(Error::Invalid(format!("empty candidate space for item {}", item.item_id)));
    }
    // Rewards are pure, so each candidate is scored once.
    let table: Vec<f64> = space
        .candidates
        .iter()
        .map(|c| score_summary(c, item, suite, rewards).map(|b| b.total))
        .collect::<std::result::Result<_, _>>()?;

    let mut rng = keyed_rng(seed, &["grpo-toy", &item.item_id]);
    let mut logits = vec![0.0; space.len()];
    let mut steps = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let probs = softmax(&logits);
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::Invalid(e.to_string()))?;
        let actions: Vec<usize> = (0..config.group_size).map(|_| dist.sample(&mut rng)).collect();
        let group: Vec<f64> = actions.iter().map(|&a| table[a]).collect();
        let adv = grpo_advantages(&group, config.std_epsilon)?;
        let mut grad = vec![0.0; logits.len()];
        for (&a, &ai) in actions.iter().zip(&adv) {
            for (b, g) in grad.iter_mut().enumerate() {
                let indicator = if b == a { 1.0 } else { 0.0 };
                *g += ai * (indicator - probs[b]);
            }
        }
        for (l, g) in logits.iter_mut().zip(&grad) {
            *l += config.learning_rate * g;
        }
        let after = softmax(&logits);
        steps.push(GrpoStep {
            step,
            mean_reward: group.iter().sum::<f64>() / group.len() as f64,
            max_prob: after.iter().cloned().fold(0.0, f64::max),
        });
    }
    let best_candidate = logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(GrpoTrace {
        item_id: item.item_id.clone(),
        steps,
        final_logits: logits,
        best_candidate,
    })
}

/// One (prompt, completion, advantage) sample for an external RL trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub item_id: String,
    pub prompt: String,
    pub completion: String,
    pub reward_breakdown: RewardBreakdown,
    pub advantage: f64,
    pub group_id: String,
}

/// Scores a group of sampled completions for one item and attaches
/// group-relative advantages. Completions that do not parse get a zero
/// reward.
pub fn rollout_group(
    item: &Item,
    completions: &[String],
    suite: &BackendSuite,
    rewards: &RewardConfig,
    std_epsilon: f64,
    group_id: &str,
) -> Result<Vec<AdvantageRecord>> {
    let prompt = render_summary_prompt(item).text;
    let zero = RewardBreakdown {
        r_info: 0.0,
        r_recon: 0.0,
        r_len: 0.0,
        total: 0.0,
        token_count: 0,
    };
    let breakdowns: Vec<RewardBreakdown> = completions
        .iter()
        .map(|c| match parse_summary(c, &item.item_id) {
            Ok(s) => score_summary(&s, item, suite, rewards).map_err(Error::from),
            Err(_) => Ok(zero),
        })
        .collect::<Result<_>>()?;
    let totals: Vec<f64> = breakdowns.iter().map(|b| b.total).collect();
    let adv = grpo_advantages(&totals, std_epsilon)?;
    Ok(completions
        .iter()
        .zip(breakdowns)
        .zip(adv)
        .map(|((c, b), a)| AdvantageRecord {
            item_id: item.item_id.clone(),
            prompt: prompt.clone(),
            completion: c.clone(),
            reward_breakdown: b,
            advantage: a,
            group_id: group_id.to_string(),
        })
        .collect())
}
