//! First-token scoring, ranking and HR@K / NDCG@K / AUC evaluation.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, FirstTokenModel, FirstTokenRequest, PromptFeatures, TokenDistribution};
use crate::corpus::{Impression, ItemCatalog};
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_json};
use crate::promptkit::{render_pointwise, user_keywords};
use crate::summarizer::KeywordStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub yes_tokens: Vec<String>,
    pub no_tokens: Vec<String>,
    /// How many first-token alternatives to request from the backend.
    pub top_k: usize,
    /// Cutoff for HR and NDCG.
    pub cutoff: usize,
    /// Tell the backend which candidate is the positive. Only the mock uses
    /// this (the oracle then guarantees the positive wins); turn it off to
    /// rank by keyword overlap alone.
    pub reveal_label_to_backend: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        Self {
            yes_tokens: s(&["Yes", "yes", " Yes"]),
            no_tokens: s(&["No", "no", " No"]),
            top_k: 20,
            cutoff: 5,
            reveal_label_to_backend: true,
        }
    }
}

/// `p = mass(yes) / (mass(yes) + mass(no))`; `(0.5, true)` when both masses are zero.
pub fn yes_probability(dist: &TokenDistribution, yes: &[String], no: &[String]) -> (f64, bool) {
    let y = dist.mass(yes);
    let n = dist.mass(no);
    if y + n <= 0.0 {
        (0.5, true)
    } else {
        (y / (y + n), false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub item_id: String,
    pub yes_prob: f64,
    /// 1-based, 0 until [`rank`] assigns it.
    pub rank: usize,
    pub is_positive: bool,
}

/// Prompt context of one impression.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImpressionContext {
    pub user_keywords: Vec<String>,
    /// `None` drops the neighbor section from the prompt.
    pub neighbor_keywords: Option<Vec<String>>,
}

impl ImpressionContext {
    pub fn new(history: &[String], store: &KeywordStore, neighbor_keywords: Option<Vec<String>>) -> Self {
        Self {
            user_keywords: user_keywords(history, store),
            neighbor_keywords,
        }
    }

    fn all_keywords(&self) -> Vec<String> {
        let mut out = self.user_keywords.clone();
        if let Some(nk) = &self.neighbor_keywords {
            out.extend(nk.iter().cloned());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredImpression {
    pub candidates: Vec<ScoredCandidate>,
    /// Candidates whose distribution had no yes or no mass.
    pub degenerate: usize,
}

/// One pointwise prompt and one first-token query per candidate (positive first).
pub fn score_impression(
    imp: &Impression,
    ctx: &ImpressionContext,
    catalog: &ItemCatalog,
    store: &KeywordStore,
    model: &dyn FirstTokenModel,
    cfg: &ScoringConfig,
) -> std::result::Result<ScoredImpression, BackendError> {
    let context_keywords = ctx.all_keywords();
    let mut candidates = Vec::with_capacity(imp.negatives.len() + 1);
    let mut degenerate = 0;
    for (idx, item_id) in imp.candidates().enumerate() {
        let is_positive = idx == 0;
        let item = catalog
            .get(item_id)
            .ok_or_else(|| BackendError::Protocol(format!("candidate {item_id} is not in the catalog")))?;
        let prompt = render_pointwise(&ctx.user_keywords, ctx.neighbor_keywords.as_deref(), item).prompt();
        let features = PromptFeatures {
            context_keywords: context_keywords.clone(),
            candidate_keywords: store.keywords(item_id),
            label_hint: cfg.reveal_label_to_backend.then_some(is_positive),
            user_id: imp.user_id.clone(),
            item_id: item_id.to_string(),
        };
        let dist = model.first_token(&FirstTokenRequest {
            prompt: &prompt,
            top_k: cfg.top_k,
            features: &features,
        })?;
        let (p, degen) = yes_probability(&dist, &cfg.yes_tokens, &cfg.no_tokens);
        if !p.is_finite() {
            return Err(BackendError::Protocol(format!("non-finite yes-probability for {item_id}")));
        }
        degenerate += degen as usize;
        candidates.push(ScoredCandidate {
            item_id: item_id.to_string(),
            yes_prob: p,
            rank: 0,
            is_positive,
        });
    }
    Ok(ScoredImpression { candidates, degenerate })
}

/// Sorts by descending probability, ties by item id, and assigns ranks from 1.
pub fn rank(mut scored: Vec<ScoredCandidate>) -> Vec<ScoredCandidate> {
    scored.sort_by(|a, b| b.yes_prob.total_cmp(&a.yes_prob).then_with(|| a.item_id.cmp(&b.item_id)));
    for (i, c) in scored.iter_mut().enumerate() {
        c.rank = i + 1;
    }
    scored
}

pub fn hit_rate_at_k(positive_rank: usize, k: usize) -> f64 {
    if positive_rank >= 1 && positive_rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Single-relevant-item NDCG: `1 / log2(rank + 1)` inside the cutoff.
pub fn ndcg_at_k(positive_rank: usize, k: usize) -> f64 {
    if positive_rank >= 1 && positive_rank <= k {
        1.0 / ((positive_rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Share of negatives scored strictly below the positive, ties counting half.
pub fn auc(scored: &[ScoredCandidate]) -> f64 {
    let Some(pos) = scored.iter().find(|c| c.is_positive) else {
        return 0.0;
    };
    let negs: Vec<f64> = scored.iter().filter(|c| !c.is_positive).map(|c| c.yes_prob).collect();
    if negs.is_empty() {
        return 1.0;
    }
    let credit: f64 = negs
        .iter()
        .map(|&n| match pos.yes_prob.total_cmp(&n) {
            std::cmp::Ordering::Greater => 1.0,
            std::cmp::Ordering::Equal => 0.5,
            std::cmp::Ordering::Less => 0.0,
        })
        .sum();
    credit / negs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRow {
    pub user_id: String,
    pub positive: String,
    pub positive_rank: usize,
    pub hit: f64,
    pub ndcg: f64,
    pub auc: f64,
}

/// Settings echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub history_len: usize,
    pub neighbors_k: usize,
    pub seed: u64,
    pub backend: String,
    pub reveal_label_to_backend: bool,
}

/// Means over scored impressions, times 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub cutoff: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub impressions: usize,
    pub scored: usize,
    pub failed: usize,
    pub degenerate_distributions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ConfigEcho,
    pub aggregates: Aggregates,
    pub counts: EvalCounts,
    pub rows: Vec<UserRow>,
}

/// Aggregates over rows; all zero for no rows.
pub fn aggregate(rows: &[UserRow], cutoff: usize) -> Aggregates {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&UserRow) -> f64| 100.0 * rows.iter().map(f).sum::<f64>() / n;
    Aggregates {
        cutoff,
        hr: mean(|r| r.hit),
        ndcg: mean(|r| r.ndcg),
        auc: mean(|r| r.auc),
    }
}

/// Scores every impression (in parallel) and aggregates. `contexts[i]`
/// belongs to `impressions[i]`. Failed impressions are counted and left out
/// of the means; the run fails only when nothing could be scored.
pub fn evaluate(
    impressions: &[Impression],
    contexts: &[ImpressionContext],
    catalog: &ItemCatalog,
    store: &KeywordStore,
    model: &dyn FirstTokenModel,
    cfg: &ScoringConfig,
    echo: ConfigEcho,
) -> Result<EvalReport> {
    if impressions.len() != contexts.len() {
        return Err(Error::Invalid(format!(
            "{} impressions but {} contexts",
            impressions.len(),
            contexts.len()
        )));
    }
    let degenerate = AtomicUsize::new(0);
    let rows: Vec<Option<UserRow>> = impressions
        .par_iter()
        .zip(contexts.par_iter())
        .map(|(imp, ctx)| match score_impression(imp, ctx, catalog, store, model, cfg) {
            Ok(s) => {
                degenerate.fetch_add(s.degenerate, Ordering::Relaxed);
                let a = auc(&s.candidates);
                let ranked = rank(s.candidates);
                let r = ranked.iter().find(|c| c.is_positive).map_or(0, |c| c.rank);
                Some(UserRow {
                    user_id: imp.user_id.clone(),
                    positive: imp.positive.clone(),
                    positive_rank: r,
                    hit: hit_rate_at_k(r, cfg.cutoff),
                    ndcg: ndcg_at_k(r, cfg.cutoff),
                    auc: a,
                })
            }
            Err(e) => {
                log::warn!("user {}: impression failed: {e}", imp.user_id);
                None
            }
        })
        .collect();
    let failed = rows.iter().filter(|r| r.is_none()).count();
    let rows: Vec<UserRow> = rows.into_iter().flatten().collect();
    if rows.is_empty() {
        return Err(Error::Invalid(format!("all {} impressions failed to score", impressions.len())));
    }
    Ok(EvalReport {
        config: echo,
        aggregates: aggregate(&rows, cfg.cutoff),
        counts: EvalCounts {
            impressions: impressions.len(),
            scored: rows.len(),
            failed,
            degenerate_distributions: degenerate.into_inner(),
        },
        rows,
    })
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// One row per scored impression.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| {
            let mut out = csv::Writer::from_writer(w);
            for r in &self.rows {
                out.serialize(r).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
            }
            out.flush().map_err(|e| Error::io(path, e))
        })
    }

    /// Short human-readable summary.
    pub fn summary_line(&self) -> String {
        format!(
            "{} n={} k={}: HR@{c}={:.2} NDCG@{c}={:.2} AUC={:.2} ({} scored, {} failed)",
            self.config.backend,
            self.config.history_len,
            self.config.neighbors_k,
            self.aggregates.hr,
            self.aggregates.ndcg,
            self.aggregates.auc,
            self.counts.scored,
            self.counts.failed,
            c = self.aggregates.cutoff,
        )
    }
}
