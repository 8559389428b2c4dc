//! Instruction templates for recommendation and the multi-task fine-tuning
//! dataset built from them.
//!
//! Four instruction kinds exist: pointwise (Yes/No for one candidate),
//! multi-classification (pick a serial number among candidates),
//! reconstruction (describe a product from its keywords) and summarization
//! (the stage-1 prompt, targeting the stored keyword summary).

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{Prompt, TokenScorer};
use crate::corpus::{Impression, Item, ItemCatalog};
use crate::error::{Error, Result};
use crate::summarizer::{escape_slots, render_summary_prompt, KeywordStore};
use crate::text::tokenize;
use crate::util::{keyed_rng, largest_remainder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Pointwise,
    Multiclass,
    Reconstruction,
    Summarization,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Pointwise,
        TaskKind::Multiclass,
        TaskKind::Reconstruction,
        TaskKind::Summarization,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub task_kind: TaskKind,
    pub text: String,
    pub media: Vec<String>,
    /// Expected completion; empty at inference time.
    pub target: String,
}

impl PromptInstance {
    pub fn prompt(&self) -> Prompt {
        Prompt {
            text: self.text.clone(),
            media: self.media.clone(),
        }
    }
}

const EXPERT: &str = "You are an expert in recommendation.";

fn keyword_line(keywords: &[String]) -> String {
    escape_slots(&keywords.join(", "))
}

/// User section, then the neighbor section unless neighbors are disabled.
fn context_block(user_keywords: &[String], neighbor_keywords: Option<&[String]>) -> String {
    let mut s = format!(
        "{EXPERT} Below is the list of keywords of the products that the user prefers:\n\n{}\n\n",
        keyword_line(user_keywords)
    );
    if let Some(nk) = neighbor_keywords {
        s.push_str(&format!(
            "Below are the keywords of products that relevant users prefer:\n\n{}\n\n",
            keyword_line(nk)
        ));
    }
    s
}

fn product_line(item: &Item) -> String {
    format!(
        "Cover: <image> Title: {} Description: {}",
        escape_slots(&item.title),
        escape_slots(&item.description)
    )
}

/// The basic Yes/No instruction for one candidate. `neighbor_keywords = None`
/// drops the neighbor section entirely; `Some(&[])` keeps its header with an
/// empty keyword line.
pub fn render_pointwise(
    user_keywords: &[String],
    neighbor_keywords: Option<&[String]>,
    candidate: &Item,
) -> PromptInstance {
    let text = format!(
        "{}The next product: {}\n\n\
         Based on the above information, please predict whether the user is likely to purchase this product. \
         Answer with 'Yes' or 'No'.",
        context_block(user_keywords, neighbor_keywords),
        product_line(candidate)
    );
    PromptInstance {
        task_kind: TaskKind::Pointwise,
        text,
        media: vec![candidate.image_ref.clone()],
        target: String::new(),
    }
}

/// Multi-classification instruction; candidates are numbered from 1 in the
/// given order and `answer` (0-based) becomes the decimal target.
pub fn render_multiclass(
    user_keywords: &[String],
    neighbor_keywords: Option<&[String]>,
    candidates: &[&Item],
    answer: Option<usize>,
    max_candidates: usize,
) -> Result<PromptInstance> {
    if candidates.len() < 2 || candidates.len() > max_candidates {
        return Err(Error::Invalid(format!(
            "multiclass needs 2..={max_candidates} candidates, got {}",
            candidates.len()
        )));
    }
    if let Some(a) = answer.filter(|&a| a >= candidates.len()) {
        return Err(Error::Invalid(format!("answer {a} out of range")));
    }
    let mut text = context_block(user_keywords, neighbor_keywords);
    for (i, c) in candidates.iter().enumerate() {
        text.push_str(&format!("Candidate {}: {}\n\n", i + 1, product_line(c)));
    }
    text.push_str(
        "Based on the above information, please predict which candidate products the user will purchase. \
         Answer with the serial number of this product.",
    );
    Ok(PromptInstance {
        task_kind: TaskKind::Multiclass,
        text,
        media: candidates.iter().map(|c| c.image_ref.clone()).collect(),
        target: answer.map(|a| (a + 1).to_string()).unwrap_or_default(),
    })
}

/// Text of the reconstruction instruction for a keyword list.
pub fn reconstruction_text(keywords: &[String]) -> String {
    format!(
        "{EXPERT} Below are the keywords of a product:\n\n{}\n\n\
         Based on these keywords, please describe this product in its entirety.",
        keyword_line(keywords)
    )
}

/// Reconstruction instruction targeting the item's title and description.
/// `None` when there are no keywords.
pub fn render_reconstruction(keywords: &[String], item: &Item) -> Option<PromptInstance> {
    if keywords.is_empty() {
        return None;
    }
    Some(PromptInstance {
        task_kind: TaskKind::Reconstruction,
        text: reconstruction_text(keywords),
        media: vec![],
        target: item.text(),
    })
}

/// The stage-1 summarization prompt targeting the stored summary. `None` when
/// the item has no stored summary.
pub fn render_summarization(item: &Item, store: &KeywordStore) -> Option<PromptInstance> {
    let summary = store.summary(&item.item_id)?;
    let p = render_summary_prompt(item);
    Some(PromptInstance {
        task_kind: TaskKind::Summarization,
        text: p.text,
        media: p.media,
        target: summary.render(),
    })
}

/// Keywords of a history, oldest item first, without repeats.
pub fn user_keywords(history: &[String], store: &KeywordStore) -> Vec<String> {
    let mut seen = BTreeSet::new();
    history
        .iter()
        .flat_map(|id| store.keywords(id))
        .filter(|k| seen.insert(k.clone()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskMix {
    pub pointwise: u64,
    pub multiclass: u64,
    pub reconstruction: u64,
    pub summarization: u64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self {
            pointwise: 50,
            multiclass: 20,
            reconstruction: 15,
            summarization: 15,
        }
    }
}

impl TaskMix {
    pub fn weights(&self) -> [u64; 4] {
        [self.pointwise, self.multiclass, self.reconstruction, self.summarization]
    }

    /// Instance counts per task for `total` instances. The pointwise count is
    /// made even so Yes/No labels balance exactly; a freed unit moves to the
    /// next task with non-zero weight.
    pub fn allocate(&self, total: usize) -> [usize; 4] {
        let w = self.weights();
        let parts = largest_remainder(total, &w);
        let mut out = [parts[0], parts[1], parts[2], parts[3]];
        if out[0] % 2 == 1 {
            out[0] -= 1;
            if let Some(i) = (1..4).find(|&i| w[i] > 0) {
                out[i] += 1;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub mix: TaskMix,
    /// Defaults to twice the number of training impressions.
    pub total_instances: Option<usize>,
    pub multiclass_candidates: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            mix: TaskMix::default(),
            total_instances: None,
            multiclass_candidates: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

/// One line of the SFT dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub task_kind: TaskKind,
    pub messages: Vec<Message>,
    pub images: Vec<String>,
    pub target: String,
}

impl SftRecord {
    fn from_instance(p: PromptInstance) -> Self {
        Self {
            task_kind: p.task_kind,
            messages: vec![Message {
                role: "user".into(),
                content: p.text,
            }],
            images: p.media,
            target: p.target,
        }
    }

    /// Chat transcript with the target as the assistant turn.
    pub fn conversation(&self) -> Vec<Message> {
        let mut m = self.messages.clone();
        m.push(Message {
            role: "assistant".into(),
            content: self.target.clone(),
        });
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftDataset {
    pub instances: Vec<SftRecord>,
    pub mix_report: BTreeMap<TaskKind, usize>,
    pub skipped: usize,
    pub seed: u64,
}

/// Builds the multi-task dataset from training impressions.
///
/// `neighbor_keywords` maps a user to the keywords of its retrieved
/// neighbors' next items; a user missing from the map gets prompts without
/// the neighbor section. Output order is `(user or item id, task kind,
/// index)` and does not depend on the input order.
pub fn build_sft_dataset(
    train: &[Impression],
    catalog: &ItemCatalog,
    store: &KeywordStore,
    neighbor_keywords: &BTreeMap<String, Vec<String>>,
    config: &SftConfig,
    seed: u64,
) -> Result<SftDataset> {
    let mut imps: Vec<&Impression> = train.iter().collect();
    imps.sort_by(|a, b| a.key().cmp(&b.key()));
    if imps.is_empty() {
        return Err(Error::Invalid("no training impressions".into()));
    }
    let total = config.total_instances.unwrap_or(2 * imps.len());
    let [n_point, n_multi, n_recon, n_summ] = config.mix.allocate(total);
    let mut keyed: Vec<((String, TaskKind, usize), PromptInstance)> = Vec::with_capacity(total);
    let mut skipped = 0;

    let item = |id: &str| -> Result<&Item> {
        catalog
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("item {id} missing from catalog")))
    };
    let context = |imp: &Impression| (user_keywords(&imp.history, store), neighbor_keywords.get(&imp.user_id));

    for j in 0..n_point / 2 {
        let imp = imps[j % imps.len()];
        let mut rng = keyed_rng(seed, &["pointwise", &imp.user_id, &(j / imps.len()).to_string()]);
        let (uk, nk) = context(imp);
        let Some(neg) = imp.negatives.choose(&mut rng) else {
            skipped += 2;
            continue;
        };
        for (slot, (id, label)) in [(imp.positive.as_str(), "Yes"), (neg.as_str(), "No")].into_iter().enumerate() {
            let mut p = render_pointwise(&uk, nk.map(Vec::as_slice), item(id)?);
            p.target = label.to_string();
            keyed.push(((imp.user_id.clone(), TaskKind::Pointwise, 2 * j + slot), p));
        }
    }

    for j in 0..n_multi {
        let imp = imps[j % imps.len()];
        let mut rng = keyed_rng(seed, &["multiclass", &imp.user_id, &(j / imps.len()).to_string()]);
        let c = config.multiclass_candidates.min(imp.negatives.len() + 1);
        if c < 2 {
            skipped += 1;
            continue;
        }
        let mut cands: Vec<&Item> = index::sample(&mut rng, imp.negatives.len(), c - 1)
            .into_iter()
            .map(|i| item(&imp.negatives[i]))
            .collect::<Result<_>>()?;
        let pos = rng.gen_range(0..c);
        cands.insert(pos, item(&imp.positive)?);
        let (uk, nk) = context(imp);
        match render_multiclass(&uk, nk.map(Vec::as_slice), &cands, Some(pos), config.multiclass_candidates) {
            Ok(p) => keyed.push(((imp.user_id.clone(), TaskKind::Multiclass, j), p)),
            Err(e) => {
                log::warn!("{e}");
                skipped += 1;
            }
        }
    }

    let items: Vec<&str> = imps
        .iter()
        .flat_map(|i| i.history.iter().chain(std::iter::once(&i.positive)))
        .map(String::as_str)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    for j in 0..n_recon {
        let it = item(items[j % items.len()])?;
        match render_reconstruction(&store.keywords(&it.item_id), it) {
            Some(p) => keyed.push(((it.item_id.clone(), TaskKind::Reconstruction, j), p)),
            None => skipped += 1,
        }
    }
    for j in 0..n_summ {
        let it = item(items[j % items.len()])?;
        match render_summarization(it, store) {
            Some(p) => keyed.push(((it.item_id.clone(), TaskKind::Summarization, j), p)),
            None => skipped += 1,
        }
    }

    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    let mut mix_report: BTreeMap<TaskKind, usize> = TaskKind::ALL.iter().map(|k| (*k, 0)).collect();
    let instances: Vec<SftRecord> = keyed
        .into_iter()
        .map(|(_, p)| {
            *mix_report.entry(p.task_kind).or_default() += 1;
            SftRecord::from_instance(p)
        })
        .collect();
    Ok(SftDataset {
        instances,
        mix_report,
        skipped,
        seed,
    })
}

/// `-(1/N) Σ_i Σ_t log P(y_t | x, y_<t)` over `N` instances.
pub fn sft_loss_reference(per_instance_logprobs: &[Vec<f64>]) -> Result<f64> {
    if per_instance_logprobs.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let total: f64 = per_instance_logprobs.iter().map(|lps| lps.iter().sum::<f64>()).sum();
    Ok(-total / per_instance_logprobs.len() as f64)
}

/// Scores the target tokens of every record with `scorer`, conditioned on the
/// prompt tokens, and applies [`sft_loss_reference`].
pub fn sft_loss_with_scorer(records: &[SftRecord], scorer: &dyn TokenScorer) -> Result<f64> {
    let per: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            let prompt: Vec<String> = r.messages.iter().flat_map(|m| tokenize(&m.content)).collect();
            scorer.token_logprobs(&prompt, &tokenize(&r.target)).map_err(Error::from)
        })
        .collect::<Result<_>>()?;
    sft_loss_reference(&per)
}
