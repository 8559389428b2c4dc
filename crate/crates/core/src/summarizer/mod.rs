//! Stage 1: keyword summaries of items, their verifiable rewards and the
//! group-relative policy optimization machinery.

mod grpo;
mod rewards;
mod store;

pub use grpo::{
    grpo_advantages, grpo_toy_optimize, rollout_group, AdvantageRecord, CandidateSpace, GrpoConfig, GrpoStep,
    GrpoTrace,
};
pub use rewards::{
    reward_info, reward_len, reward_recon, score_summary, total_reward, ReconReward, RewardBreakdown, RewardConfig,
    RewardWeights,
};
pub use store::{summarize_catalog, KeywordRecord, KeywordStore, SummarizePolicy, SummarizeReport};

use serde::{Deserialize, Serialize};

use crate::backends::Prompt;
use crate::corpus::Item;
use crate::error::{Error, Result};

/// Cover and content keywords of one item.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSummary {
    pub item_id: String,
    pub cover_keywords: Vec<String>,
    pub content_keywords: Vec<String>,
}

fn clean_keywords<I, S>(raw: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out: Vec<String> = Vec::new();
    for k in raw {
        let k = k.as_ref().trim();
        if !k.is_empty() && !out.iter().any(|o| o == k) {
            out.push(k.to_string());
        }
    }
    out
}

impl KeywordSummary {
    /// Strips keywords, drops empty ones and removes duplicates within each
    /// list (first occurrence wins).
    pub fn new<I, J, S, T>(item_id: impl Into<String>, cover: I, content: J) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        Self {
            item_id: item_id.into(),
            cover_keywords: clean_keywords(cover),
            content_keywords: clean_keywords(content),
        }
    }

    /// |W|: cover plus content keyword count.
    pub fn len(&self) -> usize {
        self.cover_keywords.len() + self.content_keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cover keywords followed by content keywords.
    pub fn all_keywords(&self) -> impl Iterator<Item = &String> {
        self.cover_keywords.iter().chain(&self.content_keywords)
    }

    pub fn joined(&self) -> String {
        self.all_keywords().map(String::as_str).collect::<Vec<_>>().join(" ")
    }

    /// The `Cover:` / `Content:` output format.
    pub fn render(&self) -> String {
        format_summary(&self.cover_keywords, &self.content_keywords)
    }
}

pub fn format_summary(cover: &[String], content: &[String]) -> String {
    format!("Cover: {}\nContent: {}", cover.join(","), content.join(","))
}

/// Replaces literal `<image>` markers in free text so that the number of
/// image slots in a prompt always equals its media count.
pub(crate) fn escape_slots(text: &str) -> String {
    text.replace("<image>", "[image]")
}

/// The multimodal summarization instruction for one item. The media list
/// carries the item's image reference for the single `<image>` slot.
pub fn render_summary_prompt(item: &Item) -> Prompt {
    let text = format!(
        "You are an expert in recommendation. Below is an Amazon product:\n\
         \n\
         Cover: <image>\n\
         \n\
         Title: {title}\n\
         \n\
         Description: {description}\n\
         \n\
         Please summarize the cover and content of this product with several keywords respectively. \
         The summary should be concise and accurate. Output using the following template:\n\
         \n\
         Cover: <image keyword 1>,<image keyword 2> ...\n\
         \n\
         Content: <content keyword 1>,<content keyword 2> ...",
        title = escape_slots(&item.title),
        description = escape_slots(&item.description),
    );
    Prompt {
        text,
        media: vec![item.image_ref.clone()],
    }
}

/// Reads the last `Cover:` and the last `Content:` line (case-insensitive)
/// and splits each on commas.
pub fn parse_summary(text: &str, item_id: &str) -> Result<KeywordSummary> {
    fn value_after<'a>(line: &'a str, label: &str) -> Option<&'a str> {
        let line = line.trim_start();
        let head = line.get(..label.len())?;
        head.eq_ignore_ascii_case(label).then(|| &line[label.len()..])
    }
    let mut cover = None;
    let mut content = None;
    for line in text.lines() {
        if let Some(v) = value_after(line, "cover:") {
            cover = Some(v);
        } else if let Some(v) = value_after(line, "content:") {
            content = Some(v);
        }
    }
    let missing = match (cover, content) {
        (Some(cv), Some(ct)) => return Ok(KeywordSummary::new(item_id, cv.split(','), ct.split(','))),
        (None, _) => "Cover",
        (_, None) => "Content",
    };
    Err(Error::SummaryParse {
        missing,
        raw: text.to_string(),
    })
}
