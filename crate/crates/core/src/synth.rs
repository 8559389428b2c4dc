//! Synthetic corpora with known structure.
//!
//! * `planted-sequential`: every user walks consecutive items of a 50-item
//!   ring, so the next item is a deterministic function of the last one.
//! * `clustered-taste`: users belong to latent taste clusters. Items carry
//!   cluster-themed title and caption words, and each cluster has a few
//!   "trend" items that users only reach as their latest interaction. A
//!   user's own history rarely mentions the trend, other users of the same
//!   cluster do.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Interaction, Item};
use crate::error::{Error, Result};
use crate::io::write_jsonl;
use crate::util::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    PlantedSequential,
    ClusteredTaste,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planted-sequential" => Ok(Profile::PlantedSequential),
            "clustered-taste" => Ok(Profile::ClusteredTaste),
            other => Err(Error::Config(format!(
                "unknown synthetic profile {other:?} (expected planted-sequential or clustered-taste)"
            ))),
        }
    }
}

impl Profile {
    pub fn as_str(&self) -> &'static str {
        match self {
            Profile::PlantedSequential => "planted-sequential",
            Profile::ClusteredTaste => "clustered-taste",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedParams {
    pub users: usize,
    pub items: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for PlantedParams {
    fn default() -> Self {
        Self {
            users: 500,
            items: 50,
            min_len: 7,
            max_len: 14,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteredParams {
    pub clusters: usize,
    pub items_per_cluster: usize,
    pub trend_items_per_cluster: usize,
    pub users: usize,
    pub min_history: usize,
    pub max_history: usize,
    /// Chance that a history item comes from the user's own cluster.
    pub in_cluster: f64,
    /// Chance that the latest interaction is one of the cluster's trend items.
    pub trend_last: f64,
}

impl Default for ClusteredParams {
    fn default() -> Self {
        Self {
            clusters: 4,
            items_per_cluster: 50,
            trend_items_per_cluster: 4,
            users: 2400,
            min_history: 6,
            max_history: 9,
            in_cluster: 0.85,
            trend_last: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub profile: Profile,
    pub items: Vec<Item>,
    pub interactions: Vec<Interaction>,
    /// Latent cluster per user in user order; empty for the planted profile.
    pub user_clusters: Vec<(String, usize)>,
}

impl SynthCorpus {
    /// Writes `items.jsonl` and `interactions.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_jsonl(&dir.join("items.jsonl"), &self.items)?;
        write_jsonl(&dir.join("interactions.jsonl"), &self.interactions)
    }
}

const DAY: i64 = 86_400;
const EPOCH: i64 = 1_600_000_000;

pub fn synth_corpus(profile: Profile, seed: u64) -> SynthCorpus {
    match profile {
        Profile::PlantedSequential => planted_sequential(&PlantedParams::default(), seed),
        Profile::ClusteredTaste => clustered_taste(&ClusteredParams::default(), seed),
    }
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ru", "te", "va", "no", "si", "pe", "da", "go", "fi", "ze", "bu", "ha", "jo",
];

/// Pronounceable pseudo-word for index `i`, distinct for `i < 4096`.
fn word(i: usize) -> String {
    let s = |k: usize| SYLLABLES[k % 16];
    format!("{}{}{}", s(i / 256), s(i / 16), s(i))
}

pub fn planted_sequential(p: &PlantedParams, seed: u64) -> SynthCorpus {
    let items: Vec<Item> = (0..p.items)
        .map(|i| Item {
            item_id: format!("p{i:03}"),
            title: format!("{} {}", word(i), word(i + 100)),
            description: format!("{} {} {}", word(i), word(i + 200), word(i + 300)),
            image_ref: format!("{} photo", word(i + 400)),
        })
        .collect();
    let mut rng = keyed_rng(seed, &["synth", "planted-sequential"]);
    let mut interactions = Vec::new();
    for u in 0..p.users {
        let start = rng.gen_range(0..p.items);
        let len = rng.gen_range(p.min_len..=p.max_len);
        for j in 0..len {
            interactions.push(Interaction {
                user_id: format!("u{u:04}"),
                item_id: items[(start + j) % p.items].item_id.clone(),
                timestamp: EPOCH + j as i64 * DAY,
            });
        }
    }
    SynthCorpus {
        profile: Profile::PlantedSequential,
        items,
        interactions,
        user_clusters: Vec::new(),
    }
}

const THEMES: [&str; 8] = ["garden", "kitchen", "travel", "office", "sport", "nursery", "music", "craft"];
const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "purple", "orange", "pink", "teal"];
const SHAPES: [&str; 8] = ["round", "square", "tall", "flat", "oval", "slim", "boxy", "curved"];

/// Words shared by every cluster.
const GLOBAL_POOL: usize = 40;
/// Theme words per cluster.
const THEME_POOL: usize = 8;

pub fn clustered_taste(p: &ClusteredParams, seed: u64) -> SynthCorpus {
    let mut rng = keyed_rng(seed, &["synth", "clustered-taste"]);
    let global: Vec<String> = (0..GLOBAL_POOL).map(word).collect();
    let mut items = Vec::new();
    // (regular, trend) item indices per cluster
    let mut by_cluster: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for c in 0..p.clusters {
        let theme = THEMES[c % THEMES.len()];
        let color = COLORS[c % COLORS.len()];
        let shape = SHAPES[c % SHAPES.len()];
        let tag = if c < THEMES.len() { String::new() } else { (c / THEMES.len()).to_string() };
        let pool: Vec<String> = (0..THEME_POOL).map(|k| format!("{theme}{tag}{}", word(1000 + k))).collect();
        let trend = format!("{theme}{tag}trend");
        let mut regular = Vec::new();
        let mut trending = Vec::new();
        for j in 0..p.items_per_cluster {
            let id = format!("c{c}i{j:03}");
            let two: Vec<&String> = pool.choose_multiple(&mut rng, 2).collect();
            let w3 = global.choose(&mut rng).expect("non-empty pool");
            let w4 = global.choose(&mut rng).expect("non-empty pool");
            let is_trend = j < p.trend_items_per_cluster;
            let mut description = format!("{} {} {w3} sku{id}", two[0], two[1]);
            if is_trend {
                description.push_str(&format!(" {trend} {trend}"));
                trending.push(items.len());
            } else {
                regular.push(items.len());
            }
            items.push(Item {
                item_id: id,
                title: format!("{} {}", two[0], two[1]),
                description,
                image_ref: format!("{color} {shape} {w4}"),
            });
        }
        by_cluster.push((regular, trending));
    }

    let mut interactions = Vec::new();
    let mut user_clusters = Vec::new();
    for u in 0..p.users {
        let user = format!("u{u:04}");
        let c = rng.gen_range(0..p.clusters);
        user_clusters.push((user.clone(), c));
        let len = rng.gen_range(p.min_history..=p.max_history);
        let mut seq: Vec<usize> = Vec::with_capacity(len + 1);
        while seq.len() < len {
            let cluster = if p.clusters == 1 || rng.gen_bool(p.in_cluster) {
                c
            } else {
                let mut o = rng.gen_range(0..p.clusters - 1);
                if o >= c {
                    o += 1;
                }
                o
            };
            let pick = *by_cluster[cluster].0.choose(&mut rng).expect("cluster has regular items");
            if !seq.contains(&pick) {
                seq.push(pick);
            }
        }
        let (regular, trending) = &by_cluster[c];
        let last = if !trending.is_empty() && rng.gen_bool(p.trend_last) {
            *trending.choose(&mut rng).expect("non-empty")
        } else {
            loop {
                let x = *regular.choose(&mut rng).expect("non-empty");
                if !seq.contains(&x) {
                    break x;
                }
            }
        };
        seq.push(last);
        for (j, idx) in seq.into_iter().enumerate() {
            interactions.push(Interaction {
                user_id: user.clone(),
                item_id: items[idx].item_id.clone(),
                timestamp: EPOCH + j as i64 * DAY,
            });
        }
    }
    SynthCorpus {
        profile: Profile::ClusteredTaste,
        items,
        interactions,
        user_clusters,
    }
}
