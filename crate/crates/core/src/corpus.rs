//! Item and interaction ingestion, activity filtering, impression building
//! and the train/valid/test split.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{keyed_rng, largest_remainder};

/// An item: id, media reference and the two text fields.
///
/// `image_ref` is a file path for real backends or an inline caption for the
/// mock backend. An empty `image_ref` marks a caption-less item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    pub description: String,
    pub image_ref: String,
}

impl Item {
    /// Title and description joined by a single space.
    pub fn text(&self) -> String {
        match (self.title.is_empty(), self.description.is_empty()) {
            (true, _) => self.description.clone(),
            (_, true) => self.title.clone(),
            _ => format!("{} {}", self.title, self.description),
        }
    }

    pub fn is_captionless(&self) -> bool {
        self.image_ref.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItemCatalog {
    items: Vec<Item>,
    index: HashMap<String, usize>,
}

impl ItemCatalog {
    pub fn from_items(items: Vec<Item>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if item.item_id.is_empty() {
                return Err(Error::Invalid("empty item_id".into()));
            }
            if index.insert(item.item_id.clone(), i).is_some() {
                return Err(Error::DuplicateItem(item.item_id.clone()));
            }
        }
        Ok(Self { items, index })
    }

    pub fn get(&self, item_id: &str) -> Option<&Item> {
        self.index.get(item_id).map(|&i| &self.items[i])
    }

    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.index.contains_key(item_id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items in ingestion order.
    pub fn iter(&self) -> std::slice::Iter<'_, Item> {
        self.items.iter()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    /// Keeps the items accepted by `keep`, preserving order.
    pub fn retain(&self, mut keep: impl FnMut(&Item) -> bool) -> Self {
        let items: Vec<Item> = self.items.iter().filter(|i| keep(i)).cloned().collect();
        Self::from_items(items).expect("subset of a valid catalog is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

/// A rejected input line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: usize,
    pub reason: String,
}

/// Parsed records plus the lines that could not be used.
#[derive(Debug, Clone)]
pub struct Ingested<T> {
    pub value: T,
    pub rejects: Vec<Reject>,
}

fn read_lines<T>(
    path: &Path,
    mut parse: impl FnMut(&str) -> std::result::Result<T, String>,
) -> Result<(Vec<(usize, T)>, Vec<Reject>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ok = Vec::new();
    let mut rejects = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse(&line) {
            Ok(v) => ok.push((i + 1, v)),
            Err(reason) => rejects.push(Reject { line: i + 1, reason }),
        }
    }
    Ok((ok, rejects))
}

/// Reads an items file (one JSON object per line). Malformed lines end up in
/// the rejects report; a duplicated id is fatal.
pub fn ingest_items(path: &Path) -> Result<Ingested<ItemCatalog>> {
    let (records, mut rejects) = read_lines(path, |line| {
        let item: Item = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if item.item_id.is_empty() {
            return Err("empty item_id".to_string());
        }
        Ok(item)
    })?;
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(records.len());
    for (_, item) in records {
        if !seen.insert(item.item_id.clone()) {
            return Err(Error::DuplicateItem(item.item_id));
        }
        items.push(item);
    }
    rejects.sort_by_key(|r| r.line);
    Ok(Ingested {
        value: ItemCatalog::from_items(items)?,
        rejects,
    })
}

/// Reads an interactions file. Negative timestamps are rejected and exact
/// duplicate triples are dropped.
pub fn ingest_interactions(path: &Path) -> Result<Ingested<Vec<Interaction>>> {
    let (records, rejects) = read_lines(path, |line| {
        let it: Interaction = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if it.user_id.is_empty() || it.item_id.is_empty() {
            return Err("empty user_id or item_id".to_string());
        }
        if it.timestamp < 0 {
            return Err(format!("negative timestamp {}", it.timestamp));
        }
        Ok(it)
    })?;
    Ok(Ingested {
        value: dedup_interactions(records.into_iter().map(|(_, r)| r)),
        rejects,
    })
}

/// Removes duplicate triples, keeping first-seen order.
pub fn dedup_interactions(log: impl IntoIterator<Item = Interaction>) -> Vec<Interaction> {
    let mut seen = HashSet::new();
    log.into_iter().filter(|i| seen.insert(i.clone())).collect()
}

/// Iteratively drops users with fewer than `min_user` interactions and items
/// with fewer than `min_item` interactions until nothing changes. Interactions
/// with items absent from the catalog are dropped first.
pub fn filter_min_activity(
    log: &[Interaction],
    catalog: &ItemCatalog,
    min_user: usize,
    min_item: usize,
) -> Result<(Vec<Interaction>, ItemCatalog)> {
    if min_user == 0 || min_item == 0 {
        return Err(Error::Config("min_user and min_item must be >= 1".into()));
    }
    let mut kept: Vec<Interaction> = dedup_interactions(
        log.iter().filter(|i| catalog.contains(&i.item_id)).cloned(),
    );
    loop {
        let mut per_user: HashMap<&str, usize> = HashMap::new();
        let mut per_item: HashMap<&str, usize> = HashMap::new();
        for i in &kept {
            *per_user.entry(&i.user_id).or_default() += 1;
            *per_item.entry(&i.item_id).or_default() += 1;
        }
        let next: Vec<Interaction> = kept
            .iter()
            .filter(|i| per_user[i.user_id.as_str()] >= min_user && per_item[i.item_id.as_str()] >= min_item)
            .cloned()
            .collect();
        if next.len() == kept.len() {
            break;
        }
        kept = next;
    }
    if kept.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let live: HashSet<&str> = kept.iter().map(|i| i.item_id.as_str()).collect();
    let filtered = catalog.retain(|item| live.contains(item.item_id.as_str()));
    Ok((kept, filtered))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    pub item_ids: Vec<String>,
}

/// One evaluation unit: a history, the next item and sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Impression {
    pub user_id: String,
    pub history: Vec<String>,
    pub positive: String,
    pub negatives: Vec<String>,
}

impl Impression {
    /// Identity used for split disjointness.
    pub fn key(&self) -> (&str, &str) {
        (&self.user_id, &self.positive)
    }

    /// Positive first, then negatives in sampled order.
    pub fn candidates(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.positive.as_str()).chain(self.negatives.iter().map(String::as_str))
    }

    pub fn validate(&self, catalog: &ItemCatalog) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("impression of {}: {m}", self.user_id)));
        if self.history.contains(&self.positive) {
            return bad("positive appears in history".into());
        }
        let mut seen = HashSet::new();
        for n in &self.negatives {
            if !seen.insert(n) {
                return bad(format!("negative {n} repeated"));
            }
            if n == &self.positive || self.history.contains(n) {
                return bad(format!("negative {n} overlaps history or positive"));
            }
            if !catalog.contains(n) {
                return bad(format!("negative {n} not in catalog"));
            }
        }
        Ok(())
    }
}

/// Chronological, de-duplicated item sequences per user, ordered by user id.
///
/// Sequences are sorted by `(timestamp, item_id)`; a repeated item keeps its
/// first occurrence.
pub fn user_sequences(log: &[Interaction]) -> BTreeMap<String, Vec<String>> {
    let mut by_user: BTreeMap<String, Vec<(i64, &str)>> = BTreeMap::new();
    for i in log {
        by_user
            .entry(i.user_id.clone())
            .or_default()
            .push((i.timestamp, i.item_id.as_str()));
    }
    by_user
        .into_iter()
        .map(|(u, mut events)| {
            events.sort();
            let mut seen = HashSet::new();
            let seq = events
                .into_iter()
                .filter(|(_, it)| seen.insert(*it))
                .map(|(_, it)| it.to_string())
                .collect();
            (u, seq)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpressionParams {
    pub history_len: usize,
    pub num_negatives: usize,
    pub seed: u64,
    /// Emit one impression per prefix instead of only the last one.
    pub multi_prefix: bool,
}

impl Default for ImpressionParams {
    fn default() -> Self {
        Self {
            history_len: 5,
            num_negatives: 20,
            seed: 42,
            multi_prefix: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImpressionBuild {
    pub impressions: Vec<Impression>,
    /// Users with fewer than `history_len + 1` distinct items.
    pub skipped_users: usize,
}

/// Builds impressions: the last `history_len` items before the target form
/// the history and negatives are sampled from catalog items the user never
/// interacted with, using a generator keyed by `(seed, user_id)`.
pub fn build_impressions(
    log: &[Interaction],
    catalog: &ItemCatalog,
    params: &ImpressionParams,
) -> Result<ImpressionBuild> {
    let n = params.history_len;
    if n == 0 {
        return Err(Error::Config("history_len must be >= 1".into()));
    }
    let mut impressions = Vec::new();
    let mut skipped_users = 0;
    for (user_id, seq) in user_sequences(log) {
        if seq.len() < n + 1 {
            skipped_users += 1;
            continue;
        }
        let touched: HashSet<&str> = seq.iter().map(String::as_str).collect();
        let eligible: Vec<&str> = catalog
            .iter()
            .map(|i| i.item_id.as_str())
            .filter(|id| !touched.contains(id))
            .collect();
        if eligible.len() < params.num_negatives {
            return Err(Error::CatalogTooSmall {
                user_id,
                available: eligible.len(),
                required: params.num_negatives,
            });
        }
        let targets: Vec<usize> = if params.multi_prefix {
            (n..seq.len()).collect()
        } else {
            vec![seq.len() - 1]
        };
        for t in targets {
            let mut rng = if params.multi_prefix {
                keyed_rng(params.seed, &[&user_id, &t.to_string()])
            } else {
                keyed_rng(params.seed, &[&user_id])
            };
            let negatives = index::sample(&mut rng, eligible.len(), params.num_negatives)
                .into_iter()
                .map(|i| eligible[i].to_string())
                .collect();
            impressions.push(Impression {
                user_id: user_id.clone(),
                history: seq[t - n..t].to_vec(),
                positive: seq[t].clone(),
                negatives,
            });
        }
    }
    Ok(ImpressionBuild {
        impressions,
        skipped_users,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub train: Vec<Impression>,
    pub valid: Vec<Impression>,
    pub test: Vec<Impression>,
    pub seed: u64,
}

/// Seeded shuffle followed by a largest-remainder partition into
/// train/valid/test.
pub fn split_impressions(impressions: &[Impression], ratios: [u64; 3], seed: u64) -> Result<SplitSet> {
    if ratios.iter().any(|&r| r == 0) {
        return Err(Error::Config("split ratios must be positive".into()));
    }
    if impressions.len() < ratios.len() {
        return Err(Error::Invalid(format!(
            "{} impressions cannot fill {} split parts",
            impressions.len(),
            ratios.len()
        )));
    }
    let mut order: Vec<&Impression> = impressions.iter().collect();
    order.shuffle(&mut keyed_rng(seed, &["split"]));
    let sizes = largest_remainder(order.len(), &ratios);
    let mut rest = order.into_iter();
    let mut take = |k: usize| -> Vec<Impression> { rest.by_ref().take(k).cloned().collect() };
    let train = take(sizes[0]);
    let valid = take(sizes[1]);
    let test = take(sizes[2]);
    Ok(SplitSet {
        train,
        valid,
        test,
        seed,
    })
}

/// User ids of a set of impressions.
pub fn user_set(impressions: &[Impression]) -> BTreeSet<String> {
    impressions.iter().map(|i| i.user_id.clone()).collect()
}
