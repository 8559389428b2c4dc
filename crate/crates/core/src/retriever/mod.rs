//! Similar-user retrieval over sequence embeddings.
//!
//! A sequence encoder maps a user's recent item ids to a vector `e_u`. The
//! training users form the only legal retrieval pool. For every query user
//! the `k` most cosine-similar pool users are found by an exact linear scan,
//! and the keywords of the items those neighbors interacted with next become
//! auxiliary prompt context.

mod sasrec;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use sasrec::{EncoderConfig, SasRecEncoder, TrainReport};

use crate::corpus::{Impression, ItemCatalog};
use crate::error::{Error, Result};
use crate::io::{read_jsonl, sha256_hex, write_jsonl};
use crate::summarizer::KeywordStore;
use crate::util::{cosine, l2_norm, normalize};

/// Anything that turns an item-id history into a fixed-size vector.
pub trait SequenceEncoder: Send + Sync {
    /// Tag identifying the exact parameters; embeddings from different tags
    /// are never compared.
    fn version(&self) -> &str;
    fn encode(&self, history: &[String]) -> Vec<f64>;
}

impl SequenceEncoder for SasRecEncoder {
    fn version(&self) -> &str {
        SasRecEncoder::version(self)
    }

    fn encode(&self, history: &[String]) -> Vec<f64> {
        SasRecEncoder::encode(self, history)
    }
}

/// Training-free encoder: a catalog-sized vector with weight `0.9^(r-1)` on
/// the item at recency position `r` (1 = most recent), L2-normalized.
#[derive(Debug, Clone)]
pub struct BagOfItemsEncoder {
    index: HashMap<String, usize>,
    version: String,
}

impl BagOfItemsEncoder {
    pub const DECAY: f64 = 0.9;

    pub fn new(catalog: &ItemCatalog) -> Self {
        let ids: Vec<&str> = catalog.iter().map(|i| i.item_id.as_str()).collect();
        let version = format!("bag-of-items-{}", &sha256_hex(ids.join("\n").as_bytes())[..16]);
        Self {
            index: ids.iter().enumerate().map(|(i, id)| (id.to_string(), i)).collect(),
            version,
        }
    }
}

impl SequenceEncoder for BagOfItemsEncoder {
    fn version(&self) -> &str {
        &self.version
    }

    fn encode(&self, history: &[String]) -> Vec<f64> {
        let mut v = vec![0.0; self.index.len()];
        let mut w = 1.0;
        for id in history.iter().rev() {
            if let Some(&i) = self.index.get(id) {
                v[i] += w;
            }
            w *= Self::DECAY;
        }
        normalize(&mut v);
        v
    }
}

/// `bag_of_items_encode` as a free function for one-off use.
pub fn bag_of_items_encode(user_id: &str, history: &[String], catalog: &ItemCatalog) -> UserEmbedding {
    encode_history(&BagOfItemsEncoder::new(catalog), user_id, history)
}

/// One line of the embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEmbedding {
    pub user_id: String,
    pub vector: Vec<f64>,
    pub encoder_version: String,
}

pub fn encode_history(encoder: &dyn SequenceEncoder, user_id: &str, history: &[String]) -> UserEmbedding {
    let vector = encoder.encode(history);
    if vector.iter().all(|x| *x == 0.0) {
        log::warn!("user {user_id}: no known item in history, embedding is the zero vector");
    }
    UserEmbedding {
        user_id: user_id.to_string(),
        vector,
        encoder_version: encoder.version().to_string(),
    }
}

/// Trains the self-attention encoder on the training impressions. Each
/// impression contributes its history followed by its positive item.
pub fn train_sequence_encoder(
    train: &[Impression],
    catalog: &ItemCatalog,
    config: &EncoderConfig,
    seed: u64,
) -> Result<(SasRecEncoder, TrainReport)> {
    if train.is_empty() {
        return Err(Error::Invalid("cannot train the sequence encoder on an empty training set".into()));
    }
    let vocab: Vec<String> = catalog.iter().map(|i| i.item_id.clone()).collect();
    let seqs: Vec<Vec<String>> = train
        .iter()
        .map(|imp| imp.history.iter().chain(std::iter::once(&imp.positive)).cloned().collect())
        .collect();
    SasRecEncoder::train(&seqs, &vocab, config, seed)
}

/// The history used to embed the user of `imp`: every interaction before
/// its positive item, most recent `max_len` kept. Falls back to the
/// impression's own window when the user's sequence is not available.
pub fn query_history(imp: &Impression, sequences: Option<&BTreeMap<String, Vec<String>>>, max_len: usize) -> Vec<String> {
    let full = sequences
        .and_then(|s| s.get(&imp.user_id))
        .and_then(|seq| seq.iter().position(|i| *i == imp.positive).map(|p| &seq[..p]));
    let hist = full.unwrap_or(&imp.history);
    hist[hist.len().saturating_sub(max_len)..].to_vec()
}

/// Embeds the user of every impression (first impression per user wins).
pub fn embed_impressions(
    encoder: &dyn SequenceEncoder,
    impressions: &[Impression],
    sequences: Option<&BTreeMap<String, Vec<String>>>,
    max_len: usize,
) -> Vec<UserEmbedding> {
    let mut seen = std::collections::HashSet::new();
    let firsts: Vec<&Impression> = impressions.iter().filter(|i| seen.insert(i.user_id.as_str())).collect();
    let mut out: Vec<UserEmbedding> = firsts
        .par_iter()
        .map(|imp| encode_history(encoder, &imp.user_id, &query_history(imp, sequences, max_len)))
        .collect();
    out.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    out
}

pub fn save_embeddings(path: &Path, embeddings: &[UserEmbedding]) -> Result<()> {
    write_jsonl(path, embeddings)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<UserEmbedding>> {
    read_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub encoder_version: String,
    pub user_count: usize,
    /// SHA-256 over the index entries in user order.
    pub checksum: String,
}

/// Exact cosine index over training-user embeddings.
#[derive(Debug, Clone)]
pub struct SimilarUserIndex {
    /// Sorted by user id; vectors are unit-normalized (zero stays zero).
    entries: Vec<UserEmbedding>,
    version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub user_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_user_id: String,
    pub neighbors: Vec<Neighbor>,
    /// Fewer than `k` candidates were available.
    pub short: bool,
    /// The query vector was zero; neighbors are the first `k` ids with similarity 0.
    pub degenerate_query: bool,
}

impl SimilarUserIndex {
    pub fn build(embeddings: Vec<UserEmbedding>) -> Result<Self> {
        let Some(first) = embeddings.first() else {
            return Err(Error::Invalid("cannot build a similar-user index from zero embeddings".into()));
        };
        let version = first.encoder_version.clone();
        let dim = first.vector.len();
        let mut entries = embeddings;
        for e in &mut entries {
            if e.encoder_version != version {
                return Err(Error::MixedEncoderVersions(version, e.encoder_version.clone()));
            }
            if e.vector.len() != dim || e.vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("user {}: embedding is not a finite {dim}-vector", e.user_id)));
            }
            normalize(&mut e.vector);
        }
        entries.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        if let Some(w) = entries.windows(2).find(|w| w[0].user_id == w[1].user_id) {
            return Err(Error::Invalid(format!("user {} appears twice in the index", w[0].user_id)));
        }
        Ok(Self { entries, version })
    }

    pub fn encoder_version(&self) -> &str {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, user_id: &str) -> bool {
        self.entries.binary_search_by(|e| e.user_id.as_str().cmp(user_id)).is_ok()
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.user_id.as_str())
    }

    pub fn manifest(&self) -> IndexManifest {
        let mut bytes = Vec::new();
        for e in &self.entries {
            bytes.extend_from_slice(e.user_id.as_bytes());
            bytes.push(0);
            for x in &e.vector {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        IndexManifest {
            encoder_version: self.version.clone(),
            user_count: self.entries.len(),
            checksum: sha256_hex(&bytes),
        }
    }

    /// Top-`k` users by cosine similarity, excluding `exclude`. Ties go to
    /// the smaller user id.
    pub fn retrieve_similar(&self, query: &UserEmbedding, k: usize, exclude: Option<&str>) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::Invalid("k must be >= 1".into()));
        }
        if query.encoder_version != self.version {
            return Err(Error::MixedEncoderVersions(self.version.clone(), query.encoder_version.clone()));
        }
        let pool = self.entries.iter().filter(|e| Some(e.user_id.as_str()) != exclude);
        let degenerate = l2_norm(&query.vector) == 0.0;
        let mut scored: Vec<Neighbor> = if degenerate {
            log::warn!("user {}: zero query vector, similarity undefined", query.user_id);
            pool.take(k)
                .map(|e| Neighbor {
                    user_id: e.user_id.clone(),
                    similarity: 0.0,
                })
                .collect()
        } else {
            pool.map(|e| Neighbor {
                user_id: e.user_id.clone(),
                similarity: cosine(&query.vector, &e.vector),
            })
            .collect()
        };
        let order = |a: &Neighbor, b: &Neighbor| b.similarity.total_cmp(&a.similarity).then_with(|| a.user_id.cmp(&b.user_id));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(RetrievalResult {
            query_user_id: query.user_id.clone(),
            short: scored.len() < k,
            neighbors: scored,
            degenerate_query: degenerate,
        })
    }

    /// Retrieves for every query, excluding each query user from its own result.
    pub fn retrieve_all(&self, queries: &[UserEmbedding], k: usize) -> Result<Vec<RetrievalResult>> {
        queries
            .par_iter()
            .map(|q| self.retrieve_similar(q, k, Some(&q.user_id)))
            .collect()
    }
}

/// The items each training user interacted with next, in impression order.
pub fn next_items_by_user(train: &[Impression]) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for imp in train {
        out.entry(imp.user_id.clone()).or_default().push(imp.positive.clone());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborKeywords {
    pub user_id: String,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NeighborBundle {
    pub query_user_id: String,
    pub entries: Vec<NeighborKeywords>,
    /// Neighbors whose next item had no stored keywords.
    pub missing_keywords: usize,
    /// Neighbors with no training impression at all.
    pub skipped_neighbors: usize,
}

impl NeighborBundle {
    /// All keywords in neighbor order, duplicates removed.
    pub fn flatten(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        self.entries
            .iter()
            .flat_map(|e| e.keywords.iter())
            .filter(|k| seen.insert(k.as_str()))
            .cloned()
            .collect()
    }
}

/// Keywords of each neighbor's next item(s). `per_neighbor` caps how many of
/// a neighbor's most recent next items are used (1 with single-prefix
/// impressions).
pub fn neighbor_context(
    result: &RetrievalResult,
    store: &KeywordStore,
    next_items: &BTreeMap<String, Vec<String>>,
    per_neighbor: usize,
) -> NeighborBundle {
    let mut bundle = NeighborBundle {
        query_user_id: result.query_user_id.clone(),
        ..Default::default()
    };
    for n in &result.neighbors {
        let Some(items) = next_items.get(&n.user_id) else {
            log::warn!("neighbor {} of {} has no training impression, skipped", n.user_id, result.query_user_id);
            bundle.skipped_neighbors += 1;
            continue;
        };
        let keywords: Vec<String> = items[items.len().saturating_sub(per_neighbor.max(1))..]
            .iter()
            .flat_map(|i| store.keywords(i))
            .collect();
        if keywords.is_empty() {
            log::warn!("neighbor {} of {}: next item has no keywords", n.user_id, result.query_user_id);
            bundle.missing_keywords += 1;
            continue;
        }
        bundle.entries.push(NeighborKeywords {
            user_id: n.user_id.clone(),
            keywords,
        });
    }
    bundle
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::corpus::Item;
    use crate::summarizer::KeywordSummary;
    use crate::util::keyed_rng;

    fn emb(user: &str, v: Vec<f64>) -> UserEmbedding {
        UserEmbedding {
            user_id: user.into(),
            vector: v,
            encoder_version: "v".into(),
        }
    }

    fn brute_force(pool: &[UserEmbedding], q: &UserEmbedding, k: usize, exclude: Option<&str>) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = pool
            .iter()
            .filter(|e| Some(e.user_id.as_str()) != exclude)
            .map(|e| {
                let num: f64 = e.vector.iter().zip(&q.vector).map(|(a, b)| a * b).sum();
                let den = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt() * q.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
                (e.user_id.clone(), if den == 0.0 { 0.0 } else { num / den })
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    fn random_pool(seed: u64, n: usize, dim: usize) -> Vec<UserEmbedding> {
        let mut rng = keyed_rng(seed, &["pool"]);
        (0..n)
            .map(|i| emb(&format!("u{i:03}"), (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect()
    }

    #[test]
    fn matches_brute_force_on_random_pool() {
        let pool = random_pool(1, 50, 8);
        let index = SimilarUserIndex::build(pool.clone()).unwrap();
        let mut rng = keyed_rng(2, &["q"]);
        for qi in 0..20 {
            let q = emb(&format!("q{qi}"), (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let got = index.retrieve_similar(&q, 3, None).unwrap();
            let want = brute_force(&pool, &q, 3, None);
            assert_eq!(got.neighbors.len(), 3);
            for (g, w) in got.neighbors.iter().zip(&want) {
                assert_eq!(g.user_id, w.0);
                assert!((g.similarity - w.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ties_break_by_user_id_and_self_is_excluded() {
        let pool = vec![
            emb("c", vec![1.0, 0.0]),
            emb("a", vec![2.0, 0.0]),
            emb("b", vec![0.0, 1.0]),
            emb("d", vec![3.0, 0.0]),
        ];
        let index = SimilarUserIndex::build(pool).unwrap();
        let r = index.retrieve_similar(&emb("a", vec![1.0, 0.0]), 2, Some("a")).unwrap();
        let ids: Vec<&str> = r.neighbors.iter().map(|n| n.user_id.as_str()).collect();
        assert_eq!(ids, ["c", "d"]);
        assert!((r.neighbors[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scale_invariant() {
        let pool = random_pool(5, 30, 6);
        let index = SimilarUserIndex::build(pool).unwrap();
        let q = emb("q", vec![0.3, -0.2, 0.9, 0.1, 0.0, -0.5]);
        let scaled = emb("q", q.vector.iter().map(|x| x * 7.5).collect());
        let a = index.retrieve_similar(&q, 5, None).unwrap();
        let b = index.retrieve_similar(&scaled, 5, None).unwrap();
        let ids = |r: &RetrievalResult| r.neighbors.iter().map(|n| n.user_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn short_and_degenerate_results() {
        let index = SimilarUserIndex::build(random_pool(3, 4, 3)).unwrap();
        let r = index.retrieve_similar(&emb("u000", vec![1.0, 1.0, 1.0]), 10, Some("u000")).unwrap();
        assert!(r.short && r.neighbors.len() == 3);
        let r = index.retrieve_similar(&emb("z", vec![0.0; 3]), 2, None).unwrap();
        assert!(r.degenerate_query);
        let ids: Vec<&str> = r.neighbors.iter().map(|n| n.user_id.as_str()).collect();
        assert_eq!(ids, ["u000", "u001"]);
        assert!(index.retrieve_similar(&emb("z", vec![1.0; 3]), 0, None).is_err());
    }

    #[test]
    fn build_errors() {
        assert!(SimilarUserIndex::build(vec![]).is_err());
        let mut other = emb("b", vec![1.0]);
        other.encoder_version = "w".into();
        let err = SimilarUserIndex::build(vec![emb("a", vec![1.0]), other]).unwrap_err();
        assert!(matches!(err, Error::MixedEncoderVersions(..)));
        let index = SimilarUserIndex::build(vec![emb("a", vec![1.0])]).unwrap();
        let mut q = emb("q", vec![1.0]);
        q.encoder_version = "w".into();
        assert!(index.retrieve_similar(&q, 1, None).is_err());
    }

    #[test]
    fn manifest_is_order_independent() {
        let pool = random_pool(9, 10, 4);
        let mut rev = pool.clone();
        rev.reverse();
        let a = SimilarUserIndex::build(pool).unwrap().manifest();
        let b = SimilarUserIndex::build(rev).unwrap().manifest();
        assert_eq!(a, b);
        assert_eq!(a.user_count, 10);
    }

    fn catalog(n: usize) -> ItemCatalog {
        ItemCatalog::from_items(
            (0..n)
                .map(|i| Item {
                    item_id: format!("i{i}"),
                    title: format!("t{i}"),
                    description: String::new(),
                    image_ref: String::new(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn ids(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bag_of_items_cosines() {
        let cat = catalog(6);
        let enc = BagOfItemsEncoder::new(&cat);
        let a = enc.encode(&ids(&["i0", "i1", "i2"]));
        assert!((cosine(&a, &enc.encode(&ids(&["i0", "i1", "i2"]))) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&a, &enc.encode(&ids(&["i3", "i4"]))), 0.0);
        // one shared item: i2 is most recent in a (weight 1) and oldest of two in b (weight 0.9)
        let b = enc.encode(&ids(&["i2", "i5"]));
        let na = (1.0f64 + 0.81 + 0.6561).sqrt();
        let nb = (0.81f64 + 1.0).sqrt();
        assert!((cosine(&a, &b) - 0.9 / (na * nb)).abs() < 1e-12);
    }

    #[test]
    fn query_history_uses_full_prefix() {
        let imp = Impression {
            user_id: "u".into(),
            history: ids(&["c", "d"]),
            positive: "e".into(),
            negatives: vec![],
        };
        let mut seqs = BTreeMap::new();
        seqs.insert("u".to_string(), ids(&["a", "b", "c", "d", "e"]));
        assert_eq!(query_history(&imp, Some(&seqs), 3), ids(&["b", "c", "d"]));
        assert_eq!(query_history(&imp, None, 3), ids(&["c", "d"]));
    }

    #[test]
    fn neighbor_bundle_order_and_missing() {
        let mut store = KeywordStore::default();
        store.insert(KeywordSummary::new("i1", ["red"], ["car"]), false);
        store.insert(KeywordSummary::new("i2", Vec::<String>::new(), ["doll"]), false);
        let mut next = BTreeMap::new();
        next.insert("b".to_string(), ids(&["i2"]));
        next.insert("a".to_string(), ids(&["i1"]));
        next.insert("c".to_string(), ids(&["i9"]));
        let result = RetrievalResult {
            query_user_id: "q".into(),
            neighbors: ["b", "a", "c", "zz"]
                .iter()
                .map(|u| Neighbor {
                    user_id: u.to_string(),
                    similarity: 0.5,
                })
                .collect(),
            short: false,
            degenerate_query: false,
        };
        let bundle = neighbor_context(&result, &store, &next, 1);
        let users: Vec<&str> = bundle.entries.iter().map(|e| e.user_id.as_str()).collect();
        assert_eq!(users, ["b", "a"]);
        assert_eq!(bundle.flatten(), ids(&["doll", "red", "car"]));
        assert_eq!((bundle.missing_keywords, bundle.skipped_neighbors), (1, 1));
    }

    /// Cyclic runs over 50 items: user `u` starts at item `u % 50`.
    fn planted(users: usize, len: usize) -> (ItemCatalog, Vec<Impression>) {
        let cat = catalog(50);
        let imps = (0..users)
            .map(|u| {
                let seq: Vec<String> = (0..len).map(|j| format!("i{}", (u * 7 + j) % 50)).collect();
                Impression {
                    user_id: format!("u{u:03}"),
                    history: seq[..len - 1].to_vec(),
                    positive: seq[len - 1].clone(),
                    negatives: vec![],
                }
            })
            .collect();
        (cat, imps)
    }

    #[test]
    fn encoder_learns_planted_successor() {
        let (cat, imps) = planted(200, 6);
        let cfg = EncoderConfig {
            epochs: 15,
            ..Default::default()
        };
        let (enc, report) = train_sequence_encoder(&imps, &cat, &cfg, 7).unwrap();
        assert!(report.final_loss < report.initial_loss);
        let probe = ids(&["i10", "i11", "i12", "i13"]);
        assert_eq!(enc.predict_next(&probe), Some("i14"));
    }

    #[test]
    fn encoding_contracts() {
        let (cat, imps) = planted(60, 6);
        let cfg = EncoderConfig {
            epochs: 2,
            ..Default::default()
        };
        let (a, _) = train_sequence_encoder(&imps, &cat, &cfg, 3).unwrap();
        let (b, _) = train_sequence_encoder(&imps, &cat, &cfg, 3).unwrap();
        assert_eq!(a.version(), b.version());
        let h = ids(&["i1", "i2", "i3"]);
        assert_eq!(a.encode(&h), a.encode(&h));
        let with_unknown = ids(&["i1", "nope", "i2", "i3", "missing"]);
        assert_eq!(a.encode(&with_unknown), a.encode(&h));
        let long: Vec<String> = (0..15).map(|i| format!("i{i}")).collect();
        assert_eq!(a.encode(&long), a.encode(&long[5..]));
        let z = encode_history(&a, "u", &ids(&["nope"]));
        assert!(z.vector.iter().all(|x| *x == 0.0));
        assert!(train_sequence_encoder(&[], &cat, &cfg, 3).is_err());
    }
}
