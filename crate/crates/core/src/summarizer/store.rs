use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{parse_summary, render_summary_prompt, KeywordSummary};
use crate::backends::{GenerateRequest, Generator};
use crate::corpus::ItemCatalog;
use crate::error::{Error, Result};
use crate::io::write_jsonl;

/// One line of the keyword store file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordRecord {
    pub item_id: String,
    pub cover_keywords: Vec<String>,
    pub content_keywords: Vec<String>,
    pub failure_flag: bool,
}

impl KeywordRecord {
    pub fn summary(&self) -> KeywordSummary {
        KeywordSummary {
            item_id: self.item_id.clone(),
            cover_keywords: self.cover_keywords.clone(),
            content_keywords: self.content_keywords.clone(),
        }
    }
}

/// Keyword summaries by item id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeywordStore {
    records: BTreeMap<String, KeywordRecord>,
}

impl KeywordStore {
    pub fn insert(&mut self, summary: KeywordSummary, failure_flag: bool) {
        self.records.insert(
            summary.item_id.clone(),
            KeywordRecord {
                item_id: summary.item_id,
                cover_keywords: summary.cover_keywords,
                content_keywords: summary.content_keywords,
                failure_flag,
            },
        );
    }

    pub fn get(&self, item_id: &str) -> Option<&KeywordRecord> {
        self.records.get(item_id)
    }

    pub fn summary(&self, item_id: &str) -> Option<KeywordSummary> {
        self.get(item_id).map(KeywordRecord::summary)
    }

    /// All keywords of an item, cover then content; empty when unknown.
    pub fn keywords(&self, item_id: &str) -> Vec<String> {
        self.get(item_id)
            .map(|r| r.cover_keywords.iter().chain(&r.content_keywords).cloned().collect())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn failures(&self) -> usize {
        self.records.values().filter(|r| r.failure_flag).count()
    }

    pub fn records(&self) -> impl Iterator<Item = &KeywordRecord> {
        self.records.values()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<KeywordRecord> = crate::io::read_jsonl(path)?;
        Ok(Self {
            records: records.into_iter().map(|r| (r.item_id.clone(), r)).collect(),
        })
    }

    /// Writes records in catalog order, then any item not in the catalog by id.
    pub fn save(&self, path: &Path, catalog: &ItemCatalog) -> Result<()> {
        let mut ordered: Vec<&KeywordRecord> = catalog.iter().filter_map(|i| self.records.get(&i.item_id)).collect();
        ordered.extend(self.records.values().filter(|r| !catalog.contains(&r.item_id)));
        write_jsonl(path, ordered)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SummarizePolicy {
    pub max_tokens: usize,
    /// Extra generations after a parse failure.
    pub parse_retries: usize,
}

impl Default for SummarizePolicy {
    fn default() -> Self {
        Self {
            max_tokens: 128,
            parse_retries: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SummarizeReport {
    pub store: KeywordStore,
    /// Items summarized in this call.
    pub generated: usize,
    /// Items found in the checkpoint and skipped.
    pub resumed: usize,
    /// Items recorded with empty lists after repeated parse failures.
    pub parse_failures: usize,
}

/// Reads a checkpoint, ignoring a trailing partially written line.
fn read_checkpoint(path: &Path) -> Result<KeywordStore> {
    let mut store = KeywordStore::default();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(store),
        Err(e) => return Err(Error::io(path, e)),
    };
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        match serde_json::from_str::<KeywordRecord>(&line) {
            Ok(r) => {
                store.records.insert(r.item_id.clone(), r);
            }
            Err(_) if line.trim().is_empty() => {}
            Err(e) => log::warn!("{}: skipping unreadable checkpoint line: {e}", path.display()),
        }
    }
    Ok(store)
}

/// Summarizes every catalog item into `store_path`.
///
/// Each finished item is appended to a checkpoint next to the store, so an
/// interrupted run (for example, an unavailable backend) resumes where it
/// stopped. On success the store is rewritten in catalog order and the
/// checkpoint removed.
pub fn summarize_catalog(
    catalog: &ItemCatalog,
    generator: &dyn Generator,
    store_path: &Path,
    policy: &SummarizePolicy,
) -> Result<SummarizeReport> {
    let mut ckpt_name = store_path.as_os_str().to_owned();
    ckpt_name.push(".partial");
    let ckpt_path = std::path::PathBuf::from(ckpt_name);
    let mut store = read_checkpoint(&ckpt_path)?;
    let resumed = catalog.iter().filter(|i| store.get(&i.item_id).is_some()).count();
    if let Some(dir) = ckpt_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut ckpt = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&ckpt_path)
        .map_err(|e| Error::io(&ckpt_path, e))?;

    let mut generated = 0;
    let mut parse_failures = 0;
    for item in catalog.iter() {
        if store.get(&item.item_id).is_some() {
            continue;
        }
        let prompt = render_summary_prompt(item);
        let req = GenerateRequest {
            prompt: &prompt,
            max_tokens: policy.max_tokens,
            item: Some(item),
        };
        let mut parsed = None;
        for _ in 0..=policy.parse_retries {
            let text = generator.generate(&req)?;
            match parse_summary(&text, &item.item_id) {
                Ok(s) => {
                    parsed = Some(s);
                    break;
                }
                Err(e) => log::debug!("{e}"),
            }
        }
        let failed = parsed.is_none();
        if failed {
            parse_failures += 1;
            log::warn!("item {}: summary did not parse, storing empty lists", item.item_id);
        }
        let summary = parsed.unwrap_or_else(|| KeywordSummary::new(&item.item_id, Vec::<String>::new(), Vec::<String>::new()));
        store.insert(summary, failed);
        let line = serde_json::to_string(store.get(&item.item_id).expect("just inserted"))?;
        writeln!(ckpt, "{line}").map_err(|e| Error::io(&ckpt_path, e))?;
        ckpt.flush().map_err(|e| Error::io(&ckpt_path, e))?;
        generated += 1;
    }
    drop(ckpt);
    store.save(store_path, catalog)?;
    std::fs::remove_file(&ckpt_path).map_err(|e| Error::io(&ckpt_path, e))?;
    Ok(SummarizeReport {
        store,
        generated,
        resumed,
        parse_failures,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::backends::{BackendError, MockBackend, MockState};
    use crate::corpus::Item;

    fn catalog(n: usize) -> ItemCatalog {
        ItemCatalog::from_items(
            (0..n)
                .map(|i| Item {
                    item_id: format!("i{i}"),
                    title: format!("soft toy number{i}"),
                    description: format!("a soft plush toy with tag{i}"),
                    image_ref: format!("brown bear photo{i}"),
                })
                .collect(),
        )
        .unwrap()
    }

    /// Mock generator that fails after `budget` calls and counts calls.
    struct Flaky {
        inner: MockBackend,
        budget: usize,
        calls: AtomicUsize,
    }

    impl Generator for Flaky {
        fn generate(&self, req: &GenerateRequest<'_>) -> std::result::Result<String, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n >= self.budget {
                return Err(BackendError::Unavailable {
                    attempts: 1,
                    message: "down".into(),
                });
            }
            self.inner.generate(req)
        }
    }

    struct Garbage(AtomicUsize);

    impl Generator for Garbage {
        fn generate(&self, _: &GenerateRequest<'_>) -> std::result::Result<String, BackendError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok("I cannot help with that".into())
        }
    }

    #[test]
    fn mock_summaries_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let cat = catalog(10);
        let m = MockBackend::new(MockState::default());
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let ra = summarize_catalog(&cat, &m, &a, &SummarizePolicy::default()).unwrap();
        summarize_catalog(&cat, &m, &b, &SummarizePolicy::default()).unwrap();
        assert_eq!(ra.store.len(), 10);
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(KeywordStore::load(&a).unwrap(), ra.store);
    }

    #[test]
    fn interrupted_run_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let cat = catalog(10);
        let path = dir.path().join("kw.jsonl");
        let flaky = Flaky {
            inner: MockBackend::new(MockState::default()),
            budget: 5,
            calls: AtomicUsize::new(0),
        };
        let err = summarize_catalog(&cat, &flaky, &path, &SummarizePolicy::default()).unwrap_err();
        assert!(matches!(err, Error::Backend(BackendError::Unavailable { .. })));
        assert!(!path.exists());

        let counting = Flaky {
            inner: MockBackend::new(MockState::default()),
            budget: usize::MAX,
            calls: AtomicUsize::new(0),
        };
        let report = summarize_catalog(&cat, &counting, &path, &SummarizePolicy::default()).unwrap();
        assert_eq!(counting.calls.load(Ordering::SeqCst), 5);
        assert_eq!((report.resumed, report.generated), (5, 5));

        let fresh = dir.path().join("fresh.jsonl");
        summarize_catalog(&cat, &MockBackend::new(MockState::default()), &fresh, &SummarizePolicy::default()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&fresh).unwrap());
    }

    #[test]
    fn garbage_output_is_recorded_as_failure() {
        let dir = tempfile::tempdir().unwrap();
        let cat = catalog(1);
        let g = Garbage(AtomicUsize::new(0));
        let r = summarize_catalog(&cat, &g, &dir.path().join("kw.jsonl"), &SummarizePolicy::default()).unwrap();
        assert_eq!(r.parse_failures, 1);
        assert_eq!(g.0.load(Ordering::SeqCst), 2);
        let rec = r.store.get("i0").unwrap();
        assert!(rec.failure_flag && rec.cover_keywords.is_empty() && rec.content_keywords.is_empty());
    }
}
