//! Fixed fixture for the template goldens, shared by the template tests and
//! the acceptance run.

use std::path::PathBuf;

use mmrec::backends::BackendSuite;
use mmrec::corpus::{Item, ItemCatalog};
use mmrec::promptkit::{render_multiclass, render_pointwise, render_reconstruction, render_summarization};
use mmrec::summarizer::{parse_summary, render_summary_prompt, summarize_catalog, KeywordStore, KeywordSummary, SummarizePolicy};
use mmrec::synth::{synth_corpus, Profile};

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn read_golden(name: &str) -> String {
    let p = golden_dir().join(name);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

pub fn rings() -> Item {
    Item {
        item_id: "B00TOY".into(),
        title: "Wooden stacking rings".into(),
        description: "Seven painted rings on a beech peg.".into(),
        image_ref: "covers/B00TOY.jpg".into(),
    }
}

pub fn city_map() -> Item {
    Item {
        item_id: "B00MAP".into(),
        title: "Felt city map".into(),
        description: "A play mat with roads and a <image> sticker.".into(),
        image_ref: "covers/B00MAP.jpg".into(),
    }
}

fn kw(words: &[&str]) -> Vec<String> {
    words.iter().map(|s| s.to_string()).collect()
}

/// `(golden file name, rendered text)` for every checked template.
pub fn renderings() -> Vec<(&'static str, String)> {
    let user = kw(&["red", "round", "toy", "rings"]);
    let nbrs = kw(&["blocks", "puzzle"]);
    let (a, b) = (rings(), city_map());
    let mut store = KeywordStore::default();
    store.insert(KeywordSummary::new("B00TOY", ["red", "round"], ["wooden", "rings", "peg"]), false);
    let summ = render_summarization(&a, &store).expect("stored summary");
    vec![
        ("summarize_prompt.txt", render_summary_prompt(&a).text),
        ("pointwise.txt", render_pointwise(&user, Some(&nbrs), &a).text),
        ("pointwise_no_neighbors.txt", render_pointwise(&user, None, &a).text),
        ("multiclass.txt", render_multiclass(&user, Some(&nbrs), &[&a, &b], Some(0), 20).unwrap().text),
        (
            "reconstruction.txt",
            render_reconstruction(&store.keywords("B00TOY"), &a).unwrap().text,
        ),
        ("summarize_prompt.txt", summ.text),
        ("summarization_target.txt", summ.target),
    ]
}

/// Names of golden files whose bytes differ from the rendering.
pub fn golden_mismatches() -> Vec<String> {
    renderings()
        .into_iter()
        .filter(|(name, text)| read_golden(name).as_bytes() != text.as_bytes())
        .map(|(name, _)| name.to_string())
        .collect()
}

/// Summarizes a synthetic catalog with the mock backend and returns the ids
/// whose rendered summary does not parse back to the stored record.
pub fn summary_roundtrip_failures(seed: u64) -> (usize, Vec<String>) {
    let corpus = synth_corpus(Profile::ClusteredTaste, seed);
    let catalog = ItemCatalog::from_items(corpus.items).unwrap();
    let suite = BackendSuite::mock(Default::default());
    let dir = tempfile::tempdir().unwrap();
    let report = summarize_catalog(
        &catalog,
        suite.generator.as_ref(),
        &dir.path().join("keywords.jsonl"),
        &SummarizePolicy::default(),
    )
    .unwrap();
    let stored = KeywordStore::load(&dir.path().join("keywords.jsonl")).unwrap();
    assert_eq!(stored, report.store);
    let bad = stored
        .records()
        .filter(|r| {
            let s = r.summary();
            parse_summary(&s.render(), &r.item_id).ok().as_ref() != Some(&s)
        })
        .map(|r| r.item_id.clone())
        .collect();
    (stored.len(), bad)
}
