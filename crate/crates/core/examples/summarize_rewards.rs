//! Summarizes a small catalog with the mock backend and scores each summary
//! with the three verifiable rewards.

use mmrec::backends::{BackendSuite, MockState};
use mmrec::corpus::ItemCatalog;
use mmrec::summarizer::{score_summary, summarize_catalog, KeywordSummary, RewardConfig, SummarizePolicy};
use mmrec::synth::{synth_corpus, Profile};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = synth_corpus(Profile::ClusteredTaste, 42);
    let catalog = ItemCatalog::from_items(corpus.items.into_iter().take(6).collect())?;
    let suite = BackendSuite::mock(MockState::default());
    let dir = tempfile::tempdir()?;
    let report = summarize_catalog(
        &catalog,
        suite.generator.as_ref(),
        &dir.path().join("keywords.jsonl"),
        &SummarizePolicy::default(),
    )?;
    let cfg = RewardConfig::default();
    println!("{:<8} {:>7} {:>8} {:>6} {:>8}  keywords", "item", "info", "recon", "len", "total");
    for item in catalog.iter() {
        let s = report.store.summary(&item.item_id).expect("summarized");
        let r = score_summary(&s, item, &suite, &cfg)?;
        println!(
            "{:<8} {:>7.3} {:>8.2} {:>6} {:>8.3}  {}",
            item.item_id,
            r.r_info,
            r.r_recon,
            r.r_len,
            r.total,
            s.joined()
        );
    }

    // Padding a summary with filler words costs length reward and usually
    // dilutes the information reward too.
    let item = catalog.iter().next().unwrap();
    let base = report.store.summary(&item.item_id).unwrap();
    let padded = KeywordSummary::new(
        &item.item_id,
        base.cover_keywords.iter().map(String::as_str).chain(["nice", "good", "great"]),
        base.content_keywords.iter().map(String::as_str).chain(["item", "thing"]),
    );
    let a = score_summary(&base, item, &suite, &cfg)?.total;
    let b = score_summary(&padded, item, &suite, &cfg)?.total;
    println!("\n{}: stored summary {a:.3}, padded summary {b:.3}", item.item_id);
    Ok(())
}
