//! Scores clustered-taste impressions with both mock modes and with and
//! without collaborative context, then prints HR@5, NDCG@5 and AUC.

use mmrec::backends::{BackendSuite, MockMode, MockState};
use mmrec::corpus::{build_impressions, Impression, ImpressionParams, ItemCatalog};
use mmrec::recommender::{evaluate, ConfigEcho, ImpressionContext, ScoringConfig};
use mmrec::summarizer::{summarize_catalog, KeywordStore, SummarizePolicy};
use mmrec::synth::{synth_corpus, Profile};

fn run(
    mode: MockMode,
    reveal: bool,
    imps: &[Impression],
    contexts: &[ImpressionContext],
    catalog: &ItemCatalog,
    store: &KeywordStore,
) -> mmrec::Result<()> {
    let suite = BackendSuite::mock(MockState::with_mode(mode, 42));
    let cfg = ScoringConfig {
        reveal_label_to_backend: reveal,
        ..Default::default()
    };
    let echo = ConfigEcho {
        history_len: 5,
        neighbors_k: usize::from(contexts[0].neighbor_keywords.is_some()),
        seed: 42,
        backend: suite.label.clone(),
        reveal_label_to_backend: reveal,
    };
    let r = evaluate(imps, contexts, catalog, store, suite.first_token.as_ref(), &cfg, echo)?;
    println!("{}  reveal={reveal}", r.summary_line());
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = synth_corpus(Profile::ClusteredTaste, 42);
    let catalog = ItemCatalog::from_items(corpus.items)?;
    let imps = build_impressions(&corpus.interactions, &catalog, &ImpressionParams::default())?.impressions;
    let suite = BackendSuite::mock(MockState::default());
    let dir = tempfile::tempdir()?;
    let store = summarize_catalog(&catalog, suite.generator.as_ref(), &dir.path().join("kw.jsonl"), &SummarizePolicy::default())?.store;

    let plain: Vec<ImpressionContext> = imps.iter().map(|i| ImpressionContext::new(&i.history, &store, None)).collect();
    run(MockMode::Random, true, &imps, &plain, &catalog, &store)?;
    run(MockMode::Oracle, true, &imps, &plain, &catalog, &store)?;
    run(MockMode::Oracle, false, &imps, &plain, &catalog, &store)?;

    // A cheating neighbor: the keywords of the user's own next item. Real
    // neighbors come from the retriever (see the pipeline example).
    let leaked: Vec<ImpressionContext> = imps
        .iter()
        .map(|i| ImpressionContext::new(&i.history, &store, Some(store.keywords(&i.positive))))
        .collect();
    run(MockMode::Oracle, false, &imps, &leaked, &catalog, &store)?;
    Ok(())
}
