//! Renders the four instruction kinds for one training impression and
//! builds a small multi-task dataset.

use std::collections::BTreeMap;

use mmrec::backends::{BackendSuite, MockState};
use mmrec::corpus::{build_impressions, ImpressionParams, ItemCatalog};
use mmrec::promptkit::{
    build_sft_dataset, render_multiclass, render_pointwise, render_reconstruction, render_summarization, user_keywords,
    SftConfig,
};
use mmrec::summarizer::{summarize_catalog, SummarizePolicy};
use mmrec::synth::{synth_corpus, Profile};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = synth_corpus(Profile::ClusteredTaste, 42);
    let catalog = ItemCatalog::from_items(corpus.items)?;
    let imps = build_impressions(&corpus.interactions, &catalog, &ImpressionParams::default())?.impressions;
    let suite = BackendSuite::mock(MockState::default());
    let dir = tempfile::tempdir()?;
    let store = summarize_catalog(&catalog, suite.generator.as_ref(), &dir.path().join("kw.jsonl"), &SummarizePolicy::default())?.store;

    let imp = &imps[0];
    let uk = user_keywords(&imp.history, &store);
    let nk = store.keywords(&imps[1].positive);
    let pos = catalog.get(&imp.positive).unwrap();
    let neg = catalog.get(&imp.negatives[0]).unwrap();

    let sections = [
        render_pointwise(&uk, Some(&nk), pos),
        render_multiclass(&uk, Some(&nk), &[neg, pos], Some(1), 5)?,
        render_reconstruction(&store.keywords(&pos.item_id), pos).unwrap(),
        render_summarization(pos, &store).unwrap(),
    ];
    for p in &sections {
        println!("===== {:?} ({} image(s)) =====\n{}\n----- target -----\n{}\n", p.task_kind, p.media.len(), p.text, p.target);
    }

    let cfg = SftConfig {
        total_instances: Some(200),
        ..Default::default()
    };
    let ds = build_sft_dataset(&imps[..100], &catalog, &store, &BTreeMap::new(), &cfg, 42)?;
    println!("dataset: {} instances, mix {:?}, skipped {}", ds.instances.len(), ds.mix_report, ds.skipped);
    Ok(())
}
