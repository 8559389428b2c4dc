//! Runs every stage on a synthetic corpus, then runs again to show that
//! unchanged stages are skipped.
//!
//! cargo run --release --example full_pipeline -- /tmp/mmrec-run

use std::path::PathBuf;
use std::time::Instant;

use mmrec::pipeline::{DataConfig, Pipeline, PipelineConfig, Stage};
use mmrec::synth::{synth_corpus, Profile};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("mmrec-example"));
    synth_corpus(Profile::ClusteredTaste, 42).write(&root.join("data"))?;
    let config = PipelineConfig {
        work_dir: root.join("run"),
        data: DataConfig {
            items: root.join("data/items.jsonl"),
            interactions: root.join("data/interactions.jsonl"),
            ..Default::default()
        },
        ..Default::default()
    };

    let t = Instant::now();
    let report = Pipeline::new(config.clone(), true)?.run_all()?;
    println!("{} [{:.1?}]", report.summary_line(), t.elapsed());

    let t = Instant::now();
    let outcomes = Pipeline::new(config, false)?.run_stages(&Stage::ALL)?;
    let skipped = outcomes.iter().filter(|o| o.skipped).count();
    println!("second run: {skipped}/{} stages up to date [{:.1?}]", outcomes.len(), t.elapsed());
    println!("artifacts under {}", root.join("run").display());
    Ok(())
}
