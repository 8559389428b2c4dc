//! Sweeps the number of retrieved neighbors with the oracle mock ranking by
//! keyword overlap only.

use mmrec::pipeline::{sweep, DataConfig, PipelineConfig, SweepParam};
use mmrec::recommender::ScoringConfig;
use mmrec::synth::{synth_corpus, Profile};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join("mmrec-sweep-example");
    synth_corpus(Profile::ClusteredTaste, 42).write(&root.join("data"))?;
    let config = PipelineConfig {
        work_dir: root.join("run"),
        data: DataConfig {
            items: root.join("data/items.jsonl"),
            interactions: root.join("data/interactions.jsonl"),
            ..Default::default()
        },
        scoring: ScoringConfig {
            reveal_label_to_backend: false,
            ..Default::default()
        },
        ..Default::default()
    };
    let rows = sweep(&config, SweepParam::K, &[0, 1, 3, 5], false)?;
    println!("{:>3} {:>7} {:>7} {:>7}", "k", "HR@5", "NDCG@5", "AUC");
    for r in rows {
        println!("{:>3} {:>7.2} {:>7.2} {:>7.2}", r.value, r.hr, r.ndcg, r.auc);
    }
    println!("tables in {}", root.join("run/sweep").display());
    Ok(())
}
