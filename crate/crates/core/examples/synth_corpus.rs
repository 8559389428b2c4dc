//! Generates both synthetic corpora and prints a few statistics.
//!
//! cargo run --example synth_corpus -- /tmp/corpora

use std::collections::BTreeMap;
use std::path::PathBuf;

use mmrec::synth::{synth_corpus, Profile};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from);
    for profile in [Profile::PlantedSequential, Profile::ClusteredTaste] {
        let c = synth_corpus(profile, 42);
        let mut per_user: BTreeMap<&str, usize> = BTreeMap::new();
        for i in &c.interactions {
            *per_user.entry(i.user_id.as_str()).or_default() += 1;
        }
        let mean = c.interactions.len() as f64 / per_user.len() as f64;
        println!(
            "{:<18} items={:<4} users={:<5} interactions={:<6} mean length {mean:.1}",
            profile.as_str(),
            c.items.len(),
            per_user.len(),
            c.interactions.len()
        );
        println!("  e.g. {} | {} | {}", c.items[0].item_id, c.items[0].title, c.items[0].image_ref);
        if let Some(dir) = &out {
            c.write(&dir.join(profile.as_str()))?;
        }
    }
    Ok(())
}
