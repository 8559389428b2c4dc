//! Trains the self-attention encoder on the planted-sequential corpus,
//! indexes the training users and retrieves neighbors for a few held-out
//! users.

use mmrec::corpus::{build_impressions, split_impressions, user_sequences, ImpressionParams, ItemCatalog};
use mmrec::retriever::{embed_impressions, train_sequence_encoder, EncoderConfig, SimilarUserIndex};
use mmrec::synth::{synth_corpus, Profile};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = synth_corpus(Profile::PlantedSequential, 42);
    let catalog = ItemCatalog::from_items(corpus.items)?;
    let imps = build_impressions(&corpus.interactions, &catalog, &ImpressionParams::default())?.impressions;
    let split = split_impressions(&imps, [8, 1, 1], 42)?;
    let seqs = user_sequences(&corpus.interactions);

    let cfg = EncoderConfig {
        epochs: 10,
        ..Default::default()
    };
    let (enc, report) = train_sequence_encoder(&split.train, &catalog, &cfg, 42)?;
    println!(
        "{}: loss {:.3} -> {:.3}",
        enc.version(),
        report.initial_loss,
        report.final_loss
    );

    let index = SimilarUserIndex::build(embed_impressions(&enc, &split.train, Some(&seqs), cfg.max_len))?;
    let queries = embed_impressions(&enc, &split.test, Some(&seqs), cfg.max_len);
    for q in queries.iter().take(4) {
        let hist = &seqs[&q.user_id];
        let res = index.retrieve_similar(q, 3, Some(&q.user_id))?;
        println!("{} (last items {:?})", q.user_id, &hist[hist.len().saturating_sub(3)..]);
        for n in &res.neighbors {
            let nh = &seqs[&n.user_id];
            println!("    {:<6} sim {:.3}  last items {:?}", n.user_id, n.similarity, &nh[nh.len().saturating_sub(3)..]);
        }
    }
    Ok(())
}
