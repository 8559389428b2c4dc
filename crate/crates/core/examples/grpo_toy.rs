//! Trains the toy categorical summarization policy on one item and prints
//! the reward curve and the summary it settles on.

use mmrec::backends::{BackendSuite, MockState};
use mmrec::summarizer::{grpo_advantages, grpo_toy_optimize, CandidateSpace, GrpoConfig, RewardConfig};
use mmrec::synth::{synth_corpus, Profile};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let adv = grpo_advantages(&[1.0, 2.0, 3.0, 6.0], 1e-6)?;
    println!("advantages of [1, 2, 3, 6]: {adv:.3?}");

    let item = synth_corpus(Profile::ClusteredTaste, 42).items.remove(0);
    let space = CandidateSpace::default_for(&item);
    let suite = BackendSuite::mock(MockState::default());
    let trace = grpo_toy_optimize(&item, &space, &suite, &RewardConfig::default(), &GrpoConfig::default(), 7)?;
    println!("item {} ({} candidate summaries)", item.item_id, space.len());
    for s in trace.steps.iter().step_by(25) {
        println!("  step {:>3}  mean reward {:>8.4}  max prob {:.3}", s.step, s.mean_reward, s.max_prob);
    }
    let n = trace.steps.len();
    println!(
        "first 20 steps {:.4}, last 20 steps {:.4}",
        trace.window_mean(0..20),
        trace.window_mean(n - 20..n)
    );
    println!("preferred summary:\n{}", space.candidates[trace.best_candidate].render());
    Ok(())
}
