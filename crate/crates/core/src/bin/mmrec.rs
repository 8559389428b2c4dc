use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmrec::pipeline::{sweep, Pipeline, PipelineConfig, Stage, SweepParam};
use mmrec::synth::{synth_corpus, Profile};

#[derive(Parser)]
#[command(name = "mmrec", version, about = "Keyword-summary sequential recommendation pipeline")]
struct Cli {
    /// TOML configuration file; MMREC_* environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Re-run stages even when the manifest says they are up to date.
    #[arg(long, global = true)]
    force: bool,
    /// mock-oracle, mock-random or remote:<url>
    #[arg(long, global = true)]
    backend: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read raw items and interactions, reporting rejected lines.
    Ingest,
    /// Drop users and items below the activity thresholds.
    Filter,
    /// Build history + positive + sampled negatives per user.
    Impressions,
    /// Partition impressions into train/valid/test.
    Split,
    /// Summarize every item into cover and content keywords.
    Summarize,
    /// Train the toy summarization policy on a few items.
    GrpoToy,
    /// Train the sequence encoder on training histories.
    TrainRetriever,
    /// Embed training users into the similar-user index.
    BuildIndex,
    /// Retrieve similar training users for every impression.
    Retrieve,
    /// Write the multi-task fine-tuning dataset.
    BuildSft,
    /// Score the evaluation split and report HR@5, NDCG@5 and AUC.
    Evaluate,
    /// Evaluate once per value of n or k.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Write a synthetic corpus (items.jsonl, interactions.jsonl).
    Synth {
        #[arg(long)]
        profile: Profile,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Run every stage in order.
    Pipeline,
}

fn run(cli: Cli) -> mmrec::Result<()> {
    let mut config = PipelineConfig::load(cli.config.as_deref(), std::env::vars())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(b) = cli.backend {
        config.backend = b;
    }
    let stage = match cli.command {
        Command::Synth { profile, out } => {
            synth_corpus(profile, config.seed).write(&out)?;
            println!("wrote {} corpus to {}", profile.as_str(), out.display());
            return Ok(());
        }
        Command::Sweep { param, values } => {
            config.validate()?;
            for r in sweep(&config, param, &values, cli.force)? {
                println!("{:?}={:<3} HR@5={:.2} NDCG@5={:.2} AUC={:.2}", r.param, r.value, r.hr, r.ndcg, r.auc);
            }
            return Ok(());
        }
        Command::Pipeline => {
            let report = Pipeline::new(config, cli.force)?.run_all()?;
            println!("{}", report.summary_line());
            return Ok(());
        }
        Command::Ingest => Stage::Ingest,
        Command::Filter => Stage::Filter,
        Command::Impressions => Stage::Impressions,
        Command::Split => Stage::Split,
        Command::Summarize => Stage::Summarize,
        Command::GrpoToy => Stage::GrpoToy,
        Command::TrainRetriever => Stage::TrainRetriever,
        Command::BuildIndex => Stage::BuildIndex,
        Command::Retrieve => Stage::Retrieve,
        Command::BuildSft => Stage::BuildSft,
        Command::Evaluate => Stage::Evaluate,
    };
    let out = Pipeline::new(config, cli.force)?.run_stage(stage)?;
    let verb = if out.skipped { "up to date" } else { "done" };
    println!("{stage}: {verb}");
    for p in out.outputs {
        println!("  {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
