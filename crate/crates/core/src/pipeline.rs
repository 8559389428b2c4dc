//! File-based stage orchestration with a checksum manifest.
//!
//! Every stage reads and writes plain files under `work_dir`. The manifest
//! records, per stage, a hash of the parameters that stage depends on and the
//! SHA-256 of each input and output. A stage is skipped when all of those
//! still match, unless `force` is set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backends::{BackendSuite, MockMode, MockState, RemoteConfig};
use crate::corpus::{
    build_impressions, filter_min_activity, ingest_interactions, ingest_items, split_impressions, user_sequences,
    Impression, ImpressionParams, Interaction, Item, ItemCatalog,
};
use crate::error::{Error, Result};
use crate::io::{file_sha256, read_json, read_jsonl, sha256_hex, write_atomic, write_json, write_jsonl};
use crate::promptkit::{build_sft_dataset, SftConfig};
use crate::recommender::{evaluate, ConfigEcho, EvalReport, ImpressionContext, ScoringConfig};
use crate::retriever::{
    embed_impressions, load_embeddings, neighbor_context, next_items_by_user, save_embeddings,
    train_sequence_encoder, BagOfItemsEncoder, EncoderConfig, RetrievalResult, SasRecEncoder, SequenceEncoder,
    SimilarUserIndex,
};
use crate::summarizer::{grpo_toy_optimize, summarize_catalog, CandidateSpace, GrpoConfig, KeywordStore, RewardConfig, SummarizePolicy};

/// Prefix of environment variables that override config keys. Nested keys
/// are joined with a double underscore: `MMREC_ENCODER__EPOCHS=5`.
pub const ENV_PREFIX: &str = "MMREC_";

/// Which model backend serves the stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSelection {
    MockOracle,
    MockRandom,
    Remote(String),
}

impl FromStr for BackendSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock-oracle" => Ok(Self::MockOracle),
            "mock-random" => Ok(Self::MockRandom),
            _ => match s.strip_prefix("remote:") {
                Some(url) if !url.is_empty() => Ok(Self::Remote(url.to_string())),
                _ => Err(Error::Config(format!(
                    "backend {s:?} is not one of mock-oracle, mock-random, remote:<url>"
                ))),
            },
        }
    }
}

impl fmt::Display for BackendSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MockOracle => f.write_str("mock-oracle"),
            Self::MockRandom => f.write_str("mock-random"),
            Self::Remote(url) => write!(f, "remote:{url}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Sasrec,
    BagOfItems,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub items: PathBuf,
    pub interactions: PathBuf,
    pub min_user_interactions: usize,
    pub min_item_interactions: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            items: "data/items.jsonl".into(),
            interactions: "data/interactions.jsonl".into(),
            min_user_interactions: 5,
            min_item_interactions: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub work_dir: PathBuf,
    /// `mock-oracle`, `mock-random` or `remote:<url>`.
    pub backend: String,
    pub remote: RemoteConfig,
    pub data: DataConfig,
    /// n, the number of history items in a prompt.
    pub history_len: usize,
    /// k, the number of retrieved similar users; 0 removes the neighbor section.
    pub neighbors_k: usize,
    pub num_negatives: usize,
    pub multi_prefix: bool,
    pub split_ratios: [u64; 3],
    pub eval_split: EvalSplit,
    pub summarize: SummarizePolicy,
    pub rewards: RewardConfig,
    pub grpo: GrpoConfig,
    /// Items used by the toy GRPO stage, in catalog order.
    pub grpo_items: usize,
    pub encoder_kind: EncoderKind,
    pub encoder: EncoderConfig,
    pub sft: SftConfig,
    pub scoring: ScoringConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            work_dir: "run".into(),
            backend: "mock-oracle".into(),
            remote: RemoteConfig::default(),
            data: DataConfig::default(),
            history_len: 5,
            neighbors_k: 3,
            num_negatives: 20,
            multi_prefix: false,
            split_ratios: [8, 1, 1],
            eval_split: EvalSplit::Test,
            summarize: SummarizePolicy::default(),
            rewards: RewardConfig::default(),
            grpo: GrpoConfig::default(),
            grpo_items: 10,
            encoder_kind: EncoderKind::Sasrec,
            encoder: EncoderConfig::default(),
            sft: SftConfig::default(),
            scoring: ScoringConfig::default(),
        }
    }
}

/// Dotted paths present in `given` but not in `known`. Settings that are
/// unset by default never appear in `known` and are listed separately.
fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (k, v) in given {
        let path = format!("{prefix}{k}");
        match (v, known.get(k)) {
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => out.extend(unknown_keys(g, kn, &format!("{path}."))),
            (_, Some(_)) => {}
            (_, None) if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            (_, None) => out.push(path),
        }
    }
    out
}

const OPTIONAL_KEYS: [&str; 2] = ["remote.embedding_url", "sft.total_instances"];

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.backend.parse::<BackendSelection>()?;
        self.rewards.weights.validate()?;
        self.grpo.validate()?;
        self.encoder.validate()?;
        if self.history_len == 0 {
            return Err(Error::Config("history_len must be >= 1".into()));
        }
        if self.encoder.max_len < self.history_len {
            return Err(Error::Config(format!(
                "encoder.max_len {} is shorter than history_len {}",
                self.encoder.max_len, self.history_len
            )));
        }
        Ok(())
    }

    pub fn backend_selection(&self) -> BackendSelection {
        self.backend.parse().expect("validated backend")
    }

    /// Loads a TOML file (or defaults when `path` is `None`) and applies
    /// `MMREC_*` overrides from `env`.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_lowercase(), v)))
            .collect();
        overrides.sort();
        for (key, value) in overrides {
            apply_override(&mut table, &key, &value)?;
        }
        if let Ok(toml::Value::Table(known)) = toml::Value::try_from(Self::default()) {
            for key in unknown_keys(&table, &known, "") {
                log::warn!("config key {key:?} is not recognized and has no effect");
            }
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable hash of the whole configuration.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split("__").collect();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {ENV_PREFIX}{}: {p} is not a table", key.to_uppercase())))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Filter,
    Impressions,
    Split,
    Summarize,
    GrpoToy,
    TrainRetriever,
    BuildIndex,
    Retrieve,
    BuildSft,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Ingest,
        Stage::Filter,
        Stage::Impressions,
        Stage::Split,
        Stage::Summarize,
        Stage::GrpoToy,
        Stage::TrainRetriever,
        Stage::BuildIndex,
        Stage::Retrieve,
        Stage::BuildSft,
        Stage::Evaluate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Filter => "filter",
            Stage::Impressions => "impressions",
            Stage::Split => "split",
            Stage::Summarize => "summarize",
            Stage::GrpoToy => "grpo-toy",
            Stage::TrainRetriever => "train-retriever",
            Stage::BuildIndex => "build-index",
            Stage::Retrieve => "retrieve",
            Stage::BuildSft => "build-sft",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Artifact locations under the work directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    fn at(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
    pub fn manifest(&self) -> PathBuf {
        self.at("manifest.json")
    }
    pub fn raw_items(&self) -> PathBuf {
        self.at("ingest/items.jsonl")
    }
    pub fn raw_interactions(&self) -> PathBuf {
        self.at("ingest/interactions.jsonl")
    }
    pub fn rejects(&self) -> PathBuf {
        self.at("ingest/rejects.json")
    }
    pub fn items(&self) -> PathBuf {
        self.at("filter/items.jsonl")
    }
    pub fn interactions(&self) -> PathBuf {
        self.at("filter/interactions.jsonl")
    }
    pub fn impressions(&self) -> PathBuf {
        self.at("impressions/impressions.jsonl")
    }
    pub fn impressions_report(&self) -> PathBuf {
        self.at("impressions/report.json")
    }
    pub fn split(&self, name: &str) -> PathBuf {
        self.at(&format!("split/{name}.jsonl"))
    }
    pub fn keywords(&self) -> PathBuf {
        self.at("summarize/keywords.jsonl")
    }
    pub fn grpo_toy(&self) -> PathBuf {
        self.at("grpo-toy/traces.json")
    }
    pub fn encoder(&self) -> PathBuf {
        self.at("retriever/encoder.json")
    }
    pub fn encoder_report(&self) -> PathBuf {
        self.at("retriever/train_report.json")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.at("index/embeddings.jsonl")
    }
    pub fn index_manifest(&self) -> PathBuf {
        self.at("index/manifest.json")
    }
    pub fn neighbors(&self) -> PathBuf {
        self.at("retrieve/neighbors.jsonl")
    }
    pub fn sft(&self) -> PathBuf {
        self.at("sft/sft.jsonl")
    }
    pub fn sft_report(&self) -> PathBuf {
        self.at("sft/report.json")
    }
    pub fn report(&self) -> PathBuf {
        self.at("evaluate/report.json")
    }
    pub fn report_rows(&self) -> PathBuf {
        self.at("evaluate/rows.csv")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub params_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if path.exists() {
            read_json(path)
        } else {
            Ok(Self::default())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
    pub outputs: Vec<PathBuf>,
}

struct StageSpec {
    /// Input path and the stage that produces it (`None` for user data).
    inputs: Vec<(PathBuf, Option<Stage>)>,
    outputs: Vec<PathBuf>,
    params: serde_json::Value,
}

/// On-disk marker for the training-free encoder.
#[derive(Debug, Serialize, Deserialize)]
struct BagMarker {
    kind: String,
}

/// Runs stages against one configuration.
pub struct Pipeline {
    config: PipelineConfig,
    force: bool,
    suite: OnceLock<BackendSuite>,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline")
            .field("work_dir", &self.config.work_dir)
            .field("force", &self.force)
            .finish()
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig, force: bool) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            force,
            suite: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn artifacts(&self) -> Artifacts {
        Artifacts {
            root: self.config.work_dir.clone(),
        }
    }

    /// The backend, connected on first use.
    pub fn suite(&self) -> Result<&BackendSuite> {
        if let Some(s) = self.suite.get() {
            return Ok(s);
        }
        let suite = match self.config.backend_selection() {
            BackendSelection::MockOracle => BackendSuite::mock(MockState::with_mode(MockMode::Oracle, self.config.seed)),
            BackendSelection::MockRandom => BackendSuite::mock(MockState::with_mode(MockMode::Random, self.config.seed)),
            BackendSelection::Remote(url) => BackendSuite::remote(RemoteConfig {
                base_url: url,
                ..self.config.remote.clone()
            })?,
        };
        Ok(self.suite.get_or_init(|| suite))
    }

    fn spec(&self, stage: Stage) -> StageSpec {
        let a = self.artifacts();
        let c = &self.config;
        let eval_split = match c.eval_split {
            EvalSplit::Valid => "valid",
            EvalSplit::Test => "test",
        };
        let (inputs, outputs, params) = match stage {
            Stage::Ingest => (
                vec![(c.data.items.clone(), None), (c.data.interactions.clone(), None)],
                vec![a.raw_items(), a.raw_interactions(), a.rejects()],
                json!({}),
            ),
            Stage::Filter => (
                vec![(a.raw_items(), Some(Stage::Ingest)), (a.raw_interactions(), Some(Stage::Ingest))],
                vec![a.items(), a.interactions()],
                json!([c.data.min_user_interactions, c.data.min_item_interactions]),
            ),
            Stage::Impressions => (
                vec![(a.items(), Some(Stage::Filter)), (a.interactions(), Some(Stage::Filter))],
                vec![a.impressions(), a.impressions_report()],
                json!([c.history_len, c.num_negatives, c.seed, c.multi_prefix]),
            ),
            Stage::Split => (
                vec![(a.impressions(), Some(Stage::Impressions))],
                vec![a.split("train"), a.split("valid"), a.split("test")],
                json!([c.split_ratios, c.seed]),
            ),
            Stage::Summarize => (
                vec![(a.items(), Some(Stage::Filter))],
                vec![a.keywords()],
                json!([c.backend, c.seed, c.summarize]),
            ),
            Stage::GrpoToy => (
                vec![(a.items(), Some(Stage::Filter))],
                vec![a.grpo_toy()],
                json!([c.backend, c.seed, c.rewards, c.grpo, c.grpo_items]),
            ),
            Stage::TrainRetriever => (
                vec![(a.items(), Some(Stage::Filter)), (a.split("train"), Some(Stage::Split))],
                vec![a.encoder(), a.encoder_report()],
                json!([c.encoder_kind, c.encoder, c.seed]),
            ),
            Stage::BuildIndex => (
                vec![
                    (a.encoder(), Some(Stage::TrainRetriever)),
                    (a.split("train"), Some(Stage::Split)),
                    (a.interactions(), Some(Stage::Filter)),
                ],
                vec![a.embeddings(), a.index_manifest()],
                json!([]),
            ),
            Stage::Retrieve => (
                vec![
                    (a.encoder(), Some(Stage::TrainRetriever)),
                    (a.embeddings(), Some(Stage::BuildIndex)),
                    (a.interactions(), Some(Stage::Filter)),
                    (a.split("train"), Some(Stage::Split)),
                    (a.split("valid"), Some(Stage::Split)),
                    (a.split("test"), Some(Stage::Split)),
                ],
                vec![a.neighbors()],
                json!([c.neighbors_k]),
            ),
            Stage::BuildSft => {
                let mut inputs = vec![
                    (a.items(), Some(Stage::Filter)),
                    (a.split("train"), Some(Stage::Split)),
                    (a.keywords(), Some(Stage::Summarize)),
                ];
                if c.neighbors_k > 0 {
                    inputs.push((a.neighbors(), Some(Stage::Retrieve)));
                }
                (inputs, vec![a.sft(), a.sft_report()], json!([c.sft, c.seed, c.neighbors_k]))
            }
            Stage::Evaluate => {
                let mut inputs = vec![
                    (a.items(), Some(Stage::Filter)),
                    (a.split(eval_split), Some(Stage::Split)),
                    (a.keywords(), Some(Stage::Summarize)),
                ];
                if c.neighbors_k > 0 {
                    inputs.push((a.split("train"), Some(Stage::Split)));
                    inputs.push((a.neighbors(), Some(Stage::Retrieve)));
                }
                (
                    inputs,
                    vec![a.report(), a.report_rows()],
                    json!([c.backend, c.seed, c.scoring, c.neighbors_k, c.history_len, eval_split]),
                )
            }
        };
        StageSpec {
            inputs,
            outputs,
            params,
        }
    }

    fn checksums(paths: impl IntoIterator<Item = PathBuf>) -> Result<BTreeMap<String, String>> {
        paths
            .into_iter()
            .map(|p| Ok((p.display().to_string(), file_sha256(&p)?)))
            .collect()
    }

    /// Runs one stage unless its manifest record shows unchanged params,
    /// inputs and outputs.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        let spec = self.spec(stage);
        for (path, upstream) in &spec.inputs {
            if !path.exists() {
                return Err(Error::MissingArtifact {
                    stage: stage.name().to_string(),
                    path: path.clone(),
                    upstream: upstream.map_or("synth", |s| s.name()).to_string(),
                });
            }
        }
        let params_hash = sha256_hex(spec.params.to_string().as_bytes());
        let inputs = Self::checksums(spec.inputs.iter().map(|(p, _)| p.clone()))?;
        let manifest_path = self.artifacts().manifest();
        let mut manifest = RunManifest::load(&manifest_path)?;
        if !self.force {
            if let Some(rec) = manifest.stages.get(stage.name()) {
                let outputs_ok = spec.outputs.iter().all(|p| {
                    p.exists()
                        && rec.outputs.get(&p.display().to_string()).map(String::as_str)
                            == file_sha256(p).ok().as_deref()
                });
                if rec.params_hash == params_hash && rec.inputs == inputs && outputs_ok {
                    log::info!("{stage}: inputs unchanged, skipping");
                    return Ok(StageOutcome {
                        stage,
                        skipped: true,
                        outputs: spec.outputs,
                    });
                }
            }
        }
        let start = Instant::now();
        log::info!("{stage}: running");
        self.execute(stage)?;
        let record = StageRecord {
            params_hash,
            inputs,
            outputs: Self::checksums(spec.outputs.iter().cloned())?,
            seconds: start.elapsed().as_secs_f64(),
        };
        // Re-read in case the stage itself ran nested stages.
        manifest = RunManifest::load(&manifest_path)?;
        manifest.config_hash = self.config.hash();
        manifest.stages.insert(stage.name().to_string(), record);
        write_json(&manifest_path, &manifest)?;
        Ok(StageOutcome {
            stage,
            skipped: false,
            outputs: spec.outputs,
        })
    }

    /// Runs `stages` in order.
    pub fn run_stages(&self, stages: &[Stage]) -> Result<Vec<StageOutcome>> {
        stages.iter().map(|&s| self.run_stage(s)).collect()
    }

    /// Every stage in order; returns the evaluation report.
    pub fn run_all(&self) -> Result<EvalReport> {
        self.run_stages(&Stage::ALL)?;
        read_json(&self.artifacts().report())
    }

    fn execute(&self, stage: Stage) -> Result<()> {
        let a = self.artifacts();
        let c = &self.config;
        match stage {
            Stage::Ingest => {
                let items = ingest_items(&c.data.items)?;
                let log = ingest_interactions(&c.data.interactions)?;
                for r in items.rejects.iter().chain(&log.rejects) {
                    log::warn!("rejected line {}: {}", r.line, r.reason);
                }
                write_jsonl(&a.raw_items(), items.value.iter())?;
                write_jsonl(&a.raw_interactions(), &log.value)?;
                write_json(&a.rejects(), &json!({"items": items.rejects, "interactions": log.rejects}))
            }
            Stage::Filter => {
                let cat = load_catalog(&a.raw_items())?;
                let log: Vec<Interaction> = read_jsonl(&a.raw_interactions())?;
                let (log, cat) = filter_min_activity(
                    &log,
                    &cat,
                    c.data.min_user_interactions,
                    c.data.min_item_interactions,
                )?;
                write_jsonl(&a.items(), cat.iter())?;
                write_jsonl(&a.interactions(), &log)
            }
            Stage::Impressions => {
                let cat = load_catalog(&a.items())?;
                let log: Vec<Interaction> = read_jsonl(&a.interactions())?;
                let build = build_impressions(
                    &log,
                    &cat,
                    &ImpressionParams {
                        history_len: c.history_len,
                        num_negatives: c.num_negatives,
                        seed: c.seed,
                        multi_prefix: c.multi_prefix,
                    },
                )?;
                write_jsonl(&a.impressions(), &build.impressions)?;
                write_json(
                    &a.impressions_report(),
                    &json!({"impressions": build.impressions.len(), "skipped_users": build.skipped_users}),
                )
            }
            Stage::Split => {
                let imps: Vec<Impression> = read_jsonl(&a.impressions())?;
                let s = split_impressions(&imps, c.split_ratios, c.seed)?;
                write_jsonl(&a.split("train"), &s.train)?;
                write_jsonl(&a.split("valid"), &s.valid)?;
                write_jsonl(&a.split("test"), &s.test)
            }
            Stage::Summarize => {
                let cat = load_catalog(&a.items())?;
                let report = summarize_catalog(&cat, self.suite()?.generator.as_ref(), &a.keywords(), &c.summarize)?;
                log::info!(
                    "summarized {} items ({} resumed, {} parse failures)",
                    report.generated,
                    report.resumed,
                    report.parse_failures
                );
                Ok(())
            }
            Stage::GrpoToy => {
                let cat = load_catalog(&a.items())?;
                let suite = self.suite()?;
                let mut traces = Vec::new();
                for item in cat.iter().take(c.grpo_items) {
                    let space = CandidateSpace::default_for(item);
                    if space.is_empty() {
                        log::warn!("item {}: too few tokens for the toy policy, skipped", item.item_id);
                        continue;
                    }
                    let t = grpo_toy_optimize(item, &space, suite, &c.rewards, &c.grpo, c.seed)?;
                    let w = t.steps.len().min(20);
                    traces.push(json!({
                        "item_id": t.item_id,
                        "first_window_mean": t.window_mean(0..w),
                        "last_window_mean": t.window_mean(t.steps.len() - w..t.steps.len()),
                        "best_summary": space.candidates[t.best_candidate].render(),
                        "steps": t.steps,
                    }));
                }
                write_json(&a.grpo_toy(), &traces)
            }
            Stage::TrainRetriever => {
                let cat = load_catalog(&a.items())?;
                let train: Vec<Impression> = read_jsonl(&a.split("train"))?;
                match c.encoder_kind {
                    EncoderKind::Sasrec => {
                        let (enc, report) = train_sequence_encoder(&train, &cat, &c.encoder, c.seed)?;
                        let bytes = enc.to_json()?;
                        write_atomic(&a.encoder(), |w| {
                            use std::io::Write;
                            w.write_all(&bytes).map_err(|e| Error::io(a.encoder(), e))
                        })?;
                        write_json(&a.encoder_report(), &json!({"version": enc.version(), "report": report}))
                    }
                    EncoderKind::BagOfItems => {
                        let enc = BagOfItemsEncoder::new(&cat);
                        write_json(&a.encoder(), &BagMarker { kind: "bag-of-items".into() })?;
                        write_json(&a.encoder_report(), &json!({"version": enc.version()}))
                    }
                }
            }
            Stage::BuildIndex => {
                let enc = self.load_encoder()?;
                let train: Vec<Impression> = read_jsonl(&a.split("train"))?;
                let seqs = user_sequences(&read_jsonl::<Interaction>(&a.interactions())?);
                let embeddings = embed_impressions(enc.as_ref(), &train, Some(&seqs), c.encoder.max_len);
                let index = SimilarUserIndex::build(embeddings.clone())?;
                save_embeddings(&a.embeddings(), &embeddings)?;
                write_json(&a.index_manifest(), &index.manifest())
            }
            Stage::Retrieve => {
                let results = self.retrieve_all(c.neighbors_k)?;
                write_jsonl(&a.neighbors(), &results)
            }
            Stage::BuildSft => {
                let cat = load_catalog(&a.items())?;
                let train: Vec<Impression> = read_jsonl(&a.split("train"))?;
                let store = KeywordStore::load(&a.keywords())?;
                let neighbors = if c.neighbors_k > 0 {
                    let results: Vec<RetrievalResult> = read_jsonl(&a.neighbors())?;
                    neighbor_keyword_map(&results, &store, &train, c.neighbors_k)
                } else {
                    BTreeMap::new()
                };
                let ds = build_sft_dataset(&train, &cat, &store, &neighbors, &c.sft, c.seed)?;
                write_jsonl(&a.sft(), &ds.instances)?;
                write_json(
                    &a.sft_report(),
                    &json!({"instances": ds.instances.len(), "mix": ds.mix_report, "skipped": ds.skipped, "seed": ds.seed}),
                )
            }
            Stage::Evaluate => {
                let report = self.evaluate_with_k(c.neighbors_k)?;
                log::info!("{}", report.summary_line());
                report.write_json(&a.report())?;
                report.write_csv(&a.report_rows())
            }
        }
    }

    fn load_encoder(&self) -> Result<Box<dyn SequenceEncoder>> {
        let path = self.artifacts().encoder();
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if let Ok(marker) = serde_json::from_slice::<BagMarker>(&bytes) {
            if marker.kind == "bag-of-items" {
                return Ok(Box::new(BagOfItemsEncoder::new(&load_catalog(&self.artifacts().items())?)));
            }
        }
        Ok(Box::new(SasRecEncoder::from_json(&bytes)?))
    }

    /// Top-`k` neighbors of every user in all three splits; empty lists when `k == 0`.
    fn retrieve_all(&self, k: usize) -> Result<Vec<RetrievalResult>> {
        let a = self.artifacts();
        let enc = self.load_encoder()?;
        let index = SimilarUserIndex::build(load_embeddings(&a.embeddings())?)?;
        let mut all: Vec<Impression> = Vec::new();
        let mut train_users = BTreeSet::new();
        for name in ["train", "valid", "test"] {
            let imps: Vec<Impression> = read_jsonl(&a.split(name))?;
            if name == "train" {
                train_users.extend(imps.iter().map(|i| i.user_id.clone()));
            }
            all.extend(imps);
        }
        if let Some(u) = index.user_ids().find(|u| !train_users.contains(*u)) {
            return Err(Error::Invalid(format!("index contains non-training user {u}")));
        }
        let seqs = user_sequences(&read_jsonl::<Interaction>(&a.interactions())?);
        let queries = embed_impressions(enc.as_ref(), &all, Some(&seqs), self.config.encoder.max_len);
        if k == 0 {
            return Ok(queries
                .iter()
                .map(|q| RetrievalResult {
                    query_user_id: q.user_id.clone(),
                    neighbors: Vec::new(),
                    short: false,
                    degenerate_query: false,
                })
                .collect());
        }
        index.retrieve_all(&queries, k)
    }

    /// Evaluates the configured split with the first `k` stored neighbors
    /// (which equal a fresh top-`k` retrieval, since results are exact).
    pub fn evaluate_with_k(&self, k: usize) -> Result<EvalReport> {
        let a = self.artifacts();
        let c = &self.config;
        let split = match c.eval_split {
            EvalSplit::Valid => "valid",
            EvalSplit::Test => "test",
        };
        let cat = load_catalog(&a.items())?;
        let store = KeywordStore::load(&a.keywords())?;
        let imps: Vec<Impression> = read_jsonl(&a.split(split))?;
        let neighbors = if k > 0 {
            let train: Vec<Impression> = read_jsonl(&a.split("train"))?;
            let results: Vec<RetrievalResult> = read_jsonl(&a.neighbors())?;
            Some(neighbor_keyword_map(&results, &store, &train, k))
        } else {
            None
        };
        let contexts: Vec<ImpressionContext> = imps
            .iter()
            .map(|imp| {
                let nk = neighbors
                    .as_ref()
                    .map(|m| m.get(&imp.user_id).cloned().unwrap_or_default());
                ImpressionContext::new(&imp.history, &store, nk)
            })
            .collect();
        evaluate(
            &imps,
            &contexts,
            &cat,
            &store,
            self.suite()?.first_token.as_ref(),
            &c.scoring,
            ConfigEcho {
                history_len: c.history_len,
                neighbors_k: k,
                seed: c.seed,
                backend: self.suite()?.label.clone(),
                reveal_label_to_backend: c.scoring.reveal_label_to_backend,
            },
        )
    }
}

/// Flattened neighbor keywords per query user, using the first `k` neighbors.
pub fn neighbor_keyword_map(
    results: &[RetrievalResult],
    store: &KeywordStore,
    train: &[Impression],
    k: usize,
) -> BTreeMap<String, Vec<String>> {
    let next = next_items_by_user(train);
    results
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.neighbors.truncate(k);
            (r.query_user_id.clone(), neighbor_context(&r, store, &next, 1).flatten())
        })
        .collect()
}

fn load_catalog(path: &Path) -> Result<ItemCatalog> {
    ItemCatalog::from_items(read_jsonl::<Item>(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    N,
    K,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(Self::N),
            "k" => Ok(Self::K),
            _ => Err(Error::Config(format!("sweep parameter must be n or k, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub auc: f64,
    pub scored: usize,
    pub failed: usize,
}

/// Stages an evaluation depends on (no toy GRPO, no SFT file).
pub const EVAL_STAGES: [Stage; 9] = [
    Stage::Ingest,
    Stage::Filter,
    Stage::Impressions,
    Stage::Split,
    Stage::Summarize,
    Stage::TrainRetriever,
    Stage::BuildIndex,
    Stage::Retrieve,
    Stage::Evaluate,
];

fn write_sweep(dir: &Path, param: SweepParam, rows: &[SweepRow]) -> Result<()> {
    let name = match param {
        SweepParam::N => "n",
        SweepParam::K => "k",
    };
    write_atomic(&dir.join(format!("sweep_{name}.csv")), |w| {
        let mut out = csv::Writer::from_writer(w);
        for r in rows {
            out.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
        }
        out.flush().map_err(|e| Error::io(dir, e))
    })?;
    let mut table = format!("| {name} | HR@5 | NDCG@5 | AUC |\n|---|---|---|---|\n");
    for r in rows {
        table.push_str(&format!("| {} | {:.2} | {:.2} | {:.2} |\n", r.value, r.hr, r.ndcg, r.auc));
    }
    write_atomic(&dir.join(format!("sweep_{name}.md")), |w| {
        use std::io::Write;
        w.write_all(table.as_bytes()).map_err(|e| Error::io(dir, e))
    })
}

/// One evaluation per value with everything else fixed. The table is
/// rewritten after every point, so a failure leaves the finished rows.
///
/// A `k` sweep retrieves once with the largest `k` and truncates. An `n`
/// sweep rebuilds impressions and everything downstream per value, each in
/// its own subdirectory.
pub fn sweep(config: &PipelineConfig, param: SweepParam, values: &[usize], force: bool) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let out_dir = config.work_dir.join("sweep");
    let mut rows = Vec::new();
    let push = |rows: &mut Vec<SweepRow>, value: usize, r: &EvalReport| -> Result<()> {
        rows.push(SweepRow {
            param,
            value,
            hr: r.aggregates.hr,
            ndcg: r.aggregates.ndcg,
            auc: r.aggregates.auc,
            scored: r.counts.scored,
            failed: r.counts.failed,
        });
        r.write_json(&out_dir.join(format!("{}{value}.json", if param == SweepParam::N { "n" } else { "k" })))?;
        write_sweep(&out_dir, param, rows)
    };
    match param {
        SweepParam::K => {
            let kmax = *values.iter().max().expect("non-empty");
            let base = Pipeline::new(
                PipelineConfig {
                    neighbors_k: kmax,
                    ..config.clone()
                },
                force,
            )?;
            base.run_stages(&EVAL_STAGES[..EVAL_STAGES.len() - 1])?;
            for &k in values {
                let r = base.evaluate_with_k(k)?;
                log::info!("{}", r.summary_line());
                push(&mut rows, k, &r)?;
            }
        }
        SweepParam::N => {
            for &n in values {
                let p = Pipeline::new(
                    PipelineConfig {
                        history_len: n,
                        encoder: EncoderConfig {
                            max_len: config.encoder.max_len.max(n),
                            ..config.encoder
                        },
                        work_dir: config.work_dir.join(format!("sweep-n/n{n}")),
                        ..config.clone()
                    },
                    force,
                )?;
                p.run_stages(&EVAL_STAGES)?;
                let r: EvalReport = read_json(&p.artifacts().report())?;
                log::info!("{}", r.summary_line());
                push(&mut rows, n, &r)?;
            }
        }
    }
    Ok(rows)
}
