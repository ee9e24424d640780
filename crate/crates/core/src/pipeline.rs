//! Resumable stages: each reads the previous stage's files from the output
//! directory and writes its own, stamped with the config hash.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{BackendKind, ConfigError, RunConfig};
use crate::dataset::{self, Assembler, DatasetError, DatasetManifest, GraphSource, ValidationReport};
use crate::eval::{cohen_kappa, evaluate_records, GoldRecord, MetricError, MetricReport, PredictionRecord};
use crate::llm::{AuditClock, AuditLog, Backend, Gateway, LiveBackend, LlmError, MockBackend, ReplayBackend};
use crate::paths::{scorer_by_name, NamedQuery, PathEngine, PathError, PathRecord, QueryPaths};
use crate::prompts::{PromptError, TemplateSet};
use crate::rules::{mine_rules, read_rules, write_rules, MineError, TemporalRule};
use crate::samples::{AnswerLabel, InverseRelationMap, SampleError};
use crate::seeding;
use crate::tkg::{FormatConfig, GraphStats, ParseError, TemporalKG, Timestamp};

pub const GRAPH_FILE: &str = "graph.tsv";
pub const STATS_FILE: &str = "stats.json";
pub const RULES_FILE: &str = "rules.tsv";
pub const PATHS_FILE: &str = "paths.jsonl";
pub const DATASET_DIR: &str = "dataset";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const REPORT_FILE: &str = "eval_report.json";

const HASH_PREFIX: &str = "# config_hash: ";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("stage `{stage}` needs {file}; run `{needs}` first")]
    MissingArtifact { stage: &'static str, needs: &'static str, file: String },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("graph: {0}")]
    Parse(#[from] ParseError),
    #[error("mining: {0}")]
    Mine(#[from] MineError),
    #[error("paths: {0}")]
    Path(#[from] PathError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("llm: {0}")]
    Llm(#[from] LlmError),
    #[error("samples: {0}")]
    Sample(#[from] SampleError),
    #[error("templates: {0}")]
    Prompt(#[from] PromptError),
    #[error("metrics: {0}")]
    Metric(#[from] MetricError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsArtifact {
    pub config_hash: String,
    pub stats: GraphStats,
}

/// One line of the paths artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathsLine {
    pub config_hash: String,
    #[serde(flatten)]
    pub entry: QueryPaths,
}

pub struct Pipeline {
    config: RunConfig,
    hash: String,
}

fn read_hash_header(text: &str) -> Option<&str> {
    text.lines().next().and_then(|l| l.strip_prefix(HASH_PREFIX)).map(str::trim)
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.check()?;
        let hash = config.hash();
        Ok(Self { config, hash })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn out(&self) -> &Path {
        &self.config.out
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.config.out.join(name)
    }

    fn require(&self, stage: &'static str, needs: &'static str, name: &str) -> Result<PathBuf> {
        let path = self.artifact(name);
        if path.exists() {
            Ok(path)
        } else {
            Err(PipelineError::MissingArtifact { stage, needs, file: path.display().to_string() })
        }
    }

    fn warn_if_stale(&self, file: &Path, hash: Option<&str>) {
        if hash.is_some_and(|h| h != self.hash) {
            log::warn!("{} was produced by a different configuration", file.display());
        }
    }

    fn input_graph(&self) -> Result<&Path> {
        let path = self
            .config
            .input
            .graph
            .as_deref()
            .ok_or_else(|| PipelineError::Input("no input graph configured (input.graph)".into()))?;
        if !path.exists() {
            return Err(ConfigError::MissingPath { what: "input graph", path: path.display().to_string() }.into());
        }
        Ok(path)
    }

    /// Parses the raw input and writes the normalised graph plus its statistics.
    pub fn ingest(&self) -> Result<GraphStats> {
        self.config.check_paths()?;
        let path = self.input_graph()?;
        let format = FormatConfig { inverse_edges: false, ..self.config.input.format.clone() };
        let graph = TemporalKG::parse(BufReader::new(File::open(path)?), &format)?;
        std::fs::create_dir_all(self.out())?;
        let mut text = format!("{HASH_PREFIX}{}\n", self.hash);
        text.push_str(&graph.base_tsv());
        std::fs::write(self.artifact(GRAPH_FILE), text)?;
        let stats = graph.stats();
        let artifact = StatsArtifact { config_hash: self.hash.clone(), stats };
        std::fs::write(self.artifact(STATS_FILE), serde_json::to_string_pretty(&artifact)? + "\n")?;
        Ok(stats)
    }

    /// Statistics of the configured input file, or of the ingested graph.
    pub fn stats(&self) -> Result<GraphStats> {
        if let Some(path) = self.config.input.graph.as_deref().filter(|p| p.exists()) {
            let format = FormatConfig { inverse_edges: false, ..self.config.input.format.clone() };
            return Ok(TemporalKG::parse(BufReader::new(File::open(path)?), &format)?.stats());
        }
        let path = self.require("stats", "ingest", GRAPH_FILE)?;
        let format = FormatConfig { comment_prefix: Some("#".into()), ..FormatConfig::default() };
        Ok(TemporalKG::parse(BufReader::new(File::open(path)?), &format)?.stats())
    }

    /// The ingested graph, with inverse edges when configured.
    pub fn load_graph(&self, stage: &'static str) -> Result<TemporalKG> {
        let path = self.require(stage, "ingest", GRAPH_FILE)?;
        let text = std::fs::read_to_string(&path)?;
        self.warn_if_stale(&path, read_hash_header(&text));
        let format = FormatConfig {
            comment_prefix: Some("#".into()),
            inverse_edges: self.config.input.format.inverse_edges,
            ..FormatConfig::default()
        };
        Ok(TemporalKG::parse_str(&text, &format)?)
    }

    fn load_rules(&self, stage: &'static str, graph: &TemporalKG) -> Result<Vec<TemporalRule>> {
        let path = self.require(stage, "mine", RULES_FILE)?;
        let text = std::fs::read_to_string(&path)?;
        self.warn_if_stale(&path, read_hash_header(&text));
        Ok(read_rules(graph, &text)?)
    }

    pub fn mine(&self) -> Result<Vec<TemporalRule>> {
        let graph = self.load_graph("mine")?;
        let rules = mine_rules(&graph, &self.config.miner_config())?;
        let mut text = format!("{HASH_PREFIX}{}\n", self.hash);
        text.push_str(&write_rules(&graph, &rules));
        std::fs::write(self.artifact(RULES_FILE), text)?;
        Ok(rules)
    }

    fn candidate_queries(&self, graph: &TemporalKG, rules: &[TemporalRule]) -> Result<Vec<NamedQuery>> {
        if let Some(path) = &self.config.input.queries {
            return read_queries(path);
        }
        let heads: BTreeSet<_> = rules.iter().map(|r| r.head).collect();
        let unique: BTreeSet<(Timestamp, String, String, String)> = graph
            .quadruples()
            .iter()
            .filter(|q| heads.contains(&q.relation) && !graph.is_inverse(q.relation))
            .map(|q| {
                let n = NamedQuery::from_quad(graph, q);
                (n.time, n.subject, n.relation, n.object)
            })
            .collect();
        let mut all: Vec<NamedQuery> = unique
            .into_iter()
            .map(|(time, subject, relation, object)| NamedQuery { subject, relation, object, time })
            .collect();
        if let Some(max) = self.config.paths.max_queries.filter(|&m| m < all.len()) {
            let mut idx: Vec<usize> = (0..all.len()).collect();
            idx.shuffle(&mut seeding::rng(self.config.seed, 0x7175_6572));
            let mut keep: Vec<usize> = idx.into_iter().take(max).collect();
            keep.sort_unstable();
            all = keep.into_iter().map(|i| all[i].clone()).collect();
        }
        Ok(all)
    }

    /// Selects queries and their top-k reasoning paths.
    pub fn paths(&self) -> Result<Vec<QueryPaths>> {
        let graph = self.load_graph("paths")?;
        let rules = self.load_rules("paths", &graph)?;
        let pc = &self.config.paths;
        let scorers = pc
            .scorers
            .iter()
            .map(|name| scorer_by_name(&graph, name, pc.decay))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut engine = PathEngine::new(&graph, &rules, scorers);
        engine.top_k = pc.top_k;
        engine.cap_per_rule = pc.cap_per_rule;
        let queries = self.candidate_queries(&graph, &rules)?;
        let found: Vec<Option<QueryPaths>> = queries
            .par_iter()
            .map(|nq| {
                let q = match nq.resolve(&graph) {
                    Ok(Some(q)) => q,
                    Ok(None) => {
                        log::warn!("query {nq:?} mentions an entity absent from the graph");
                        return Ok(None);
                    }
                    Err(e) => {
                        log::warn!("query {nq:?}: {e}");
                        return Ok(None);
                    }
                };
                let best = engine.best_paths(&q)?;
                if best.is_empty() {
                    return Ok(None);
                }
                let paths = best.iter().map(|p| PathRecord::from_path(&graph, p)).collect();
                Ok(Some(QueryPaths { query: nq.clone(), paths }))
            })
            .collect::<std::result::Result<_, PathError>>()?;
        let selected: Vec<QueryPaths> = found.into_iter().flatten().collect();
        let mut out = Vec::new();
        for entry in &selected {
            serde_json::to_writer(&mut out, &PathsLine { config_hash: self.hash.clone(), entry: entry.clone() })?;
            out.push(b'\n');
        }
        std::fs::write(self.artifact(PATHS_FILE), out)?;
        Ok(selected)
    }

    fn load_paths(&self) -> Result<Vec<QueryPaths>> {
        let path = self.require("gen", "paths", PATHS_FILE)?;
        let mut out = Vec::new();
        for line in BufReader::new(File::open(&path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: PathsLine = serde_json::from_str(&line)?;
            self.warn_if_stale(&path, Some(&record.config_hash));
            out.push(record.entry);
        }
        Ok(out)
    }

    pub fn gateway(&self) -> Result<Gateway> {
        let b = &self.config.backend;
        let (backend, clock): (Box<dyn Backend>, AuditClock) = match b.kind {
            BackendKind::Mock => (Box::new(MockBackend::new(self.config.seed)), AuditClock::Logical),
            BackendKind::Live => (Box::new(LiveBackend::from_env(&b.live)?), AuditClock::Wall),
            BackendKind::Replay => {
                let log = b.replay_log.as_deref().ok_or_else(|| ConfigError::Invalid("replay needs backend.replay_log".into()))?;
                return Ok(Gateway::new(Box::new(ReplayBackend::load(log)?), b.gateway.clone()));
            }
        };
        let audit = AuditLog::create(&self.artifact(AUDIT_FILE), clock)?.with_config_hash(self.hash.clone());
        Ok(Gateway::new(backend, b.gateway.clone()).with_audit(audit))
    }

    /// Generates, splits and writes the dataset.
    pub fn gen(&self) -> Result<DatasetManifest> {
        self.config.check_paths()?;
        let graph = self.load_graph("gen")?;
        self.load_rules("gen", &graph)?;
        let queries = self.load_paths()?;
        let templates = match &self.config.input.templates {
            Some(dir) => TemplateSet::with_overrides(dir)?,
            None => TemplateSet::builtin(),
        };
        let inverse = match &self.config.input.inverse_map {
            Some(p) => InverseRelationMap::load(p)?,
            None => InverseRelationMap::builtin(),
        };
        let gateway = self.gateway()?;
        let assembler = Assembler {
            graph: &graph,
            templates: &templates,
            inverse: &inverse,
            gateway: &gateway,
            config: &self.config.dataset,
            window_days: self.config.window_days,
            seed: self.config.seed,
            config_hash: self.hash.clone(),
        };
        let assembly = assembler.assemble(&queries)?;
        let (train, test) = dataset::split(assembly.instances, self.config.dataset.test_fraction, self.config.seed)?;
        let exclusions = match &self.config.input.exclusion_list {
            Some(p) => Some(dataset::read_exclusions(p)?),
            None => None,
        };
        let manifest = DatasetManifest {
            config_hash: self.hash.clone(),
            seed: self.config.seed,
            backend: gateway.backend_tag(),
            graph: GraphSource::of(&graph),
            train: Default::default(),
            test: Default::default(),
            test_gold: None,
            test_quality: String::new(),
            planned: assembly.planned,
            shortfall: assembly.shortfall,
            skipped: assembly.skipped,
        };
        Ok(dataset::write_dataset(&self.artifact(DATASET_DIR), &train, &test, exclusions.as_ref(), manifest)?)
    }

    /// `ingest`, `mine`, `paths` and `gen` in sequence.
    pub fn run_all(&self) -> Result<DatasetManifest> {
        self.ingest()?;
        self.mine()?;
        self.paths()?;
        self.gen()
    }
}

/// `subject \t relation \t object \t YYYY-MM-DD` per line; `#` lines are comments.
pub fn read_queries(path: &Path) -> Result<Vec<NamedQuery>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        if f.len() != 4 {
            return Err(PipelineError::Input(format!("{}:{}: expected 4 tab-separated fields", path.display(), i + 1)));
        }
        let time: Timestamp = f[3]
            .parse()
            .map_err(|_| PipelineError::Input(format!("{}:{}: bad date {:?}", path.display(), i + 1, f[3])))?;
        out.push(NamedQuery::new(f[0], f[1], f[2], time));
    }
    Ok(out)
}

fn read_values(path: &Path) -> Result<Vec<Value>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

pub fn read_gold(path: &Path) -> Result<Vec<GoldRecord>> {
    read_values(path)?
        .into_iter()
        .map(|v| {
            let id = v.get("id").and_then(Value::as_str).unwrap_or("?").to_owned();
            let answer_label: AnswerLabel = v
                .get("answer_label")
                .cloned()
                .and_then(|l| serde_json::from_value(l).ok())
                .ok_or_else(|| PipelineError::Input(format!("gold record {id} lacks a valid answer_label")))?;
            let explanation = v.get("explanation").and_then(Value::as_str).unwrap_or_default().to_owned();
            Ok(GoldRecord { id, answer_label, explanation })
        })
        .collect()
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    read_values(path)?.into_iter().map(|v| Ok(serde_json::from_value(v)?)).collect()
}

/// `{id, label}` records from two annotators, joined on id.
pub fn annotator_kappa(a: &Path, b: &Path) -> Result<f64> {
    let labels = |p: &Path| -> Result<HashMap<String, String>> {
        read_values(p)?
            .into_iter()
            .map(|v| {
                let id = v.get("id").and_then(Value::as_str);
                let label = v.get("label").map(|l| l.as_str().map(str::to_owned).unwrap_or_else(|| l.to_string()));
                match (id, label) {
                    (Some(id), Some(label)) => Ok((id.to_owned(), label)),
                    _ => Err(PipelineError::Input(format!("{}: annotation records need id and label", p.display()))),
                }
            })
            .collect()
    };
    let la = labels(a)?;
    let lb = labels(b)?;
    let mut ids: Vec<&String> = la.keys().filter(|k| lb.contains_key(*k)).collect();
    ids.sort();
    let xa: Vec<&str> = ids.iter().map(|k| la[*k].as_str()).collect();
    let xb: Vec<&str> = ids.iter().map(|k| lb[*k].as_str()).collect();
    Ok(cohen_kappa(&xa, &xb)?)
}

pub fn evaluate_files(gold: &Path, predictions: &Path, annotators: Option<(&Path, &Path)>) -> Result<MetricReport> {
    let mut report = evaluate_records(&read_gold(gold)?, &read_predictions(predictions)?)?;
    if let Some((a, b)) = annotators {
        report.kappa = Some(annotator_kappa(a, b)?);
    }
    Ok(report)
}

pub fn write_report(dir: &Path, report: &MetricReport, config_hash: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(REPORT_FILE);
    let mut value = serde_json::to_value(report)?;
    value["config_hash"] = Value::String(config_hash.to_owned());
    let mut f = File::create(&path)?;
    serde_json::to_writer_pretty(&mut f, &value)?;
    f.write_all(b"\n")?;
    Ok(path)
}

pub fn validate_dataset(path: &Path) -> Result<ValidationReport> {
    if !path.exists() {
        return Err(PipelineError::Input(format!("{} does not exist", path.display())));
    }
    Ok(dataset::validate(path)?)
}
