//! Run configuration shared by every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::llm::{GatewayConfig, LiveConfig};
use crate::rules::MinerConfig;
use crate::seeding::hex_digest;
use crate::tkg::FormatConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{what} {path} does not exist")]
    MissingPath { what: &'static str, path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; also used for mining.
    pub seed: u64,
    pub window_days: u32,
    /// Output directory for every stage artifact. Not part of the config hash.
    pub out: PathBuf,
    pub input: InputConfig,
    pub miner: MinerConfig,
    pub paths: PathsConfig,
    pub dataset: DatasetConfig,
    pub backend: BackendConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            window_days: 7,
            out: PathBuf::from("out"),
            input: InputConfig::default(),
            miner: MinerConfig::default(),
            paths: PathsConfig::default(),
            dataset: DatasetConfig::default(),
            backend: BackendConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Raw quadruple file read by `ingest`.
    pub graph: Option<PathBuf>,
    pub format: FormatConfig,
    /// Opposite-relation table; the built-in seed table when absent.
    pub inverse_map: Option<PathBuf>,
    /// Directory of template overrides.
    pub templates: Option<PathBuf>,
    /// Explicit query list (`subject \t relation \t object \t date`); graph facts otherwise.
    pub queries: Option<PathBuf>,
    /// Test ids to drop when writing the gold test subset.
    pub exclusion_list: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub scorers: Vec<String>,
    pub top_k: usize,
    /// Per-day decay of the recency scorer.
    pub decay: f64,
    pub cap_per_rule: Option<usize>,
    /// Upper bound on candidate queries drawn from the graph.
    pub max_queries: Option<usize>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            scorers: vec!["rule_confidence".into(), "recency_frequency".into()],
            top_k: 3,
            decay: 0.1,
            cap_per_rule: Some(1000),
            max_queries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Negatives per positive.
    pub negative_ratio: f64,
    /// Neutrals per positive.
    pub neutral_ratio: f64,
    pub test_fraction: f64,
    pub model: String,
    pub document_temperature: f64,
    pub eval_temperature: f64,
    pub rewrite_temperature: f64,
    pub max_tokens: u32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            negative_ratio: 0.74,
            neutral_ratio: 0.46,
            test_fraction: 0.1,
            model: "gpt-3.5-turbo".into(),
            document_temperature: 0.7,
            eval_temperature: 0.0,
            rewrite_temperature: 0.7,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Live,
    Replay,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "live" => Ok(BackendKind::Live),
            "replay" => Ok(BackendKind::Replay),
            other => Err(format!("unknown backend {other:?} (mock, live, replay)")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Audit log to serve responses from with the replay backend.
    pub replay_log: Option<PathBuf>,
    pub live: LiveConfig,
    pub gateway: GatewayConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)?;
        config.check()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_inputs(base);
        }
        Ok(config)
    }

    /// Makes relative input paths relative to `base`; `out` stays relative to the working directory.
    pub fn resolve_inputs(&mut self, base: &Path) {
        let inputs = [
            &mut self.input.graph,
            &mut self.input.inverse_map,
            &mut self.input.templates,
            &mut self.input.queries,
            &mut self.input.exclusion_list,
            &mut self.backend.replay_log,
        ];
        for p in inputs.into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Value checks that need no filesystem access.
    pub fn check(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        if self.window_days == 0 {
            return invalid("window_days must be at least 1");
        }
        self.miner.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.paths.scorers.is_empty() {
            return invalid("paths.scorers must name at least one scorer");
        }
        if self.paths.top_k == 0 {
            return invalid("paths.top_k must be at least 1");
        }
        let d = &self.dataset;
        if !(d.negative_ratio >= 0.0 && d.neutral_ratio >= 0.0) {
            return invalid("dataset ratios must be non-negative");
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return invalid("dataset.test_fraction must lie strictly between 0 and 1");
        }
        for t in [d.document_temperature, d.eval_temperature, d.rewrite_temperature] {
            if !(0.0..=2.0).contains(&t) {
                return invalid("temperatures must lie in [0, 2]");
            }
        }
        if self.backend.kind == BackendKind::Replay && self.backend.replay_log.is_none() {
            return invalid("the replay backend needs backend.replay_log");
        }
        Ok(())
    }

    /// Every referenced input path must exist.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        let inputs = [
            ("input graph", &self.input.graph),
            ("inverse relation map", &self.input.inverse_map),
            ("template directory", &self.input.templates),
            ("query list", &self.input.queries),
            ("exclusion list", &self.input.exclusion_list),
            ("replay log", &self.backend.replay_log),
        ];
        for (what, path) in inputs {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(ConfigError::MissingPath { what, path: p.display().to_string() });
                }
            }
        }
        Ok(())
    }

    /// Hex digest of the configuration with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out = PathBuf::new();
        let json = serde_json::to_vec(&canon).expect("config serialises");
        hex_digest(&json)[..16].to_owned()
    }

    pub fn miner_config(&self) -> MinerConfig {
        MinerConfig { seed: self.seed, ..self.miner.clone() }
    }
}
