//! Python bindings: graph loading, rule mining, path scoring, metrics and the staged pipeline.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use chronoexplain_core::config::{BackendKind, RunConfig};
use chronoexplain_core::eval::{self, ParsedLabel};
use chronoexplain_core::paths::{NamedQuery, PathEngine, PathRecord};
use chronoexplain_core::pipeline::{self, Pipeline, PipelineError};
use chronoexplain_core::rules::{mine_rules, MinerConfig, TemporalRule};
use chronoexplain_core::samples::{AnswerLabel, InverseRelationMap};
use chronoexplain_core::tkg::{self, DateFormat, FormatConfig, Timestamp};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pipeline_err(e: PipelineError) -> PyErr {
    match e {
        PipelineError::Io(e) => PyIOError::new_err(e.to_string()),
        PipelineError::MissingArtifact { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Serialises through JSON so results arrive as plain dicts and lists.
fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn date(text: &str) -> PyResult<Timestamp> {
    text.parse().map_err(|_| PyValueError::new_err(format!("expected YYYY-MM-DD, got {text:?}")))
}

/// An immutable temporal knowledge graph.
#[pyclass(frozen)]
struct TemporalKG {
    inner: Arc<tkg::TemporalKG>,
}

#[pymethods]
impl TemporalKG {
    /// Parse tab-separated `subject relation object time` lines.
    ///
    /// `epoch` switches to integer time offsets from that date, `unit` raw steps per day.
    #[staticmethod]
    #[pyo3(signature = (text, inverse_edges=false, dedup=false, epoch=None, unit=24))]
    fn from_tsv(text: &str, inverse_edges: bool, dedup: bool, epoch: Option<&str>, unit: u32) -> PyResult<Self> {
        let date_format = match epoch {
            Some(e) => DateFormat::Offset { epoch: date(e)?, unit },
            None => DateFormat::Iso,
        };
        let config = FormatConfig {
            date_format,
            comment_prefix: Some("#".into()),
            dedup,
            inverse_edges,
        };
        let inner = tkg::TemporalKG::parse_str(text, &config).map_err(value_err)?;
        Ok(Self { inner: Arc::new(inner) })
    }

    #[staticmethod]
    #[pyo3(signature = (path, inverse_edges=false, dedup=false, epoch=None, unit=24))]
    fn load(path: PathBuf, inverse_edges: bool, dedup: bool, epoch: Option<&str>, unit: u32) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        Self::from_tsv(&text, inverse_edges, dedup, epoch, unit)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let s = self.inner.stats();
        format!("TemporalKG(entities={}, relations={}, quadruples={})", s.entities, s.relations, s.quadruples)
    }

    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.stats())
    }

    /// Facts as `(subject, relation, object, "YYYY-MM-DD")` tuples in time order.
    fn quadruples(&self) -> Vec<(String, String, String, String)> {
        self.inner
            .quadruples()
            .iter()
            .map(|q| {
                let (s, r, o, t) = self.inner.display_quadruple(q);
                (s.to_owned(), r.to_owned(), o.to_owned(), t.to_string())
            })
            .collect()
    }

    /// Facts in `[start, end)` touching any of `entities`.
    fn window(&self, entities: Vec<String>, start: &str, end: &str) -> PyResult<Vec<(String, String, String, String)>> {
        let ids = entities
            .iter()
            .map(|e| self.inner.entity(e).ok_or_else(|| PyKeyError::new_err(e.clone())))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(self
            .inner
            .window_query(&ids, date(start)?, date(end)?)
            .iter()
            .map(|q| {
                let (s, r, o, t) = self.inner.display_quadruple(q);
                (s.to_owned(), r.to_owned(), o.to_owned(), t.to_string())
            })
            .collect())
    }

    #[pyo3(signature = (max_body_len=3, walks_per_relation=200, min_support=2, decay=0.1, seed=0))]
    fn mine_rules(
        &self,
        py: Python<'_>,
        max_body_len: usize,
        walks_per_relation: usize,
        min_support: u64,
        decay: f64,
        seed: u64,
    ) -> PyResult<RuleSet> {
        let config = MinerConfig { max_body_len, walks_per_relation, min_support, decay, seed, ..MinerConfig::default() };
        let graph = Arc::clone(&self.inner);
        let rules = py.detach(|| mine_rules(&graph, &config)).map_err(value_err)?;
        Ok(RuleSet { graph, rules })
    }
}

/// Mined rules bound to the graph they were mined from.
#[pyclass(frozen)]
struct RuleSet {
    graph: Arc<tkg::TemporalKG>,
    rules: Vec<TemporalRule>,
}

#[pymethods]
impl RuleSet {
    fn __len__(&self) -> usize {
        self.rules.len()
    }

    /// `(head, body, confidence, support, body_groundings)` per rule, best first.
    fn rules(&self) -> Vec<(String, Vec<String>, f64, u64, u64)> {
        let g = &self.graph;
        self.rules
            .iter()
            .map(|r| {
                let body = r.body.iter().map(|&b| g.relation_name(b).to_owned()).collect();
                (g.relation_name(r.head).to_owned(), body, r.confidence, r.support, r.body_groundings)
            })
            .collect()
    }

    fn describe(&self) -> Vec<String> {
        self.rules.iter().map(|r| r.describe(&self.graph)).collect()
    }

    /// Top reasoning paths for one query, as dicts.
    #[pyo3(signature = (subject, relation, object, time, top_k=3, decay=0.1))]
    #[allow(clippy::too_many_arguments)]
    fn best_paths(
        &self,
        py: Python<'_>,
        subject: &str,
        relation: &str,
        object: &str,
        time: &str,
        top_k: usize,
        decay: f64,
    ) -> PyResult<Py<PyAny>> {
        let nq = NamedQuery::new(subject, relation, object, date(time)?);
        let Some(q) = nq.resolve(&self.graph).map_err(value_err)? else {
            return Err(PyKeyError::new_err(format!("{subject:?} or {object:?} is not in the graph")));
        };
        let mut engine = PathEngine::with_default_scorers(&self.graph, &self.rules, decay);
        engine.top_k = top_k;
        let paths = engine.best_paths(&q).map_err(value_err)?;
        let records: Vec<PathRecord> = paths.iter().map(|p| PathRecord::from_path(&self.graph, p)).collect();
        to_py(py, &records)
    }
}

/// The staged dataset pipeline over a TOML config.
#[pyclass(frozen, name = "Pipeline")]
struct PyPipeline {
    inner: Pipeline,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config=None, out=None, seed=None, backend=None))]
    fn new(config: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>, backend: Option<&str>) -> PyResult<Self> {
        let mut c = match config {
            Some(p) => RunConfig::load(&p).map_err(value_err)?,
            None => RunConfig::default(),
        };
        if let Some(out) = out {
            c.out = out;
        }
        if let Some(seed) = seed {
            c.seed = seed;
        }
        if let Some(b) = backend {
            c.backend.kind = b.parse::<BackendKind>().map_err(PyValueError::new_err)?;
        }
        Ok(Self { inner: Pipeline::new(c).map_err(pipeline_err)? })
    }

    #[getter]
    fn config_hash(&self) -> &str {
        self.inner.config_hash()
    }

    fn ingest(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let stats = py.detach(|| self.inner.ingest()).map_err(pipeline_err)?;
        to_py(py, &stats)
    }

    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.stats().map_err(pipeline_err)?)
    }

    /// Returns the number of mined rules.
    fn mine(&self, py: Python<'_>) -> PyResult<usize> {
        Ok(py.detach(|| self.inner.mine()).map_err(pipeline_err)?.len())
    }

    /// Returns the number of queries with at least one path.
    fn paths(&self, py: Python<'_>) -> PyResult<usize> {
        Ok(py.detach(|| self.inner.paths()).map_err(pipeline_err)?.len())
    }

    /// Returns the dataset manifest.
    fn gen(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let manifest = py.detach(|| self.inner.gen()).map_err(pipeline_err)?;
        to_py(py, &manifest)
    }

    fn run_all(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let manifest = py.detach(|| self.inner.run_all()).map_err(pipeline_err)?;
        to_py(py, &manifest)
    }
}

#[pyfunction]
#[pyo3(signature = (candidate, reference, max_n=4))]
fn bleu(py: Python<'_>, candidate: &str, reference: &str, max_n: usize) -> PyResult<Py<PyAny>> {
    to_py(py, &eval::bleu(candidate, &[reference], max_n))
}

#[pyfunction]
fn rouge(py: Python<'_>, candidate: &str, reference: &str) -> PyResult<Py<PyAny>> {
    to_py(py, &eval::rouge(candidate, reference))
}

#[pyfunction]
fn cohen_kappa(a: Vec<String>, b: Vec<String>) -> PyResult<f64> {
    eval::cohen_kappa(&a, &b).map_err(value_err)
}

/// `(label, explanation)`; label is one of yes, no, unsure, unparseable.
#[pyfunction]
fn parse_answer_label(text: &str) -> (String, String) {
    let parsed = eval::parse_answer_label(text);
    (parsed.label.as_str().to_owned(), parsed.explanation)
}

/// Gold labels are yes / no / unsure; predictions may also be anything else (unparseable).
#[pyfunction]
fn classification_report(py: Python<'_>, gold: Vec<String>, predicted: Vec<String>) -> PyResult<Py<PyAny>> {
    let gold = gold
        .iter()
        .map(|g| serde_json::from_value::<AnswerLabel>(serde_json::Value::String(g.clone())).map_err(|_| value_err(format!("bad gold label {g:?}"))))
        .collect::<PyResult<Vec<_>>>()?;
    let predicted: Vec<ParsedLabel> = predicted.iter().map(|p| eval::parse_answer_label(p).label).collect();
    to_py(py, &eval::classification_report(&gold, &predicted).map_err(value_err)?)
}

#[pyfunction]
#[pyo3(signature = (gold, predictions, annotators=None))]
fn evaluate(py: Python<'_>, gold: PathBuf, predictions: PathBuf, annotators: Option<(PathBuf, PathBuf)>) -> PyResult<Py<PyAny>> {
    let pair = annotators.as_ref().map(|(a, b)| (a.as_path(), b.as_path()));
    let report = pipeline::evaluate_files(&gold, &predictions, pair).map_err(pipeline_err)?;
    to_py(py, &report)
}

/// `(clean, report_text)` for a dataset file or directory.
#[pyfunction]
fn validate(path: PathBuf) -> PyResult<(bool, String)> {
    let report = pipeline::validate_dataset(&path).map_err(pipeline_err)?;
    Ok((report.is_clean(), report.to_string()))
}

/// Opposite relations from the built-in table.
#[pyfunction]
fn opposite_relations(relation: &str) -> Vec<String> {
    InverseRelationMap::builtin().get(relation).map(<[String]>::to_vec).unwrap_or_default()
}

#[pymodule]
fn chronoexplain(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TemporalKG>()?;
    m.add_class::<RuleSet>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge, m)?)?;
    m.add_function(wrap_pyfunction!(cohen_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(parse_answer_label, m)?)?;
    m.add_function(wrap_pyfunction!(classification_report, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(opposite_relations, m)?)?;
    Ok(())
}
