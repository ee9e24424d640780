//! Per-query generation of training instances, splitting, persistence and validation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::DatasetConfig;
use crate::llm::{classify_verdict, BackendTag, ChatMessage, CompletionRequest, Decision, Gateway, LlmError, Verdict};
use crate::paths::{HopRecord, NamedQuery, PathError, PathRecord, QueryPaths, ReasoningPath};
use crate::prompts::{quadruple_listing, query_slots, Polarity, PromptError, PromptKind, TemplateSet};
use crate::samples::{build_context_set, make_negative, make_neutral, AnswerLabel, InverseRelationMap, LabeledQuery, SampleClass, SampleError};
use crate::seeding;
use crate::tkg::TemporalKG;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const GOLD_FILE: &str = "test_gold.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Exact top-level field names of a dataset record.
pub const RECORD_FIELDS: [&str; 7] = ["id", "question", "context", "answer_label", "explanation", "class", "meta"];

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("{0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rewrite {
    Polish,
    Revision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRef {
    pub kind: PromptKind,
    pub request_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextMember {
    pub fact: HopRecord,
    pub window: bool,
    pub path: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub query: NamedQuery,
    /// Id of the positive instance a negative or neutral was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub twin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_query: Option<NamedQuery>,
    pub paths: Vec<PathRecord>,
    pub context_set: Vec<ContextMember>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<Rewrite>,
    pub prompts: Vec<PromptRef>,
    pub backend: BackendTag,
    pub split: Split,
    /// Test records not yet filtered by human review.
    pub silver: bool,
    pub config_hash: String,
}

/// One `{D, F, P, Q}` record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub id: String,
    pub question: String,
    /// Generated document.
    pub context: String,
    pub answer_label: AnswerLabel,
    pub explanation: String,
    pub class: SampleClass,
    pub meta: InstanceMeta,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub positive: usize,
    pub negative: usize,
    pub neutral: usize,
}

impl ClassCounts {
    pub fn of<'a>(classes: impl IntoIterator<Item = &'a SampleClass>) -> Self {
        let mut c = Self::default();
        for class in classes {
            *c.get_mut(*class) += 1;
        }
        c
    }

    pub fn get(&self, class: SampleClass) -> usize {
        match class {
            SampleClass::Positive => self.positive,
            SampleClass::Negative => self.negative,
            SampleClass::Neutral => self.neutral,
        }
    }

    fn get_mut(&mut self, class: SampleClass) -> &mut usize {
        match class {
            SampleClass::Positive => &mut self.positive,
            SampleClass::Negative => &mut self.negative,
            SampleClass::Neutral => &mut self.neutral,
        }
    }

    pub fn total(&self) -> usize {
        self.positive + self.negative + self.neutral
    }
}

impl fmt::Display for ClassCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "positive {} / negative {} / neutral {}", self.positive, self.negative, self.neutral)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedInstance {
    pub id: String,
    pub class: SampleClass,
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assembly {
    pub instances: Vec<TrainingInstance>,
    pub skipped: Vec<SkippedInstance>,
    /// Instances planned before any generation failure.
    pub planned: ClassCounts,
    /// Quota minus planned, when too few candidates were eligible.
    pub shortfall: ClassCounts,
}

/// Everything generation needs besides the selected queries.
pub struct Assembler<'a> {
    pub graph: &'a TemporalKG,
    pub templates: &'a TemplateSet,
    pub inverse: &'a InverseRelationMap,
    pub gateway: &'a Gateway,
    pub config: &'a DatasetConfig,
    pub window_days: u32,
    pub seed: u64,
    pub config_hash: String,
}

struct Item {
    id: String,
    labeled: LabeledQuery,
    records: Vec<PathRecord>,
    twin: Option<usize>,
    prompts: Vec<PromptRef>,
    document: Option<String>,
    fprime: Option<String>,
    eval_prompt: Option<String>,
    verdict: Option<(String, Option<Verdict>)>,
    rewrite: Option<Rewrite>,
    explanation: Option<String>,
    failed: Option<SkippedInstance>,
}

impl Item {
    fn new(id: String, labeled: LabeledQuery, records: Vec<PathRecord>, twin: Option<usize>) -> Self {
        Self {
            id,
            labeled,
            records,
            twin,
            prompts: Vec::new(),
            document: None,
            fprime: None,
            eval_prompt: None,
            verdict: None,
            rewrite: None,
            explanation: None,
            failed: None,
        }
    }

    fn fail(&mut self, stage: &str, reason: String) {
        if self.failed.is_none() {
            log::warn!("skipping {} at {stage}: {reason}", self.id);
            self.failed = Some(SkippedInstance { id: self.id.clone(), class: self.labeled.label, stage: stage.into(), reason });
        }
    }

    fn ok(&self) -> bool {
        self.failed.is_none()
    }
}

fn quota(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).round() as usize
}

const SALT_NEGATIVE: u64 = 0x6e65_6761;
const SALT_NEUTRAL: u64 = 0x6e65_7574;
const SALT_SPLIT: u64 = 0x7370_6c74;

impl Assembler<'_> {
    fn request(&self, item: &mut Item, kind: PromptKind, prompt: String, temperature: f64) -> CompletionRequest {
        let id = format!("{}/{kind}", item.id);
        item.prompts.push(PromptRef { kind, request_id: id.clone() });
        CompletionRequest {
            id,
            prompt,
            temperature,
            max_tokens: self.config.max_tokens,
            model: self.config.model.clone(),
            history: Vec::new(),
            kind: Some(kind),
        }
    }

    /// Runs the batch and hands each item its result.
    fn dispatch(
        &self,
        items: &mut [Item],
        batch: Vec<(usize, CompletionRequest)>,
        stage: &str,
        mut accept: impl FnMut(&mut Item, &CompletionRequest, String),
    ) {
        let requests: Vec<CompletionRequest> = batch.iter().map(|(_, r)| r.clone()).collect();
        let results = self.gateway.complete_batch(&requests);
        for ((i, request), result) in batch.into_iter().zip(results) {
            match result {
                Ok(r) => accept(&mut items[i], &request, r.text),
                Err(e) => items[i].fail(stage, describe_llm_error(&e)),
            }
        }
    }

    fn context_listing(&self, labeled: &LabeledQuery) -> String {
        let quads: Vec<_> = labeled.context.quadruples().collect();
        quadruple_listing(self.graph, quads.iter())
    }

    fn path_records(&self, paths: &[ReasoningPath], stored: &[PathRecord]) -> Vec<PathRecord> {
        if stored.len() == paths.len() {
            stored.to_vec()
        } else {
            paths.iter().map(|p| PathRecord::from_path(self.graph, p)).collect()
        }
    }

    /// Builds positives from the selected queries and derives negatives and neutrals.
    fn plan(&self, queries: &[QueryPaths], skipped: &mut Vec<SkippedInstance>) -> Result<(Vec<Item>, ClassCounts), DatasetError> {
        let mut items: Vec<Item> = Vec::new();
        for qp in queries {
            let id = format!("pos-{:06}", items.len() + 1);
            let query = match qp.query.resolve(self.graph) {
                Ok(Some(q)) => q,
                Ok(None) | Err(_) => {
                    skipped.push(SkippedInstance {
                        id,
                        class: SampleClass::Positive,
                        stage: "plan".into(),
                        reason: format!("query {:?} does not resolve against the graph", qp.query),
                    });
                    continue;
                }
            };
            let paths: Vec<ReasoningPath> = qp.paths.iter().map(|p| p.to_path(self.graph)).collect::<Result<_, _>>()?;
            if paths.is_empty() {
                continue;
            }
            let context = build_context_set(self.graph, &query, self.window_days, &paths);
            let records = self.path_records(&paths, &qp.paths);
            items.push(Item::new(id, LabeledQuery::positive(qp.query.clone(), context, paths), records, None));
        }
        let n_pos = items.len();

        let mut negative_candidates: Vec<usize> =
            (0..n_pos).filter(|&i| self.inverse.get(&items[i].labeled.query.relation).is_some()).collect();
        negative_candidates.shuffle(&mut seeding::rng(self.seed, SALT_NEGATIVE));
        let want_neg = quota(self.config.negative_ratio, n_pos);
        let mut chosen_neg: Vec<usize> = negative_candidates.into_iter().take(want_neg).collect();
        chosen_neg.sort_unstable();

        let mut order: Vec<usize> = (0..n_pos).collect();
        order.shuffle(&mut seeding::rng(self.seed, SALT_NEUTRAL));
        let want_neu = quota(self.config.neutral_ratio, n_pos);
        let mut chosen_neu: Vec<(usize, LabeledQuery)> = Vec::new();
        for i in order {
            if chosen_neu.len() >= want_neu {
                break;
            }
            if let Some(n) = make_neutral(&items[i].labeled, self.graph, self.seed) {
                chosen_neu.push((i, n));
            }
        }
        chosen_neu.sort_by_key(|(i, _)| *i);

        for (k, &i) in chosen_neg.iter().enumerate() {
            let labeled = make_negative(&items[i].labeled, self.inverse, self.seed)?;
            let records = items[i].records.clone();
            items.push(Item::new(format!("neg-{:06}", k + 1), labeled, records, Some(i)));
        }
        for (k, (i, labeled)) in chosen_neu.into_iter().enumerate() {
            items.push(Item::new(format!("neu-{:06}", k + 1), labeled, Vec::new(), Some(i)));
        }
        let planned = ClassCounts::of(items.iter().map(|it| &it.labeled.label));
        let shortfall = ClassCounts {
            positive: 0,
            negative: want_neg.saturating_sub(planned.negative),
            neutral: want_neu.saturating_sub(planned.neutral),
        };
        Ok((items, shortfall))
    }

    pub fn assemble(&self, queries: &[QueryPaths]) -> Result<Assembly, DatasetError> {
        let mut skipped = Vec::new();
        let (mut items, shortfall) = self.plan(queries, &mut skipped)?;
        let planned = ClassCounts::of(items.iter().map(|it| &it.labeled.label));

        // Documents for positives.
        let mut batch = Vec::new();
        for (i, item) in items.iter_mut().enumerate() {
            if item.labeled.label != SampleClass::Positive {
                continue;
            }
            let mut slots = query_slots(&item.labeled.query, true);
            slots.insert("quadruples".into(), self.context_listing(&item.labeled));
            let prompt = self.templates.render_prompt(PromptKind::ContextDoc, slots)?.text;
            let req = self.request(item, PromptKind::ContextDoc, prompt, self.config.document_temperature);
            batch.push((i, req));
        }
        self.dispatch(&mut items, batch, "context_doc", |item, _, text| item.document = Some(text));

        // Derived instances reuse their twin's document.
        for i in 0..items.len() {
            if let Some(t) = items[i].twin {
                match items[t].document.clone() {
                    Some(doc) => {
                        let twin_prompt = items[t].prompts.first().cloned();
                        items[i].document = Some(doc);
                        items[i].prompts.extend(twin_prompt);
                    }
                    None => {
                        let reason = format!("twin {} has no document", items[t].id);
                        items[i].fail("context_doc", reason);
                    }
                }
            }
        }

        // Template explanations and their evaluation.
        let mut batch = Vec::new();
        for (i, item) in items.iter_mut().enumerate() {
            let label = item.labeled.label;
            if !item.ok() || label == SampleClass::Neutral {
                continue;
            }
            let (query, polarity, kind) = match label {
                SampleClass::Positive => (item.labeled.query.clone(), Polarity::Positive, PromptKind::EvalCorrectness),
                _ => {
                    let twin = item.labeled.twin.clone().expect("negatives have a twin");
                    let opposite = item.labeled.query.relation.clone();
                    (twin, Polarity::Negative { opposite }, PromptKind::EvalNegative)
                }
            };
            let fprime = self.templates.render_template_explanation(self.graph, &query, &item.labeled.paths, &polarity)?.text;
            let mut slots = query_slots(&query, true);
            slots.insert("explanation".into(), fprime.clone());
            let prompt = self.templates.render_prompt(kind, slots)?.text;
            item.fprime = Some(fprime);
            item.eval_prompt = Some(prompt.clone());
            let req = self.request(item, kind, prompt, self.config.eval_temperature);
            batch.push((i, req));
        }
        self.dispatch(&mut items, batch, "evaluate", |item, _, text| {
            let verdict = classify_verdict(&text).ok();
            item.verdict = Some((text, verdict));
        });

        // Polish or revise, and neutral explanations.
        let mut batch = Vec::new();
        for (i, item) in items.iter_mut().enumerate() {
            if !item.ok() {
                continue;
            }
            if item.labeled.label == SampleClass::Neutral {
                let mut slots = query_slots(&item.labeled.query, false);
                slots.insert("document".into(), item.document.clone().unwrap_or_default());
                let prompt = self.templates.render_prompt(PromptKind::Neutral, slots)?.text;
                let req = self.request(item, PromptKind::Neutral, prompt, self.config.rewrite_temperature);
                batch.push((i, req));
                continue;
            }
            let Some((raw, verdict)) = item.verdict.clone() else { continue };
            let history = vec![ChatMessage::user(item.eval_prompt.clone().unwrap_or_default()), ChatMessage::assistant(raw)];
            let correct = verdict.as_ref().is_some_and(|v| v.decision == Decision::Correct);
            let (kind, rewrite) = if correct { (PromptKind::Polish, Rewrite::Polish) } else { (PromptKind::Revision, Rewrite::Revision) };
            let mut slots = query_slots(&item.labeled.query, true);
            slots.insert("quadruples".into(), self.context_listing(&item.labeled));
            let prompt = self.templates.render_prompt(kind, slots)?.text;
            item.rewrite = Some(rewrite);
            let req = self.request(item, kind, prompt, self.config.rewrite_temperature).history(history);
            batch.push((i, req));
        }
        self.dispatch(&mut items, batch, "rewrite", |item, _, text| item.explanation = Some(text));

        let backend = self.gateway.backend_tag();
        let ids: Vec<String> = items.iter().map(|it| it.id.clone()).collect();
        let mut instances = Vec::new();
        for item in items {
            if let Some(s) = item.failed {
                skipped.push(s);
                continue;
            }
            let question = self.templates.render_question(&item.labeled.query)?;
            let twin_id = item.twin.map(|t| ids[t].clone());
            let instance = TrainingInstance {
                id: item.id,
                question,
                context: item.document.unwrap_or_default(),
                answer_label: item.labeled.label.answer(),
                explanation: item.explanation.unwrap_or_default(),
                class: item.labeled.label,
                meta: InstanceMeta {
                    query: item.labeled.query.clone(),
                    twin: twin_id,
                    source_query: item.labeled.twin.clone(),
                    paths: if item.labeled.label == SampleClass::Neutral { Vec::new() } else { item.records },
                    context_set: item
                        .labeled
                        .context
                        .members()
                        .map(|(q, p)| {
                            let (s, r, o, t) = self.graph.display_quadruple(&q);
                            ContextMember { fact: HopRecord(s.into(), r.into(), o.into(), t), window: p.window, path: p.path }
                        })
                        .collect(),
                    template_explanation: item.fprime,
                    verdict: item.verdict.and_then(|(_, v)| v),
                    rewrite: item.rewrite,
                    prompts: item.prompts,
                    backend,
                    split: Split::Train,
                    silver: false,
                    config_hash: self.config_hash.clone(),
                },
            };
            let empty = [&instance.question, &instance.context, &instance.explanation].iter().any(|t| t.trim().is_empty());
            if empty {
                skipped.push(SkippedInstance {
                    id: instance.id,
                    class: instance.class,
                    stage: "assemble".into(),
                    reason: "empty question, document or explanation".into(),
                });
                continue;
            }
            instances.push(instance);
        }
        instances.sort_by(|a, b| a.id.cmp(&b.id));
        skipped.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Assembly { instances, skipped, planned, shortfall })
    }
}

fn describe_llm_error(e: &LlmError) -> String {
    e.to_string()
}

/// Stratified, seeded train/test partition; falls back to a global split when a
/// present class has fewer than two instances.
pub fn split(
    instances: Vec<TrainingInstance>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<TrainingInstance>, Vec<TrainingInstance>), DatasetError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::Precondition(format!("test fraction {test_fraction} must lie strictly between 0 and 1")));
    }
    let classes: Vec<SampleClass> = instances.iter().map(|i| i.class).collect();
    let test_idx = split_indices(&classes, test_fraction, seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, mut inst) in instances.into_iter().enumerate() {
        if test_idx.contains(&i) {
            inst.meta.split = Split::Test;
            inst.meta.silver = true;
            test.push(inst);
        } else {
            inst.meta.split = Split::Train;
            inst.meta.silver = false;
            train.push(inst);
        }
    }
    train.sort_by(|a, b| a.id.cmp(&b.id));
    test.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((train, test))
}

/// Indices assigned to the test side.
pub fn split_indices(classes: &[SampleClass], test_fraction: f64, seed: u64) -> BTreeSet<usize> {
    let n = classes.len();
    let n_test = ((test_fraction * n as f64).round() as usize).min(n);
    let mut groups: BTreeMap<SampleClass, Vec<usize>> = BTreeMap::new();
    for (i, c) in classes.iter().enumerate() {
        groups.entry(*c).or_default().push(i);
    }
    if groups.values().any(|g| g.len() < 2) {
        log::warn!("a class has fewer than two instances; using an unstratified split");
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut seeding::rng(seed, SALT_SPLIT));
        return all.into_iter().take(n_test).collect();
    }
    // Largest-remainder apportionment of the test size over classes.
    let mut quotas: Vec<(SampleClass, usize, f64)> = groups
        .iter()
        .map(|(c, g)| {
            let exact = test_fraction * g.len() as f64;
            (*c, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut remaining = n_test.saturating_sub(quotas.iter().map(|q| q.1).sum());
    let mut by_remainder: Vec<usize> = (0..quotas.len()).collect();
    by_remainder.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    for &k in by_remainder.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if quotas[k].1 < groups[&quotas[k].0].len() {
            quotas[k].1 += 1;
            remaining -= 1;
        }
    }
    let mut out = BTreeSet::new();
    for (class, q, _) in quotas {
        let mut members = groups[&class].clone();
        members.shuffle(&mut seeding::rng(seed, SALT_SPLIT ^ (class as u64 + 1)));
        out.extend(members.into_iter().take(q));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSource {
    pub digest: String,
    pub quadruples: usize,
    pub entities: usize,
    pub relations: usize,
}

impl GraphSource {
    pub fn of(graph: &TemporalKG) -> Self {
        Self {
            digest: seeding::hex_digest(graph.base_tsv().as_bytes())[..16].to_owned(),
            quadruples: graph.len(),
            entities: graph.entity_count(),
            relations: graph.relation_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub seed: u64,
    pub backend: BackendTag,
    pub graph: GraphSource,
    pub train: ClassCounts,
    pub test: ClassCounts,
    /// Test records minus the exclusion list, when one was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_gold: Option<ClassCounts>,
    pub test_quality: String,
    pub planned: ClassCounts,
    pub shortfall: ClassCounts,
    pub skipped: Vec<SkippedInstance>,
}

fn write_jsonl(path: &Path, records: &[TrainingInstance]) -> Result<(), DatasetError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TrainingInstance>, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Writes train, test, the optional gold subset and the manifest into `dir`.
pub fn write_dataset(
    dir: &Path,
    train: &[TrainingInstance],
    test: &[TrainingInstance],
    exclusions: Option<&BTreeSet<String>>,
    mut manifest: DatasetManifest,
) -> Result<DatasetManifest, DatasetError> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(TRAIN_FILE), train)?;
    write_jsonl(&dir.join(TEST_FILE), test)?;
    manifest.train = ClassCounts::of(train.iter().map(|r| &r.class));
    manifest.test = ClassCounts::of(test.iter().map(|r| &r.class));
    manifest.test_quality = "silver".into();
    if let Some(excluded) = exclusions {
        let gold: Vec<TrainingInstance> = test
            .iter()
            .filter(|r| !excluded.contains(&r.id))
            .cloned()
            .map(|mut r| {
                r.meta.silver = false;
                r
            })
            .collect();
        write_jsonl(&dir.join(GOLD_FILE), &gold)?;
        manifest.test_gold = Some(ClassCounts::of(gold.iter().map(|r| &r.class)));
    }
    let mut file = File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut file, &manifest)?;
    file.write_all(b"\n")?;
    Ok(manifest)
}

/// One id per line; blank and `#` lines are ignored.
pub fn read_exclusions(path: &Path) -> Result<BTreeSet<String>, DatasetError> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub file: String,
    pub line: usize,
    pub id: Option<String>,
    pub problem: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub records: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} records, {} violations", self.records, self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "{}:{} [{}] {}", v.file, v.line, v.id.as_deref().unwrap_or("-"), v.problem)?;
        }
        Ok(())
    }
}

fn record_problems(value: &Value) -> Vec<String> {
    let Some(obj) = value.as_object() else {
        return vec!["record is not an object".into()];
    };
    let mut problems = Vec::new();
    for field in RECORD_FIELDS {
        if !obj.contains_key(field) {
            problems.push(format!("missing field {field}"));
        }
    }
    for key in obj.keys() {
        if !RECORD_FIELDS.contains(&key.as_str()) {
            problems.push(format!("unexpected field {key}"));
        }
    }
    for field in ["id", "question", "context", "explanation"] {
        match obj.get(field) {
            Some(Value::String(s)) if !s.trim().is_empty() => {}
            Some(_) => problems.push(format!("{field} must be a non-empty string")),
            None => {}
        }
    }
    let class = obj.get("class").map(|v| serde_json::from_value::<SampleClass>(v.clone()));
    let label = obj.get("answer_label").map(|v| serde_json::from_value::<AnswerLabel>(v.clone()));
    if let Some(Err(_)) = class {
        problems.push(format!("invalid class {}", obj["class"]));
    }
    if let Some(Err(_)) = label {
        problems.push(format!("invalid answer_label {}", obj["answer_label"]));
    }
    if let (Some(Ok(c)), Some(Ok(l))) = (class, label) {
        if c.answer() != l {
            problems.push(format!("class {c} requires answer_label {} but found {}", c.answer().as_str(), l.as_str()));
        }
    }
    if obj.get("meta").is_some_and(|m| !m.is_object()) {
        problems.push("meta must be an object".into());
    }
    problems
}

fn validate_file(path: &Path, seen: &mut HashSet<String>, report: &mut ValidationReport) -> Result<ClassCounts, DatasetError> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let reader = BufReader::new(File::open(path)?);
    let mut counts = ClassCounts::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        report.records += 1;
        let mut push = |id: Option<String>, problem: String| {
            report.violations.push(Violation { file: name.clone(), line: idx + 1, id, problem });
        };
        let value: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                push(None, format!("not valid JSON: {e}"));
                continue;
            }
        };
        let id = value.get("id").and_then(Value::as_str).map(str::to_owned);
        let problems = record_problems(&value);
        if let Some(id) = &id {
            if !seen.insert(id.clone()) {
                push(Some(id.clone()), "duplicate id".into());
            }
        }
        if problems.is_empty() {
            if let Some(c) = value.get("class").and_then(|v| serde_json::from_value::<SampleClass>(v.clone()).ok()) {
                *counts.get_mut(c) += 1;
            }
        } else {
            push(id, problems.join("; "));
        }
    }
    Ok(counts)
}

/// Checks a record file, or a dataset directory including its manifest counts.
pub fn validate(path: &Path) -> Result<ValidationReport, DatasetError> {
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    if !path.is_dir() {
        validate_file(path, &mut seen, &mut report)?;
        return Ok(report);
    }
    let train = validate_file(&path.join(TRAIN_FILE), &mut seen, &mut report)?;
    let test = validate_file(&path.join(TEST_FILE), &mut seen, &mut report)?;
    let manifest_path = path.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        for (split, on_disk, declared) in [("train", train, manifest.train), ("test", test, manifest.test)] {
            if on_disk != declared {
                report.violations.push(Violation {
                    file: MANIFEST_FILE.into(),
                    line: 0,
                    id: None,
                    problem: format!("{split} counts ({declared}) differ from records on disk ({on_disk})"),
                });
            }
        }
    }
    Ok(report)
}
