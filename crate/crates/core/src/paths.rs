//! Reasoning-path extraction, ensemble scoring and selection for a query.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::rules::{for_each_grounding, TemporalRule};
use crate::tkg::{Quadruple, RelationId, TemporalKG, Timestamp};

#[derive(Debug, thiserror::Error)]
pub enum PathError {
    #[error("unknown relation {0:?}")]
    UnknownRelation(String),
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
    #[error("ensemble needs at least one scorer")]
    NoScorers,
    #[error("unknown scorer {0:?}; known: rule_confidence, recency_frequency")]
    UnknownScorer(String),
}

/// Hypothesised future event `(subject, relation, object, time)`.
pub type QueryQuadruple = Quadruple;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub hops: Vec<Quadruple>,
    pub rule: Option<TemporalRule>,
    /// `(scorer name, score)` in scorer order.
    pub scores: Vec<(String, f64)>,
    pub ensemble: f64,
}

impl ReasoningPath {
    pub fn new(hops: Vec<Quadruple>, rule: Option<TemporalRule>) -> Self {
        Self { hops, rule, scores: Vec::new(), ensemble: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    pub fn last_time(&self) -> Option<Timestamp> {
        self.hops.last().map(|q| q.time)
    }

    /// Chain is linked, strictly increasing in time and entirely before `query`.
    pub fn is_sound_for(&self, query: &QueryQuadruple) -> bool {
        !self.hops.is_empty()
            && self.hops.windows(2).all(|w| w[0].time < w[1].time && w[0].object == w[1].subject)
            && self.hops.iter().all(|q| q.time < query.time)
    }

    /// Arrow notation, e.g. `Iran →[sign formal agreement, 2014-11-06]→ Barack Obama`.
    /// Inverse hops are drawn right-to-left with the base relation name.
    pub fn arrow_text(&self, graph: &TemporalKG) -> String {
        let Some(first) = self.hops.first() else {
            return String::new();
        };
        let mut out = graph.entity_name(first.subject).to_owned();
        for q in &self.hops {
            let (_, rel, _, time) = graph.display_quadruple(q);
            let target = graph.entity_name(q.object);
            if graph.is_inverse(q.relation) {
                out.push_str(&format!(" ←[{rel}, {time}]← {target}"));
            } else {
                out.push_str(&format!(" →[{rel}, {time}]→ {target}"));
            }
        }
        out
    }
}

/// Pluggable path scorer; must be a pure function of its inputs.
pub trait PathScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, path: &ReasoningPath, query: &QueryQuadruple) -> f64;
}

/// Confidence of the rule the path grounds.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleConfidenceScorer;

impl PathScorer for RuleConfidenceScorer {
    fn name(&self) -> &str {
        "rule_confidence"
    }

    fn score(&self, path: &ReasoningPath, _query: &QueryQuadruple) -> f64 {
        path.rule.as_ref().map_or(0.0, |r| r.confidence)
    }
}

/// Share of earlier interactions between the query entities that used the
/// query relation, damped by the age of the path's most recent hop.
pub struct RecencyFrequencyScorer<'g> {
    graph: &'g TemporalKG,
    decay: f64,
}

impl<'g> RecencyFrequencyScorer<'g> {
    pub fn new(graph: &'g TemporalKG, decay: f64) -> Self {
        Self { graph, decay }
    }

    fn frequency(&self, query: &QueryQuadruple) -> f64 {
        let pair = |q: &Quadruple| {
            (q.subject == query.subject && q.object == query.object)
                || (q.subject == query.object && q.object == query.subject)
        };
        let earlier = self.graph.window_query(&[query.subject], Timestamp(i32::MIN), query.time);
        let (total, same) = earlier.iter().filter(|q| pair(q)).fold((0u64, 0u64), |(t, s), q| {
            let hit = q.relation == query.relation && q.subject == query.subject;
            (t + 1, s + u64::from(hit))
        });
        if total == 0 {
            0.0
        } else {
            same as f64 / total as f64
        }
    }
}

impl PathScorer for RecencyFrequencyScorer<'_> {
    fn name(&self) -> &str {
        "recency_frequency"
    }

    fn score(&self, path: &ReasoningPath, query: &QueryQuadruple) -> f64 {
        let Some(last) = path.last_time() else { return 0.0 };
        let age = f64::from((query.time.days() - last.days()).max(0));
        (self.frequency(query) * (-self.decay * age).exp()).clamp(0.0, 1.0)
    }
}

pub const SCORER_NAMES: [&str; 2] = ["rule_confidence", "recency_frequency"];

pub fn scorer_by_name<'g>(graph: &'g TemporalKG, name: &str, decay: f64) -> Result<Box<dyn PathScorer + 'g>, PathError> {
    match name {
        "rule_confidence" => Ok(Box::new(RuleConfidenceScorer)),
        "recency_frequency" => Ok(Box::new(RecencyFrequencyScorer::new(graph, decay))),
        other => Err(PathError::UnknownScorer(other.to_owned())),
    }
}

/// Arithmetic mean of the individual scores.
pub fn ensemble_score(
    path: &ReasoningPath,
    query: &QueryQuadruple,
    scorers: &[&dyn PathScorer],
) -> Result<f64, PathError> {
    if scorers.is_empty() {
        return Err(PathError::NoScorers);
    }
    let sum: f64 = scorers.iter().map(|s| s.score(path, query)).sum();
    Ok(sum / scorers.len() as f64)
}

/// Fills `scores` and `ensemble` on every path.
pub fn score_paths(
    paths: &mut [ReasoningPath],
    query: &QueryQuadruple,
    scorers: &[&dyn PathScorer],
) -> Result<(), PathError> {
    if scorers.is_empty() {
        return Err(PathError::NoScorers);
    }
    for path in paths.iter_mut() {
        path.scores = scorers.iter().map(|s| (s.name().to_owned(), s.score(path, query))).collect();
        path.ensemble = path.scores.iter().map(|(_, v)| v).sum::<f64>() / scorers.len() as f64;
    }
    Ok(())
}

/// Groundings of every rule whose head is the query relation, anchored at the
/// query's subject and object and ending before the query time.
pub fn extract_paths(
    graph: &TemporalKG,
    rules: &[TemporalRule],
    query: &QueryQuadruple,
) -> Result<Vec<ReasoningPath>, PathError> {
    extract_paths_capped(graph, rules, query, None)
}

/// As [`extract_paths`], keeping at most `cap` groundings per rule.
pub fn extract_paths_capped(
    graph: &TemporalKG,
    rules: &[TemporalRule],
    query: &QueryQuadruple,
    cap: Option<usize>,
) -> Result<Vec<ReasoningPath>, PathError> {
    if query.relation.0 as usize >= graph.relation_count() {
        return Err(PathError::UnknownRelation(format!("#{}", query.relation.0)));
    }
    let mut out = Vec::new();
    for rule in rules.iter().filter(|r| r.head == query.relation) {
        let mut taken = 0usize;
        for_each_grounding(graph, &rule.body, Some(query), &mut |chain| {
            out.push(ReasoningPath::new(chain.to_vec(), Some(rule.clone())));
            taken += 1;
            cap.is_none_or(|c| taken < c)
        });
    }
    Ok(out)
}

/// Stable text used as the final tie-breaker between equally scored paths.
fn tie_key(path: &ReasoningPath) -> Vec<(u32, u32, u32, i32)> {
    path.hops.iter().map(|q| (q.subject.0, q.relation.0, q.object.0, q.time.0)).collect()
}

fn rank(a: &ReasoningPath, b: &ReasoningPath) -> Ordering {
    b.ensemble
        .total_cmp(&a.ensemble)
        .then_with(|| a.len().cmp(&b.len()))
        .then_with(|| tie_key(a).cmp(&tie_key(b)))
}

/// Highest ensemble score; ties go to the shorter chain, then the smaller chain key.
pub fn select_best(paths: &[ReasoningPath]) -> Option<&ReasoningPath> {
    paths.iter().min_by(|a, b| rank(a, b))
}

pub fn select_top_k(mut paths: Vec<ReasoningPath>, k: usize) -> Vec<ReasoningPath> {
    paths.sort_by(rank);
    paths.truncate(k);
    paths
}

/// Name-based query representation used in files and prompts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NamedQuery {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub time: Timestamp,
}

impl NamedQuery {
    pub fn new(subject: &str, relation: &str, object: &str, time: Timestamp) -> Self {
        Self {
            subject: subject.to_owned(),
            relation: relation.to_owned(),
            object: object.to_owned(),
            time,
        }
    }

    pub fn from_quad(graph: &TemporalKG, q: &Quadruple) -> Self {
        Self::new(
            graph.entity_name(q.subject),
            graph.relation_name(q.relation),
            graph.entity_name(q.object),
            q.time,
        )
    }

    /// Entities absent from the graph resolve to `None`; an unknown relation is an error.
    pub fn resolve(&self, graph: &TemporalKG) -> Result<Option<QueryQuadruple>, PathError> {
        let relation = graph
            .relation(&self.relation)
            .ok_or_else(|| PathError::UnknownRelation(self.relation.clone()))?;
        Ok(match (graph.entity(&self.subject), graph.entity(&self.object)) {
            (Some(subject), Some(object)) => Some(Quadruple { subject, relation, object, time: self.time }),
            _ => None,
        })
    }
}

/// Serialised hop in original orientation: `[subject, relation, object, date]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopRecord(pub String, pub String, pub String, pub Timestamp);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    /// Chain as traversed, including inverse relation names.
    pub chain: Vec<HopRecord>,
    pub arrow: String,
    pub rule: Option<String>,
    pub rule_confidence: Option<f64>,
    pub scores: Vec<(String, f64)>,
    pub ensemble: f64,
}

impl PathRecord {
    pub fn from_path(graph: &TemporalKG, path: &ReasoningPath) -> Self {
        Self {
            chain: path
                .hops
                .iter()
                .map(|q| {
                    HopRecord(
                        graph.entity_name(q.subject).to_owned(),
                        graph.relation_name(q.relation).to_owned(),
                        graph.entity_name(q.object).to_owned(),
                        q.time,
                    )
                })
                .collect(),
            arrow: path.arrow_text(graph),
            rule: path.rule.as_ref().map(|r| r.describe(graph)),
            rule_confidence: path.rule.as_ref().map(|r| r.confidence),
            scores: path.scores.clone(),
            ensemble: path.ensemble,
        }
    }

    /// Rebuilds the chain against `graph`; rule metadata is not restored.
    pub fn to_path(&self, graph: &TemporalKG) -> Result<ReasoningPath, PathError> {
        let hops = self
            .chain
            .iter()
            .map(|HopRecord(s, r, o, t)| {
                let entity = |n: &String| graph.entity(n).ok_or_else(|| PathError::UnknownEntity(n.clone()));
                Ok(Quadruple {
                    subject: entity(s)?,
                    relation: graph.relation(r).ok_or_else(|| PathError::UnknownRelation(r.clone()))?,
                    object: entity(o)?,
                    time: *t,
                })
            })
            .collect::<Result<Vec<_>, PathError>>()?;
        Ok(ReasoningPath {
            hops,
            rule: None,
            scores: self.scores.clone(),
            ensemble: self.ensemble,
        })
    }
}

/// One line of the paths artifact: a query and its selected paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPaths {
    pub query: NamedQuery,
    pub paths: Vec<PathRecord>,
}

/// Ties a graph, a rule set and scorers together for per-query use.
pub struct PathEngine<'a> {
    graph: &'a TemporalKG,
    rules_by_head: HashMap<RelationId, Vec<TemporalRule>>,
    scorers: Vec<Box<dyn PathScorer + 'a>>,
    pub top_k: usize,
    pub cap_per_rule: Option<usize>,
}

impl<'a> PathEngine<'a> {
    pub fn new(graph: &'a TemporalKG, rules: &[TemporalRule], scorers: Vec<Box<dyn PathScorer + 'a>>) -> Self {
        let mut rules_by_head: HashMap<RelationId, Vec<TemporalRule>> = HashMap::new();
        for r in rules {
            rules_by_head.entry(r.head).or_default().push(r.clone());
        }
        Self { graph, rules_by_head, scorers, top_k: 3, cap_per_rule: Some(1000) }
    }

    /// Rule-confidence plus recency-frequency, the default pair.
    pub fn with_default_scorers(graph: &'a TemporalKG, rules: &[TemporalRule], decay: f64) -> Self {
        Self::new(
            graph,
            rules,
            vec![Box::new(RuleConfidenceScorer), Box::new(RecencyFrequencyScorer::new(graph, decay))],
        )
    }

    pub fn graph(&self) -> &TemporalKG {
        self.graph
    }

    /// Scored top-k paths for `query`; empty when no rule fires.
    pub fn best_paths(&self, query: &QueryQuadruple) -> Result<Vec<ReasoningPath>, PathError> {
        let rules = self.rules_by_head.get(&query.relation).map_or(&[][..], Vec::as_slice);
        let mut paths = extract_paths_capped(self.graph, rules, query, self.cap_per_rule)?;
        let scorers: Vec<&dyn PathScorer> = self.scorers.iter().map(|s| s.as_ref()).collect();
        score_paths(&mut paths, query, &scorers)?;
        Ok(select_top_k(paths, self.top_k))
    }
}
