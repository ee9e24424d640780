//! Context sets and positive / negative / neutral query synthesis.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::paths::{NamedQuery, QueryQuadruple, ReasoningPath};
use crate::seeding;
use crate::tkg::{EntityId, Quadruple, RelationId, TemporalKG, Timestamp};

#[derive(Debug, thiserror::Error)]
pub enum SampleError {
    #[error("relation {0:?} has no entry in the inverse relation map")]
    MissingInverse(String),
    #[error("expected a positive sample, got {0}")]
    NotPositive(SampleClass),
    #[error("inverse map line {line}: {reason}")]
    MapFormat { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleClass {
    Positive,
    Negative,
    Neutral,
}

impl SampleClass {
    pub const ALL: [SampleClass; 3] = [SampleClass::Positive, SampleClass::Negative, SampleClass::Neutral];

    pub fn answer(self) -> AnswerLabel {
        match self {
            SampleClass::Positive => AnswerLabel::Yes,
            SampleClass::Negative => AnswerLabel::No,
            SampleClass::Neutral => AnswerLabel::Unsure,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SampleClass::Positive => "positive",
            SampleClass::Negative => "negative",
            SampleClass::Neutral => "neutral",
        }
    }
}

impl fmt::Display for SampleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerLabel {
    Yes,
    No,
    Unsure,
}

impl AnswerLabel {
    pub fn class(self) -> SampleClass {
        match self {
            AnswerLabel::Yes => SampleClass::Positive,
            AnswerLabel::No => SampleClass::Negative,
            AnswerLabel::Unsure => SampleClass::Neutral,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerLabel::Yes => "yes",
            AnswerLabel::No => "no",
            AnswerLabel::Unsure => "unsure",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub window: bool,
    pub path: bool,
}

/// Context quadruple set, ordered by time.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextSet {
    members: BTreeMap<(Timestamp, EntityId, RelationId, EntityId), Provenance>,
}

impl ContextSet {
    fn insert(&mut self, q: &Quadruple, mark: impl FnOnce(&mut Provenance)) {
        mark(self.members.entry((q.time, q.subject, q.relation, q.object)).or_default());
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn quadruples(&self) -> impl Iterator<Item = Quadruple> + '_ {
        self.members
            .keys()
            .map(|&(time, subject, relation, object)| Quadruple { subject, relation, object, time })
    }

    pub fn members(&self) -> impl Iterator<Item = (Quadruple, Provenance)> + '_ {
        self.quadruples().zip(self.members.values().copied())
    }

    pub fn contains(&self, q: &Quadruple) -> bool {
        self.members.contains_key(&(q.time, q.subject, q.relation, q.object))
    }

    /// Entity occurs as subject or object of some member.
    pub fn mentions(&self, e: EntityId) -> bool {
        self.members.keys().any(|&(_, s, _, o)| s == e || o == e)
    }

    pub fn entities(&self) -> BTreeSet<EntityId> {
        self.members.keys().flat_map(|&(_, s, _, o)| [s, o]).collect()
    }
}

/// Quadruples mentioning a query entity in `[t - window_days, t)`, plus every path hop.
pub fn build_context_set(
    graph: &TemporalKG,
    query: &QueryQuadruple,
    window_days: u32,
    paths: &[ReasoningPath],
) -> ContextSet {
    let window_days = window_days.max(1);
    let start = query.time.plus_days(-(window_days as i32));
    let mut set = ContextSet::default();
    for q in graph.window_query(&[query.subject, query.object], start, query.time) {
        set.insert(&q, |p| p.window = true);
    }
    for hop in paths.iter().flat_map(|p| &p.hops) {
        set.insert(hop, |p| p.path = true);
    }
    set
}

/// Relation -> hand-written opposite relations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InverseRelationMap {
    entries: BTreeMap<String, Vec<String>>,
}

impl InverseRelationMap {
    /// Built-in seed table of fifteen relations.
    pub fn builtin() -> Self {
        Self::parse(include_str!("../data/inverse_relations.tsv")).expect("built-in map parses")
    }

    /// `relation \t opposite1 | opposite2 | ...`; `#` lines are comments.
    pub fn parse(text: &str) -> Result<Self, SampleError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| SampleError::MapFormat { line: i + 1, reason: reason.to_owned() };
            let (relation, rest) = line.split_once('\t').ok_or_else(|| err("missing tab"))?;
            let relation = relation.trim();
            let opposites: Vec<String> = rest
                .split('|')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_owned)
                .collect();
            if relation.is_empty() || opposites.is_empty() {
                return Err(err("relation and at least one opposite required"));
            }
            if opposites.iter().any(|o| o == relation) {
                return Err(err("relation lists itself as an opposite"));
            }
            entries.insert(relation.to_owned(), opposites);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, SampleError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn insert(&mut self, relation: &str, opposites: Vec<String>) {
        self.entries.insert(relation.to_owned(), opposites);
    }

    /// Exact match first, then ASCII case-insensitive.
    pub fn get(&self, relation: &str) -> Option<&[String]> {
        let relation = relation.trim();
        self.entries
            .get(relation)
            .or_else(|| self.entries.iter().find(|(k, _)| k.eq_ignore_ascii_case(relation)).map(|(_, v)| v))
            .map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn relations(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of opposite relations over all entries.
    pub fn opposite_count(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledQuery {
    pub query: NamedQuery,
    pub label: SampleClass,
    pub context: ContextSet,
    pub paths: Vec<ReasoningPath>,
    /// Query of the positive instance this one was derived from.
    pub twin: Option<NamedQuery>,
}

impl LabeledQuery {
    pub fn positive(query: NamedQuery, context: ContextSet, paths: Vec<ReasoningPath>) -> Self {
        Self { query, label: SampleClass::Positive, context, paths, twin: None }
    }
}

fn query_key(q: &NamedQuery) -> String {
    format!("{}\t{}\t{}\t{}", q.subject, q.relation, q.object, q.time)
}

/// Swaps the relation for a seeded choice among its opposites.
pub fn make_negative(
    positive: &LabeledQuery,
    map: &InverseRelationMap,
    seed: u64,
) -> Result<LabeledQuery, SampleError> {
    if positive.label != SampleClass::Positive {
        return Err(SampleError::NotPositive(positive.label));
    }
    let options = map
        .get(&positive.query.relation)
        .ok_or_else(|| SampleError::MissingInverse(positive.query.relation.clone()))?;
    let mut rng = seeding::rng_for(seed, &query_key(&positive.query));
    let opposite = &options[rng.random_range(0..options.len())];
    Ok(LabeledQuery {
        query: NamedQuery { relation: opposite.clone(), ..positive.query.clone() },
        label: SampleClass::Negative,
        context: positive.context.clone(),
        paths: positive.paths.clone(),
        twin: Some(positive.query.clone()),
    })
}

/// Replaces both entities with distinct ones never mentioned in the context set.
/// Returns `None` when fewer than two such entities exist.
pub fn make_neutral(positive: &LabeledQuery, graph: &TemporalKG, seed: u64) -> Option<LabeledQuery> {
    if positive.label != SampleClass::Positive {
        return None;
    }
    let used = positive.context.entities();
    let eligible: Vec<EntityId> = graph
        .entity_ids()
        .filter(|e| !used.contains(e))
        .filter(|&e| {
            let name = graph.entity_name(e);
            name != positive.query.subject && name != positive.query.object
        })
        .collect();
    if eligible.len() < 2 {
        return None;
    }
    let mut rng = seeding::rng_for(seed, &query_key(&positive.query));
    let picks = sample(&mut rng, eligible.len(), 2);
    let (a, b) = (eligible[picks.index(0)], eligible[picks.index(1)]);
    Some(LabeledQuery {
        query: NamedQuery {
            subject: graph.entity_name(a).to_owned(),
            object: graph.entity_name(b).to_owned(),
            ..positive.query.clone()
        },
        label: SampleClass::Neutral,
        context: positive.context.clone(),
        paths: Vec::new(),
        twin: Some(positive.query.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tkg::GraphBuilder;

    fn ts(s: &str) -> Timestamp {
        s.parse().unwrap()
    }

    fn positive(query: NamedQuery) -> LabeledQuery {
        LabeledQuery::positive(query, ContextSet::default(), Vec::new())
    }

    #[test]
    fn negative_for_host_a_visit() {
        let map = InverseRelationMap::builtin();
        let pos = positive(NamedQuery::new("Africa", "Host a visit", "Rex Tillerson", ts("2018-03-10")));
        let mut seen = BTreeSet::new();
        for seed in 0..32 {
            let neg = make_negative(&pos, &map, seed).unwrap();
            assert_eq!(neg.label, SampleClass::Negative);
            assert_eq!((neg.query.subject.as_str(), neg.query.object.as_str()), ("Africa", "Rex Tillerson"));
            assert_eq!(neg.query.time, pos.query.time);
            seen.insert(neg.query.relation);
        }
        let expected: BTreeSet<String> =
            ["Cancel upcoming reception", "Withdraw visiting invitations"].map(String::from).into();
        assert_eq!(seen, expected);
    }

    #[test]
    fn negative_for_make_a_visit() {
        let map = InverseRelationMap::builtin();
        let pos = positive(NamedQuery::new("A", "Make a visit", "B", ts("2014-01-01")));
        let neg = make_negative(&pos, &map, 7).unwrap();
        assert!(["Skip a visit", "does not visit"].contains(&neg.query.relation.as_str()));
        assert_eq!(make_negative(&pos, &map, 7).unwrap(), neg);
    }

    #[test]
    fn negative_needs_map_entry_and_positive_label() {
        let map = InverseRelationMap::builtin();
        let pos = positive(NamedQuery::new("A", "Praise or endorse", "B", ts("2014-01-01")));
        let err = make_negative(&pos, &map, 0).unwrap_err();
        assert!(err.to_string().contains("Praise or endorse"));
        let mut neg = positive(NamedQuery::new("A", "Make a visit", "B", ts("2014-01-01")));
        neg.label = SampleClass::Negative;
        assert!(matches!(make_negative(&neg, &map, 0), Err(SampleError::NotPositive(_))));
    }

    #[test]
    fn builtin_map_shape() {
        let map = InverseRelationMap::builtin();
        assert_eq!(map.len(), 15);
        assert!(map.relations().all(|r| !map.get(r).unwrap().iter().any(|o| o == r)));
        assert!(InverseRelationMap::parse("a\ta | b").is_err());
        assert!(InverseRelationMap::parse("a\t  ").is_err());
    }

    #[test]
    fn context_set_from_window_and_paths() {
        let mut b = GraphBuilder::new();
        b.add("X", "r", "Y", ts("2014-01-01"));
        b.add("Y", "r", "Z", ts("2014-01-08"));
        b.add("Z", "r", "W", ts("2014-01-09"));
        b.add("X", "s", "Z", ts("2014-01-10"));
        let g = b.build();
        let (x, z) = (g.entity("X").unwrap(), g.entity("Z").unwrap());
        let query = Quadruple { subject: x, relation: g.relation("s").unwrap(), object: z, time: ts("2014-01-10") };
        let path = ReasoningPath::new(vec![g.quadruples()[0], g.quadruples()[1]], None);
        let ctx = build_context_set(&g, &query, 7, std::slice::from_ref(&path));
        // Window [01-03, 01-10): Y->Z and Z->W; path adds X->Y.
        assert_eq!(ctx.len(), 3);
        let marks: Vec<Provenance> = ctx.members().map(|(_, p)| p).collect();
        assert_eq!(marks[0], Provenance { window: false, path: true });
        assert_eq!(marks[1], Provenance { window: true, path: true });
        assert_eq!(marks[2], Provenance { window: true, path: false });
        assert!(!ctx.contains(&g.quadruples()[3]));

        let empty = build_context_set(&g, &Quadruple { time: ts("2013-01-01"), ..query }, 7, &[]);
        assert!(empty.is_empty());
    }

    #[test]
    fn neutral_draws_from_unmentioned_entities() {
        let mut b = GraphBuilder::new();
        for (s, o) in [("e0", "e1"), ("e1", "e2"), ("e2", "e3")] {
            b.add(s, "r", o, ts("2014-01-05"));
        }
        for i in 4..10 {
            b.add(&format!("e{i}"), "r", &format!("e{i}"), ts("2013-01-01"));
        }
        let g = b.build();
        let query = Quadruple {
            subject: g.entity("e0").unwrap(),
            relation: g.relation("r").unwrap(),
            object: g.entity("e3").unwrap(),
            time: ts("2014-01-06"),
        };
        let ctx = build_context_set(&g, &query, 7, &[]);
        assert_eq!(ctx.entities().len(), 4);
        let pos = LabeledQuery::positive(NamedQuery::from_quad(&g, &query), ctx, Vec::new());
        let outside: BTreeSet<String> = (4..10).map(|i| format!("e{i}")).collect();
        for seed in 0..20 {
            let n = make_neutral(&pos, &g, seed).unwrap();
            assert!(outside.contains(&n.query.subject) && outside.contains(&n.query.object));
            assert_ne!(n.query.subject, n.query.object);
            assert_eq!((n.query.relation.as_str(), n.query.time), ("r", pos.query.time));
            assert!(n.paths.is_empty());
            assert_eq!(make_neutral(&pos, &g, seed), Some(n));
        }
    }

    #[test]
    fn neutral_none_when_context_covers_graph() {
        let mut b = GraphBuilder::new();
        b.add("a", "r", "b", ts("2014-01-01"));
        b.add("b", "r", "a", ts("2014-01-02"));
        let g = b.build();
        let q = Quadruple { subject: g.entity("a").unwrap(), relation: g.relation("r").unwrap(), object: g.entity("b").unwrap(), time: ts("2014-01-03") };
        let pos = LabeledQuery::positive(NamedQuery::from_quad(&g, &q), build_context_set(&g, &q, 7, &[]), Vec::new());
        assert!(make_neutral(&pos, &g, 1).is_none());
    }
}
