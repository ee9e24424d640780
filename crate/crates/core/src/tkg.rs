//! Immutable, time-indexed temporal knowledge graph.
//!
//! A graph is built once from tab-separated quadruple text and never mutated
//! afterwards. Entities and relations are interned to dense integer handles;
//! quadruples are kept sorted by time with per-subject, per-object and
//! per-relation indexes (each also time-sorted) pointing back into the list.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

/// Prefix marking a relation synthesised by inverse-edge augmentation.
pub const INVERSE_PREFIX: &str = "_";

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("line {line}: expected 4 tab-separated fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: unparseable date {text:?}")]
    Date { line: usize, text: String },
    #[error("line {line}: empty {field} field")]
    EmptyField { line: usize, field: &'static str },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

/// Calendar day, counted from 1970-01-01.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Timestamp(pub i32);

impl Timestamp {
    const EPOCH: NaiveDate = NaiveDate::from_ymd_opt(1970, 1, 1).unwrap();

    pub fn from_ymd(year: i32, month: u32, day: u32) -> Option<Self> {
        NaiveDate::from_ymd_opt(year, month, day).map(Self::from_date)
    }

    fn from_date(date: NaiveDate) -> Self {
        Timestamp(date.signed_duration_since(Self::EPOCH).num_days() as i32)
    }

    fn date(self) -> NaiveDate {
        Self::EPOCH + chrono::Duration::days(self.0 as i64)
    }

    pub fn days(self) -> i32 {
        self.0
    }

    pub fn plus_days(self, days: i32) -> Self {
        Timestamp(self.0 + days)
    }

    /// `MM-DD-YYYY`, the form used in explanation and context listings.
    pub fn us_format(self) -> String {
        let d = self.date();
        format!("{:02}-{:02}-{:04}", d.month(), d.day(), d.year())
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.date();
        write!(f, "{:04}-{:02}-{:02}", d.year(), d.month(), d.day())
    }
}

impl FromStr for Timestamp {
    type Err = chrono::ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map(Self::from_date)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quadruple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
    pub time: Timestamp,
}

/// Bijective string <-> dense id table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Interner {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Interner {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.ids.get(name.trim()).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }
}

/// How the date column is encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DateFormat {
    /// `YYYY-MM-DD`.
    Iso,
    /// Integer offsets from `epoch`, `unit` raw steps per day (e.g. 24 for hour-coded files).
    Offset { epoch: Timestamp, unit: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FormatConfig {
    pub date_format: DateFormat,
    /// Lines starting with this prefix are skipped like blank lines.
    pub comment_prefix: Option<String>,
    /// Collapse identical quadruples into one.
    pub dedup: bool,
    /// Add `(o, _r, s, t)` for every `(s, r, o, t)`.
    pub inverse_edges: bool,
}

impl Default for FormatConfig {
    fn default() -> Self {
        Self {
            date_format: DateFormat::Iso,
            comment_prefix: None,
            dedup: false,
            inverse_edges: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub entities: usize,
    pub relations: usize,
    pub quadruples: usize,
    pub first: Option<Timestamp>,
    pub last: Option<Timestamp>,
}

impl fmt::Display for GraphStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "entities: {}", self.entities)?;
        writeln!(f, "relations: {}", self.relations)?;
        writeln!(f, "quadruples: {}", self.quadruples)?;
        match (self.first, self.last) {
            (Some(a), Some(b)) => write!(f, "time_span: {a} .. {b} ({} days)", b.0 - a.0 + 1),
            _ => write!(f, "time_span: none"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemporalKG {
    entities: Interner,
    relations: Interner,
    quads: Vec<Quadruple>,
    outgoing: Vec<Vec<u32>>,
    incoming: Vec<Vec<u32>>,
    by_relation: Vec<Vec<u32>>,
}

/// Incremental constructor; `build` sorts and indexes.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    entities: Interner,
    relations: Interner,
    quads: Vec<Quadruple>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, subject: &str, relation: &str, object: &str, time: Timestamp) -> &mut Self {
        let q = Quadruple {
            subject: EntityId(self.entities.intern(subject.trim())),
            relation: RelationId(self.relations.intern(relation.trim())),
            object: EntityId(self.entities.intern(object.trim())),
            time,
        };
        self.quads.push(q);
        self
    }

    pub fn build(self) -> TemporalKG {
        self.build_with(false, false)
    }

    pub fn build_with(mut self, dedup: bool, inverse_edges: bool) -> TemporalKG {
        if inverse_edges {
            let forward = self.quads.clone();
            for q in forward {
                let name = format!("{INVERSE_PREFIX}{}", self.relations.name(q.relation.0));
                let inv = RelationId(self.relations.intern(&name));
                self.quads.push(Quadruple {
                    subject: q.object,
                    relation: inv,
                    object: q.subject,
                    time: q.time,
                });
            }
        }
        if dedup {
            let mut seen = HashSet::new();
            self.quads.retain(|q| seen.insert(*q));
        }
        // Stable: equal timestamps keep input order.
        self.quads.sort_by_key(|q| q.time);

        let mut outgoing = vec![Vec::new(); self.entities.len()];
        let mut incoming = vec![Vec::new(); self.entities.len()];
        let mut by_relation = vec![Vec::new(); self.relations.len()];
        for (i, q) in self.quads.iter().enumerate() {
            outgoing[q.subject.0 as usize].push(i as u32);
            incoming[q.object.0 as usize].push(i as u32);
            by_relation[q.relation.0 as usize].push(i as u32);
        }
        TemporalKG {
            entities: self.entities,
            relations: self.relations,
            quads: self.quads,
            outgoing,
            incoming,
            by_relation,
        }
    }
}

impl TemporalKG {
    /// Parses tab-separated `subject, relation, object, date` records.
    pub fn parse<R: BufRead>(reader: R, config: &FormatConfig) -> Result<Self, ParseError> {
        let mut builder = GraphBuilder::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let trimmed = line.trim_end_matches(['\r', '\n']);
            if trimmed.trim().is_empty() {
                continue;
            }
            if let Some(prefix) = &config.comment_prefix {
                if trimmed.starts_with(prefix.as_str()) {
                    continue;
                }
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 4 {
                return Err(ParseError::FieldCount { line: lineno, found: fields.len() });
            }
            for (field, name) in fields.iter().zip(["subject", "relation", "object", "date"]) {
                if field.trim().is_empty() {
                    return Err(ParseError::EmptyField { line: lineno, field: name });
                }
            }
            let time = parse_date(fields[3], config.date_format).ok_or_else(|| ParseError::Date {
                line: lineno,
                text: fields[3].to_owned(),
            })?;
            builder.add(fields[0], fields[1], fields[2], time);
        }
        Ok(builder.build_with(config.dedup, config.inverse_edges))
    }

    pub fn parse_str(text: &str, config: &FormatConfig) -> Result<Self, ParseError> {
        Self::parse(text.as_bytes(), config)
    }

    /// Canonical TSV: one quadruple per line in time order, ISO dates.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for q in &self.quads {
            out.push_str(&self.format_tsv(q));
            out.push('\n');
        }
        out
    }

    /// As [`Self::to_tsv`] without the added inverse edges.
    pub fn base_tsv(&self) -> String {
        let mut out = String::new();
        for q in self.quads.iter().filter(|q| !self.is_inverse(q.relation)) {
            out.push_str(&self.format_tsv(q));
            out.push('\n');
        }
        out
    }

    fn format_tsv(&self, q: &Quadruple) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.entity_name(q.subject),
            self.relation_name(q.relation),
            self.entity_name(q.object),
            q.time
        )
    }

    pub fn quadruples(&self) -> &[Quadruple] {
        &self.quads
    }

    pub fn len(&self) -> usize {
        self.quads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quads.is_empty()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn entity(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name).map(EntityId)
    }

    pub fn relation(&self, name: &str) -> Option<RelationId> {
        self.relations.get(name).map(RelationId)
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        self.entities.name(id.0)
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        self.relations.name(id.0)
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> {
        (0..self.entities.len() as u32).map(EntityId)
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = RelationId> {
        (0..self.relations.len() as u32).map(RelationId)
    }

    /// True for relations added by inverse-edge augmentation.
    pub fn is_inverse(&self, rel: RelationId) -> bool {
        self.relation_name(rel).starts_with(INVERSE_PREFIX)
    }

    /// Quadruple in its original orientation; inverse edges are flipped back.
    pub fn display_quadruple(&self, q: &Quadruple) -> (&str, &str, &str, Timestamp) {
        let rel = self.relation_name(q.relation);
        match rel.strip_prefix(INVERSE_PREFIX) {
            Some(base) => (self.entity_name(q.object), base, self.entity_name(q.subject), q.time),
            None => (self.entity_name(q.subject), rel, self.entity_name(q.object), q.time),
        }
    }

    /// Quadruples whose subject is `e`, non-decreasing in time.
    pub fn outgoing(&self, e: EntityId) -> impl Iterator<Item = &Quadruple> + '_ {
        self.outgoing
            .get(e.0 as usize)
            .into_iter()
            .flatten()
            .map(move |&i| &self.quads[i as usize])
    }

    /// Quadruples whose object is `e`, non-decreasing in time.
    pub fn incoming(&self, e: EntityId) -> impl Iterator<Item = &Quadruple> + '_ {
        self.incoming
            .get(e.0 as usize)
            .into_iter()
            .flatten()
            .map(move |&i| &self.quads[i as usize])
    }

    pub fn with_relation(&self, r: RelationId) -> impl Iterator<Item = &Quadruple> + '_ {
        self.by_relation
            .get(r.0 as usize)
            .into_iter()
            .flatten()
            .map(move |&i| &self.quads[i as usize])
    }

    /// Outgoing edges of `e` with time strictly after `after`.
    pub fn outgoing_after(&self, e: EntityId, after: Timestamp) -> &[u32] {
        let Some(list) = self.outgoing.get(e.0 as usize) else {
            return &[];
        };
        let start = list.partition_point(|&i| self.quads[i as usize].time <= after);
        &list[start..]
    }

    /// Incoming edges of `e` with time strictly before `before`.
    pub fn incoming_before(&self, e: EntityId, before: Timestamp) -> &[u32] {
        let Some(list) = self.incoming.get(e.0 as usize) else {
            return &[];
        };
        let end = list.partition_point(|&i| self.quads[i as usize].time < before);
        &list[..end]
    }

    /// Indexes of quadruples with relation `r`, non-decreasing in time.
    pub fn relation_indices(&self, r: RelationId) -> &[u32] {
        self.by_relation.get(r.0 as usize).map_or(&[], Vec::as_slice)
    }

    pub fn quad(&self, index: u32) -> &Quadruple {
        &self.quads[index as usize]
    }

    /// Every quadruple touching `entities` with `start <= time < end`, in time order.
    pub fn window_query(&self, entities: &[EntityId], start: Timestamp, end: Timestamp) -> Vec<Quadruple> {
        let mut hits: BTreeSet<u32> = BTreeSet::new();
        for &e in entities {
            for index in [&self.outgoing, &self.incoming] {
                let Some(list) = index.get(e.0 as usize) else { continue };
                let lo = list.partition_point(|&i| self.quads[i as usize].time < start);
                let hi = list.partition_point(|&i| self.quads[i as usize].time < end);
                hits.extend(&list[lo..hi.max(lo)]);
            }
        }
        hits.into_iter().map(|i| self.quads[i as usize]).collect()
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            entities: self.entities.len(),
            relations: self.relations.len(),
            quadruples: self.quads.len(),
            first: self.quads.first().map(|q| q.time),
            last: self.quads.last().map(|q| q.time),
        }
    }

    /// Checks the structural invariants: time order and index/list agreement.
    pub fn check_invariants(&self) -> bool {
        if self.quads.windows(2).any(|w| w[0].time > w[1].time) {
            return false;
        }
        let covered = |index: &Vec<Vec<u32>>, key: fn(&Quadruple) -> usize| {
            let mut seen = vec![false; self.quads.len()];
            for (k, list) in index.iter().enumerate() {
                for &i in list {
                    let q = &self.quads[i as usize];
                    if key(q) != k || std::mem::replace(&mut seen[i as usize], true) {
                        return false;
                    }
                }
                if list.windows(2).any(|w| w[0] >= w[1]) {
                    return false;
                }
            }
            seen.into_iter().all(|s| s)
        };
        covered(&self.outgoing, |q| q.subject.0 as usize)
            && covered(&self.incoming, |q| q.object.0 as usize)
            && covered(&self.by_relation, |q| q.relation.0 as usize)
    }
}

fn parse_date(text: &str, format: DateFormat) -> Option<Timestamp> {
    match format {
        DateFormat::Iso => text.parse().ok(),
        DateFormat::Offset { epoch, unit } => {
            let raw: i64 = text.trim().parse().ok()?;
            let unit = i64::from(unit.max(1));
            Some(epoch.plus_days((raw / unit) as i32))
        }
    }
}
