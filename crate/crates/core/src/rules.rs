//! Temporal logic rule mining.
//!
//! A rule `head(X, Y) <- b1(X, Z1) ^ b2(Z1, Z2) ^ ... ^ bm(Z(m-1), Y)` is read
//! as: whenever the body chain holds with strictly increasing timestamps, the
//! head relation is expected to hold between the chain's endpoints at some
//! later time. Candidate bodies are discovered by random walks that start at a
//! head edge and step backwards in time, preferring recent predecessor edges;
//! confidence is then computed by enumerating body groundings.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::paths::{QueryQuadruple, ReasoningPath};
use crate::seeding;
use crate::tkg::{EntityId, Quadruple, RelationId, TemporalKG, Timestamp};

#[derive(Debug, thiserror::Error)]
pub enum MineError {
    #[error("cannot mine rules from an empty graph")]
    EmptyGraph,
    #[error("invalid miner configuration: {0}")]
    Config(&'static str),
    #[error("rules file line {line}: {reason}")]
    Format { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinerConfig {
    pub max_body_len: usize,
    pub walks_per_relation: usize,
    /// Per-day decay of the backward-walk transition weights.
    pub decay: f64,
    pub min_support: u64,
    pub seed: u64,
    /// Body groundings counted exactly up to this many; sampled beyond it.
    pub exact_limit: u64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self {
            max_body_len: 3,
            walks_per_relation: 200,
            decay: 0.1,
            min_support: 2,
            seed: 0,
            exact_limit: 10_000,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<(), MineError> {
        if self.max_body_len == 0 {
            return Err(MineError::Config("max_body_len must be at least 1"));
        }
        if self.walks_per_relation == 0 {
            return Err(MineError::Config("walks_per_relation must be at least 1"));
        }
        if !(self.decay.is_finite() && self.decay >= 0.0) {
            return Err(MineError::Config("decay must be a non-negative number"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalRule {
    pub head: RelationId,
    pub body: Vec<RelationId>,
    /// Body groundings whose endpoints are later linked by the head relation.
    pub support: u64,
    pub body_groundings: u64,
    pub confidence: f64,
    /// False when `support` was estimated by sampling.
    pub exact: bool,
}

impl TemporalRule {
    pub fn body_len(&self) -> usize {
        self.body.len()
    }

    fn sort_key(&self) -> (usize, RelationId, &[RelationId]) {
        (self.body.len(), self.head, &self.body)
    }

    pub fn describe(&self, graph: &TemporalKG) -> String {
        let body: Vec<&str> = self.body.iter().map(|&r| graph.relation_name(r)).collect();
        format!("{} <- {}", graph.relation_name(self.head), body.join(" ^ "))
    }
}

/// Orders rules by confidence (descending), then shorter body, then relation ids.
pub fn sort_rules(rules: &mut [TemporalRule]) {
    rules.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.sort_key().cmp(&b.sort_key()))
    });
}

/// Mines rules for every relation that occurs as a head edge.
pub fn mine_rules(graph: &TemporalKG, config: &MinerConfig) -> Result<Vec<TemporalRule>, MineError> {
    config.validate()?;
    if graph.is_empty() {
        return Err(MineError::EmptyGraph);
    }
    let heads: Vec<RelationId> = graph.relation_ids().collect();
    let mut rules: Vec<TemporalRule> = heads
        .par_iter()
        .flat_map_iter(|&head| {
            let mut rng = seeding::rng(config.seed, u64::from(head.0));
            let bodies = discover_bodies(graph, head, config, &mut rng);
            bodies
                .into_iter()
                .filter_map(|body| {
                    let rule = score_rule(graph, head, body, config, &mut rng);
                    (rule.support >= config.min_support).then_some(rule)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    sort_rules(&mut rules);
    Ok(rules)
}

fn discover_bodies(
    graph: &TemporalKG,
    head: RelationId,
    config: &MinerConfig,
    rng: &mut impl Rng,
) -> BTreeSet<Vec<RelationId>> {
    let head_edges = graph.relation_indices(head);
    let mut bodies = BTreeSet::new();
    if head_edges.is_empty() {
        return bodies;
    }
    for len in 1..=config.max_body_len {
        for _ in 0..config.walks_per_relation {
            let start = *graph.quad(head_edges[rng.random_range(0..head_edges.len())]);
            if let Some(body) = backward_walk(graph, &start, len, config.decay, rng) {
                bodies.insert(body);
            }
        }
    }
    bodies
}

/// Walks `len` steps back in time from the head edge's object towards its subject.
fn backward_walk(
    graph: &TemporalKG,
    head_edge: &Quadruple,
    len: usize,
    decay: f64,
    rng: &mut impl Rng,
) -> Option<Vec<RelationId>> {
    let mut current = head_edge.object;
    let mut now = head_edge.time;
    let mut relations = Vec::with_capacity(len);
    for step in 0..len {
        let last = step + 1 == len;
        let candidates: Vec<&Quadruple> = graph
            .incoming_before(current, now)
            .iter()
            .map(|&i| graph.quad(i))
            .filter(|q| !last || q.subject == head_edge.subject)
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let weights: Vec<f64> = candidates
            .iter()
            .map(|q| (-decay * f64::from(now.days() - q.time.days())).exp().max(f64::MIN_POSITIVE))
            .collect();
        let pick = WeightedIndex::new(&weights).ok()?.sample(rng);
        let edge = candidates[pick];
        relations.push(edge.relation);
        current = edge.subject;
        now = edge.time;
    }
    relations.reverse();
    Some(relations)
}

/// Latest time each `(subject, object)` pair is linked by `head`.
fn head_index(graph: &TemporalKG, head: RelationId) -> HashMap<(EntityId, EntityId), Timestamp> {
    let mut latest = HashMap::new();
    for q in graph.with_relation(head) {
        latest
            .entry((q.subject, q.object))
            .and_modify(|t: &mut Timestamp| *t = (*t).max(q.time))
            .or_insert(q.time);
    }
    latest
}

fn confirmed(latest: &HashMap<(EntityId, EntityId), Timestamp>, chain: &[Quadruple]) -> bool {
    let first = chain.first().expect("non-empty chain");
    let last = chain.last().expect("non-empty chain");
    latest
        .get(&(first.subject, last.object))
        .is_some_and(|&t| t > last.time)
}

fn score_rule(
    graph: &TemporalKG,
    head: RelationId,
    body: Vec<RelationId>,
    config: &MinerConfig,
    rng: &mut impl Rng,
) -> TemporalRule {
    let latest = head_index(graph, head);
    let mut chains = Vec::new();
    let complete = for_each_grounding(graph, &body, None, &mut |chain| {
        chains.push(chain.to_vec());
        (chains.len() as u64) <= config.exact_limit
    });
    let (support, body_groundings, exact) = if complete {
        let support = chains.iter().filter(|c| confirmed(&latest, c)).count() as u64;
        (support, chains.len() as u64, true)
    } else {
        let counter = ChainCounter::new(graph, &body);
        let total = counter.total();
        let samples = config.walks_per_relation.max(1);
        let hits = (0..samples)
            .filter(|_| confirmed(&latest, &counter.sample(rng)))
            .count();
        let estimate = (total as f64 * hits as f64 / samples as f64).round() as u64;
        (estimate, total, false)
    };
    TemporalRule {
        head,
        confidence: if body_groundings == 0 { 0.0 } else { support as f64 / body_groundings as f64 },
        body,
        support,
        body_groundings,
        exact,
    }
}

/// Depth-first enumeration of body chains. `visit` returns false to stop early;
/// the return value reports whether enumeration ran to completion.
///
/// With a `query`, chains must start at its subject, end at its object and
/// finish strictly before its time.
pub fn for_each_grounding(
    graph: &TemporalKG,
    body: &[RelationId],
    query: Option<&QueryQuadruple>,
    visit: &mut dyn FnMut(&[Quadruple]) -> bool,
) -> bool {
    if body.is_empty() {
        return true;
    }
    let deadline = query.map(|q| q.time);
    let starts: Box<dyn Iterator<Item = &Quadruple>> = match query {
        Some(q) => Box::new(graph.outgoing(q.subject).filter(move |e| e.relation == body[0])),
        None => Box::new(graph.with_relation(body[0])),
    };
    let mut chain = Vec::with_capacity(body.len());
    for first in starts {
        if deadline.is_some_and(|d| first.time >= d) {
            break;
        }
        chain.push(*first);
        let keep_going = extend(graph, body, query, &mut chain, visit);
        chain.pop();
        if !keep_going {
            return false;
        }
    }
    true
}

fn extend(
    graph: &TemporalKG,
    body: &[RelationId],
    query: Option<&QueryQuadruple>,
    chain: &mut Vec<Quadruple>,
    visit: &mut dyn FnMut(&[Quadruple]) -> bool,
) -> bool {
    let tail = *chain.last().expect("chain seeded");
    if chain.len() == body.len() {
        if query.is_some_and(|q| tail.object != q.object) {
            return true;
        }
        return visit(chain);
    }
    let next_rel = body[chain.len()];
    for &i in graph.outgoing_after(tail.object, tail.time) {
        let q = graph.quad(i);
        if query.is_some_and(|qq| q.time >= qq.time) {
            break;
        }
        if q.relation != next_rel {
            continue;
        }
        chain.push(*q);
        let keep_going = extend(graph, body, query, chain, visit);
        chain.pop();
        if !keep_going {
            return false;
        }
    }
    true
}

/// All body groundings of `rule`, optionally anchored to a query.
pub fn enumerate_groundings(
    graph: &TemporalKG,
    rule: &TemporalRule,
    head_query: Option<&QueryQuadruple>,
) -> Vec<ReasoningPath> {
    let mut out = Vec::new();
    for_each_grounding(graph, &rule.body, head_query, &mut |chain| {
        out.push(ReasoningPath::new(chain.to_vec(), Some(rule.clone())));
        true
    });
    out
}

/// Counts completions of body chains by dynamic programming, which allows
/// uniform sampling of groundings without enumerating them.
struct ChainCounter<'g> {
    graph: &'g TemporalKG,
    body: &'g [RelationId],
    /// `counts[k][i]`: chains completing body[k..] from quadruple index `i`.
    counts: Vec<HashMap<u32, u64>>,
}

impl<'g> ChainCounter<'g> {
    fn new(graph: &'g TemporalKG, body: &'g [RelationId]) -> Self {
        let mut counts: Vec<HashMap<u32, u64>> = vec![HashMap::new(); body.len()];
        for k in (0..body.len()).rev() {
            let mut level = HashMap::new();
            for &i in graph.relation_indices(body[k]) {
                let c = if k + 1 == body.len() {
                    1
                } else {
                    let q = graph.quad(i);
                    graph
                        .outgoing_after(q.object, q.time)
                        .iter()
                        .filter_map(|j| counts[k + 1].get(j))
                        .fold(0u64, |acc, &c| acc.saturating_add(c))
                };
                if c > 0 {
                    level.insert(i, c);
                }
            }
            counts[k] = level;
        }
        Self { graph, body, counts }
    }

    fn total(&self) -> u64 {
        self.counts[0].values().fold(0u64, |acc, &c| acc.saturating_add(c))
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec<Quadruple> {
        let mut starts: Vec<(u32, u64)> = self.counts[0].iter().map(|(&i, &c)| (i, c)).collect();
        starts.sort_unstable();
        let mut chain = Vec::with_capacity(self.body.len());
        let mut pick = weighted_pick(&starts, rng);
        chain.push(*self.graph.quad(pick));
        for k in 1..self.body.len() {
            let prev = *chain.last().expect("seeded");
            let options: Vec<(u32, u64)> = self
                .graph
                .outgoing_after(prev.object, prev.time)
                .iter()
                .filter_map(|&j| self.counts[k].get(&j).map(|&c| (j, c)))
                .collect();
            pick = weighted_pick(&options, rng);
            chain.push(*self.graph.quad(pick));
        }
        chain
    }
}

fn weighted_pick(options: &[(u32, u64)], rng: &mut impl Rng) -> u32 {
    let total: u64 = options.iter().map(|&(_, c)| c).sum();
    let mut target = rng.random_range(0..total);
    for &(i, c) in options {
        if target < c {
            return i;
        }
        target -= c;
    }
    unreachable!("target below total weight")
}

/// Line format: `confidence \t support \t body_groundings \t exact|sampled \t head \t body...`.
pub fn write_rules(graph: &TemporalKG, rules: &[TemporalRule]) -> String {
    let mut out = String::new();
    for r in rules {
        let _ = write!(
            out,
            "{:.6}\t{}\t{}\t{}\t{}",
            r.confidence,
            r.support,
            r.body_groundings,
            if r.exact { "exact" } else { "sampled" },
            graph.relation_name(r.head)
        );
        for &b in &r.body {
            out.push('\t');
            out.push_str(graph.relation_name(b));
        }
        out.push('\n');
    }
    out
}

/// Inverse of [`write_rules`]; lines starting with `#` are ignored.
pub fn read_rules(graph: &TemporalKG, text: &str) -> Result<Vec<TemporalRule>, MineError> {
    let mut rules = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| MineError::Format { line: idx + 1, reason };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 6 {
            return Err(err(format!("expected at least 6 fields, found {}", fields.len())));
        }
        let number = |s: &str| s.parse::<u64>().map_err(|e| err(format!("{s:?}: {e}")));
        let support = number(fields[1])?;
        let body_groundings = number(fields[2])?;
        let exact = match fields[3] {
            "exact" => true,
            "sampled" => false,
            other => return Err(err(format!("unknown estimate kind {other:?}"))),
        };
        let relation = |name: &str| graph.relation(name).ok_or_else(|| err(format!("unknown relation {name:?}")));
        let head = relation(fields[4])?;
        let body = fields[5..].iter().map(|n| relation(n)).collect::<Result<Vec<_>, _>>()?;
        rules.push(TemporalRule {
            head,
            body,
            support,
            body_groundings,
            confidence: if body_groundings == 0 { 0.0 } else { support as f64 / body_groundings as f64 },
            exact,
        });
    }
    Ok(rules)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tkg::GraphBuilder;

    fn day(d: i32) -> Timestamp {
        Timestamp::from_ymd(2014, 1, 1).unwrap().plus_days(d)
    }

    fn planted(confirmations: &[bool]) -> TemporalKG {
        let mut b = GraphBuilder::new();
        for (i, &ok) in confirmations.iter().enumerate() {
            let (x, y) = (format!("x{i}"), format!("y{i}"));
            let t = 10 * i as i32;
            b.add(&x, "A", &y, day(t));
            if ok {
                b.add(&x, "B", &y, day(t + 3));
            }
        }
        // One extra B so the head relation exists even when nothing confirms.
        b.add("p", "B", "q", day(0));
        b.build()
    }

    fn find<'a>(g: &TemporalKG, rules: &'a [TemporalRule], head: &str, body: &[&str]) -> Option<&'a TemporalRule> {
        let head = g.relation(head)?;
        let body: Vec<RelationId> = body.iter().map(|b| g.relation(b).unwrap()).collect();
        rules.iter().find(|r| r.head == head && r.body == body)
    }

    #[test]
    fn planted_rule_with_no_counterexamples() {
        let g = planted(&[true; 10]);
        let rules = mine_rules(&g, &MinerConfig::default()).unwrap();
        let r = find(&g, &rules, "B", &["A"]).expect("B <- A mined");
        assert_eq!(r.confidence, 1.0);
        assert_eq!((r.support, r.body_groundings), (10, 10));
        assert!(r.exact);
    }

    #[test]
    fn planted_rule_two_of_three() {
        let g = planted(&[true, false, true]);
        let rules = mine_rules(&g, &MinerConfig::default()).unwrap();
        let r = find(&g, &rules, "B", &["A"]).expect("B <- A mined");
        assert_eq!(r.confidence, 2.0 / 3.0);
    }

    #[test]
    fn disconnected_singletons_yield_no_rules() {
        let mut b = GraphBuilder::new();
        for i in 0..8 {
            b.add(&format!("s{i}"), &format!("r{}", i % 3), &format!("o{i}"), day(i));
        }
        assert!(mine_rules(&b.build(), &MinerConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn empty_graph_and_bad_config_are_errors() {
        let g = GraphBuilder::new().build();
        assert!(matches!(mine_rules(&g, &MinerConfig::default()), Err(MineError::EmptyGraph)));
        let g = planted(&[true]);
        let cfg = MinerConfig { max_body_len: 0, ..Default::default() };
        assert!(matches!(mine_rules(&g, &cfg), Err(MineError::Config(_))));
    }

    #[test]
    fn absent_body_relation_has_no_groundings() {
        let g = planted(&[true, true]);
        let rule = TemporalRule {
            head: g.relation("B").unwrap(),
            body: vec![g.relation("B").unwrap(), g.relation("B").unwrap()],
            support: 0,
            body_groundings: 0,
            confidence: 0.0,
            exact: true,
        };
        assert!(enumerate_groundings(&g, &rule, None).is_empty());
    }

    #[test]
    fn sampled_confidence_close_to_exact() {
        let g = planted(&[true, true, false, true, false, true, true, true, false, true]);
        let exact = mine_rules(&g, &MinerConfig::default()).unwrap();
        let cfg = MinerConfig { exact_limit: 2, walks_per_relation: 4000, ..Default::default() };
        let sampled = mine_rules(&g, &cfg).unwrap();
        let e = find(&g, &exact, "B", &["A"]).unwrap();
        let s = find(&g, &sampled, "B", &["A"]).unwrap();
        assert!(!s.exact);
        assert_eq!(s.body_groundings, e.body_groundings);
        assert!((s.confidence - e.confidence).abs() < 0.1, "{} vs {}", s.confidence, e.confidence);
    }

    #[test]
    fn rules_round_trip_through_text() {
        let g = planted(&[true, false, true, true]);
        let rules = mine_rules(&g, &MinerConfig::default()).unwrap();
        let text = write_rules(&g, &rules);
        let back = read_rules(&g, &text).unwrap();
        assert_eq!(write_rules(&g, &back), text);
        assert!(read_rules(&g, "0.5\t1\t2\texact\tNOPE\tA\n").is_err());
    }

    #[test]
    fn ordering_prefers_confidence_then_short_bodies() {
        let r = |conf: f64, len: usize| TemporalRule {
            head: RelationId(0),
            body: vec![RelationId(1); len],
            support: 2,
            body_groundings: 2,
            confidence: conf,
            exact: true,
        };
        let mut rules = vec![r(0.5, 1), r(0.9, 3), r(0.9, 2)];
        sort_rules(&mut rules);
        assert_eq!(rules.iter().map(|r| (r.confidence, r.body.len())).collect::<Vec<_>>(),
            vec![(0.9, 2), (0.9, 3), (0.5, 1)]);
    }
}
