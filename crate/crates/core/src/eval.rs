//! Verdict classification metrics, BLEU / ROUGE text overlap and Cohen's kappa.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::Hash;
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::llm::first_sentence;
use crate::samples::{AnswerLabel, SampleClass};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no items to score")]
    Empty,
}

static TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\w+|[^\w\s]").expect("valid regex"));
static LABEL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(yes|no|unsure)\b").expect("valid regex"));

/// Lowercased word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    TOKEN.find_iter(&text.to_lowercase()).map(|m| m.as_str().to_owned()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedLabel {
    Yes,
    No,
    Unsure,
    Unparseable,
}

impl ParsedLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ParsedLabel::Yes => "yes",
            ParsedLabel::No => "no",
            ParsedLabel::Unsure => "unsure",
            ParsedLabel::Unparseable => "unparseable",
        }
    }

    pub fn answer(self) -> Option<AnswerLabel> {
        match self {
            ParsedLabel::Yes => Some(AnswerLabel::Yes),
            ParsedLabel::No => Some(AnswerLabel::No),
            ParsedLabel::Unsure => Some(AnswerLabel::Unsure),
            ParsedLabel::Unparseable => None,
        }
    }
}

impl From<AnswerLabel> for ParsedLabel {
    fn from(a: AnswerLabel) -> Self {
        match a {
            AnswerLabel::Yes => ParsedLabel::Yes,
            AnswerLabel::No => ParsedLabel::No,
            AnswerLabel::Unsure => ParsedLabel::Unsure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub label: ParsedLabel,
    pub explanation: String,
}

/// First word-bounded yes / no / unsure in the first sentence decides the label.
/// A first sentence holding nothing but the label is dropped from the explanation.
pub fn parse_answer_label(text: &str) -> ParsedAnswer {
    let trimmed = text.trim();
    let head = first_sentence(trimmed);
    let Some(m) = LABEL.find(head) else {
        return ParsedAnswer { label: ParsedLabel::Unparseable, explanation: trimmed.to_owned() };
    };
    let label = match m.as_str().to_ascii_lowercase().as_str() {
        "yes" => ParsedLabel::Yes,
        "no" => ParsedLabel::No,
        _ => ParsedLabel::Unsure,
    };
    let bare = head.trim_matches(|c: char| !c.is_alphanumeric()).eq_ignore_ascii_case(m.as_str());
    let explanation = if bare {
        trimmed[head.len()..].trim_start_matches(|c: char| c.is_whitespace() || ".!?,:;".contains(c))
    } else {
        trimmed
    };
    ParsedAnswer { label, explanation: explanation.trim().to_owned() }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(hits: f64, predicted: f64, actual: f64) -> Self {
        let precision = if predicted > 0.0 { hits / predicted } else { 0.0 };
        let recall = if actual > 0.0 { hits / actual } else { 0.0 };
        Self::from_pr(precision, recall)
    }

    fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: SampleClass,
    pub support: usize,
    pub scores: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    /// Gold-support weighted averages.
    pub weighted: Prf,
    pub accuracy: f64,
    pub unparseable: usize,
}

impl ClassificationReport {
    pub fn class(&self, class: SampleClass) -> &ClassMetrics {
        self.per_class.iter().find(|c| c.class == class).expect("all classes present")
    }
}

/// One-vs-rest precision / recall / F1 per class. Unparseable predictions are
/// wrong for their gold class and count as a prediction of no class.
pub fn classification_report(gold: &[AnswerLabel], predicted: &[ParsedLabel]) -> Result<ClassificationReport, MetricError> {
    if gold.len() != predicted.len() {
        return Err(MetricError::LengthMismatch(gold.len(), predicted.len()));
    }
    if gold.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut per_class = Vec::new();
    for class in SampleClass::ALL {
        let target = class.answer();
        let support = gold.iter().filter(|&&g| g == target).count();
        let predicted_n = predicted.iter().filter(|p| p.answer() == Some(target)).count();
        let hits = gold.iter().zip(predicted).filter(|(g, p)| **g == target && p.answer() == Some(target)).count();
        per_class.push(ClassMetrics {
            class,
            support,
            scores: Prf::from_counts(hits as f64, predicted_n as f64, support as f64),
        });
    }
    let total = gold.len() as f64;
    let weigh = |f: fn(&Prf) -> f64| per_class.iter().map(|c| c.support as f64 * f(&c.scores)).sum::<f64>() / total;
    let weighted = Prf { precision: weigh(|p| p.precision), recall: weigh(|p| p.recall), f1: weigh(|p| p.f1) };
    let correct = gold.iter().zip(predicted).filter(|(g, p)| p.answer() == Some(**g)).count();
    Ok(ClassificationReport {
        per_class,
        weighted,
        accuracy: correct as f64 / total,
        unparseable: predicted.iter().filter(|p| **p == ParsedLabel::Unparseable).count(),
    })
}

// ---------------------------------------------------------------------------
// BLEU

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScores {
    /// Clipped n-gram precisions p_1..p_n in [0, 1].
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    /// Brevity penalty times the geometric mean of the precisions.
    pub composite: f64,
}

impl BleuScores {
    fn zero(max_n: usize) -> Self {
        Self { precisions: vec![0.0; max_n], brevity_penalty: 0.0, composite: 0.0 }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Per-order clipped match and candidate totals plus lengths, summable over a corpus.
#[derive(Debug, Clone, Default, PartialEq)]
struct BleuStats {
    matches: Vec<usize>,
    totals: Vec<usize>,
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn add(&mut self, other: &BleuStats) {
        if self.matches.is_empty() {
            self.matches = vec![0; other.matches.len()];
            self.totals = vec![0; other.totals.len()];
        }
        for i in 0..other.matches.len() {
            self.matches[i] += other.matches[i];
            self.totals[i] += other.totals[i];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    fn scores(&self, max_n: usize) -> BleuScores {
        if self.cand_len == 0 {
            return BleuScores::zero(max_n);
        }
        let precisions: Vec<f64> = (0..max_n)
            .map(|i| if self.totals[i] == 0 { 0.0 } else { self.matches[i] as f64 / self.totals[i] as f64 })
            .collect();
        let brevity_penalty = if self.cand_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        let composite = if precisions.contains(&0.0) {
            0.0
        } else {
            brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64).exp()
        };
        BleuScores { precisions, brevity_penalty, composite }
    }
}

fn bleu_stats(candidate: &[String], references: &[Vec<String>], max_n: usize) -> BleuStats {
    let mut stats = BleuStats { matches: vec![0; max_n], totals: vec![0; max_n], cand_len: candidate.len(), ref_len: 0 };
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        stats.totals[n - 1] = candidate.len().saturating_sub(n - 1);
        stats.matches[n - 1] = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    }
    // Closest reference length, shorter on ties.
    stats.ref_len = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(candidate.len()), l))
        .unwrap_or(0);
    stats
}

pub fn bleu(candidate: &str, references: &[&str], max_n: usize) -> BleuScores {
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    if cand.is_empty() || max_n == 0 {
        return BleuScores::zero(max_n);
    }
    bleu_stats(&cand, &refs, max_n).scores(max_n)
}

/// Corpus BLEU: counts and lengths summed over all pairs before dividing.
pub fn corpus_bleu(pairs: &[(&str, &str)], max_n: usize) -> BleuScores {
    let total = pairs
        .par_iter()
        .map(|(c, r)| bleu_stats(&tokenize(c), &[tokenize(r)], max_n))
        .collect::<Vec<_>>()
        .iter()
        .fold(BleuStats::default(), |mut acc, s| {
            acc.add(s);
            acc
        });
    if total.matches.is_empty() {
        return BleuScores::zero(max_n);
    }
    total.scores(max_n)
}

// ---------------------------------------------------------------------------
// ROUGE

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
    pub rouge_lsum: Prf,
}

fn rouge_n(cand: &[String], reference: &[String], n: usize) -> Prf {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    Prf::from_counts(overlap as f64, c.values().sum::<usize>() as f64, r.values().sum::<usize>() as f64)
}

fn lcs_table(a: &[String], b: &[String]) -> Vec<Vec<u32>> {
    let mut t = vec![vec![0u32; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
        }
    }
    t
}

/// Indices into `a` of one longest common subsequence with `b`.
fn lcs_indices(a: &[String], b: &[String]) -> Vec<usize> {
    let t = lcs_table(a, b);
    let (mut i, mut j) = (a.len(), b.len());
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if a[i - 1] == b[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[i - 1][j] >= t[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out.reverse();
    out
}

fn rouge_l(cand: &[String], reference: &[String]) -> Prf {
    let lcs = lcs_table(cand, reference)[cand.len()][reference.len()] as f64;
    Prf::from_counts(lcs, cand.len() as f64, reference.len() as f64)
}

/// Summary-level LCS over newline-separated sentences (union LCS per reference sentence).
fn rouge_lsum(candidate: &str, reference: &str) -> Prf {
    let split = |t: &str| -> Vec<Vec<String>> {
        t.lines().map(tokenize).filter(|s| !s.is_empty()).collect()
    };
    let cands = split(candidate);
    let refs = split(reference);
    let cand_len: usize = cands.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if cand_len == 0 || ref_len == 0 {
        return Prf::default();
    }
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for t in cands.iter().flatten() {
        *cand_counts.entry(t).or_insert(0) += 1;
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in refs.iter().flatten() {
        *ref_counts.entry(t).or_insert(0) += 1;
    }
    let mut hits = 0usize;
    for r in &refs {
        let mut union: Vec<usize> = cands.iter().flat_map(|c| lcs_indices(r, c)).collect();
        union.sort_unstable();
        union.dedup();
        for i in union {
            let tok = r[i].as_str();
            let (rc, cc) = (ref_counts.get(tok).copied().unwrap_or(0), cand_counts.get(tok).copied().unwrap_or(0));
            if rc > 0 && cc > 0 {
                hits += 1;
                ref_counts.insert(tok, rc - 1);
                cand_counts.insert(tok, cc - 1);
            }
        }
    }
    Prf::from_counts(hits as f64, cand_len as f64, ref_len as f64)
}

pub fn rouge(candidate: &str, reference: &str) -> RougeScores {
    let cand = tokenize(candidate);
    let reference_tokens = tokenize(reference);
    if reference_tokens.is_empty() || cand.is_empty() {
        return RougeScores::default();
    }
    RougeScores {
        rouge1: rouge_n(&cand, &reference_tokens, 1),
        rouge2: rouge_n(&cand, &reference_tokens, 2),
        rouge_l: rouge_l(&cand, &reference_tokens),
        rouge_lsum: rouge_lsum(candidate, reference),
    }
}

/// Mean of per-pair scores.
pub fn corpus_rouge(pairs: &[(&str, &str)]) -> RougeScores {
    if pairs.is_empty() {
        return RougeScores::default();
    }
    let all: Vec<RougeScores> = pairs.par_iter().map(|(c, r)| rouge(c, r)).collect();
    let n = all.len() as f64;
    let mean = |f: fn(&RougeScores) -> Prf| {
        let s = all.iter().map(f).fold((0.0, 0.0, 0.0), |a, p| (a.0 + p.precision, a.1 + p.recall, a.2 + p.f1));
        Prf { precision: s.0 / n, recall: s.1 / n, f1: s.2 / n }
    };
    RougeScores {
        rouge1: mean(|r| r.rouge1),
        rouge2: mean(|r| r.rouge2),
        rouge_l: mean(|r| r.rouge_l),
        rouge_lsum: mean(|r| r.rouge_lsum),
    }
}

// ---------------------------------------------------------------------------
// Agreement

/// κ = (p_o − p_e) / (1 − p_e); when p_e = 1 the value is 1 for perfect agreement, else 0.
pub fn cohen_kappa<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = a.len() as f64;
    let p_o = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut ma: HashMap<&T, f64> = HashMap::new();
    let mut mb: HashMap<&T, f64> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *ma.entry(x).or_insert(0.0) += 1.0;
        *mb.entry(y).or_insert(0.0) += 1.0;
    }
    let p_e: f64 = ma.iter().map(|(k, &ca)| ca * mb.get(k).copied().unwrap_or(0.0)).sum::<f64>() / (n * n);
    if (1.0 - p_e).abs() < 1e-12 {
        return Ok(if p_o == 1.0 { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

// ---------------------------------------------------------------------------
// Record-level evaluation

/// Model output for one instance: raw text, or a label with an explanation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

impl PredictionRecord {
    pub fn parsed(&self) -> ParsedAnswer {
        match (&self.output, &self.answer_label) {
            (Some(out), _) => parse_answer_label(out),
            (None, Some(label)) => ParsedAnswer {
                label: parse_answer_label(label).label,
                explanation: self.explanation.clone().unwrap_or_default(),
            },
            (None, None) => ParsedAnswer {
                label: ParsedLabel::Unparseable,
                explanation: self.explanation.clone().unwrap_or_default(),
            },
        }
    }
}

/// The gold fields needed for scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub id: String,
    pub answer_label: AnswerLabel,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub items: usize,
    pub missing_predictions: usize,
    pub unmatched_predictions: usize,
    pub classification: ClassificationReport,
    pub bleu: BleuScores,
    pub rouge: RougeScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
}

/// Joins predictions to gold by id; a missing prediction is unparseable with empty text.
pub fn evaluate_records(gold: &[GoldRecord], predictions: &[PredictionRecord]) -> Result<MetricReport, MetricError> {
    if gold.is_empty() {
        return Err(MetricError::Empty);
    }
    let by_id: BTreeMap<&str, &PredictionRecord> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let parsed: Vec<ParsedAnswer> = gold
        .par_iter()
        .map(|g| match by_id.get(g.id.as_str()) {
            Some(p) => p.parsed(),
            None => ParsedAnswer { label: ParsedLabel::Unparseable, explanation: String::new() },
        })
        .collect();
    let missing = gold.iter().filter(|g| !by_id.contains_key(g.id.as_str())).count();
    let gold_ids: std::collections::HashSet<&str> = gold.iter().map(|g| g.id.as_str()).collect();
    let unmatched = by_id.keys().filter(|id| !gold_ids.contains(*id)).count();

    let labels: Vec<AnswerLabel> = gold.iter().map(|g| g.answer_label).collect();
    let predicted: Vec<ParsedLabel> = parsed.iter().map(|p| p.label).collect();
    let classification = classification_report(&labels, &predicted)?;
    let pairs: Vec<(&str, &str)> = parsed.iter().zip(gold).map(|(p, g)| (p.explanation.as_str(), g.explanation.as_str())).collect();
    Ok(MetricReport {
        items: gold.len(),
        missing_predictions: missing,
        unmatched_predictions: unmatched,
        classification,
        bleu: corpus_bleu(&pairs, 4),
        rouge: corpus_rouge(&pairs),
        kappa: None,
    })
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: f64| format!("{:.1}", v * 100.0);
        writeln!(f, "items: {} (missing predictions: {}, unparseable: {})", self.items, self.missing_predictions, self.classification.unparseable)?;
        writeln!(f)?;
        writeln!(f, "{:<10} {:>6} {:>6} {:>6} {:>8}", "class", "P", "R", "F1", "support")?;
        for c in &self.classification.per_class {
            writeln!(f, "{:<10} {:>6} {:>6} {:>6} {:>8}", c.class.as_str(), pct(c.scores.precision), pct(c.scores.recall), pct(c.scores.f1), c.support)?;
        }
        let w = &self.classification.weighted;
        writeln!(f, "{:<10} {:>6} {:>6} {:>6} {:>8}", "overall", pct(w.precision), pct(w.recall), pct(w.f1), self.items)?;
        writeln!(f)?;
        writeln!(f, "{:>7} {:>7} {:>7} {:>7} {:>7}", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "avg")?;
        let p = &self.bleu.precisions;
        writeln!(
            f,
            "{:>7} {:>7} {:>7} {:>7} {:>7}",
            pct(p.first().copied().unwrap_or(0.0)),
            pct(p.get(1).copied().unwrap_or(0.0)),
            pct(p.get(2).copied().unwrap_or(0.0)),
            pct(p.get(3).copied().unwrap_or(0.0)),
            pct(self.bleu.composite)
        )?;
        writeln!(f)?;
        writeln!(f, "{:>7} {:>7} {:>7} {:>10}", "rouge1", "rouge2", "rougeL", "rougeLsum")?;
        let r = &self.rouge;
        writeln!(f, "{:>7} {:>7} {:>7} {:>10}", pct(r.rouge1.f1), pct(r.rouge2.f1), pct(r.rouge_l.f1), pct(r.rouge_lsum.f1))?;
        if let Some(k) = self.kappa {
            writeln!(f)?;
            writeln!(f, "cohen kappa: {k:.3}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    use AnswerLabel::{No as N, Unsure as U, Yes as Y};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn answer_labels() {
        let p = parse_answer_label("Yes. Based on the information provided, it is plausible.");
        assert_eq!(p.label, ParsedLabel::Yes);
        assert_eq!(p.explanation, "Based on the information provided, it is plausible.");
        assert_eq!(parse_answer_label("I am unsure whether this will occur.").label, ParsedLabel::Unsure);
        assert_eq!(parse_answer_label("The event seems plausible.").label, ParsedLabel::Unparseable);
        assert_eq!(parse_answer_label("No, it will not happen").label, ParsedLabel::No);
        assert_eq!(parse_answer_label("Nothing here. Yes later.").label, ParsedLabel::Unparseable);
        assert_eq!(parse_answer_label("").label, ParsedLabel::Unparseable);
    }

    #[test]
    fn hand_computed_confusion_matrix() {
        let gold = [Y, Y, N, N, U, U];
        let pred = [Y, N, N, N, U, Y].map(ParsedLabel::from);
        let r = classification_report(&gold, &pred).unwrap();
        let yes = r.class(SampleClass::Positive).scores;
        let no = r.class(SampleClass::Negative).scores;
        let unsure = r.class(SampleClass::Neutral).scores;
        assert!(close(yes.precision, 0.5) && close(yes.recall, 0.5) && close(yes.f1, 0.5));
        assert!(close(no.precision, 2.0 / 3.0) && close(no.recall, 1.0) && close(no.f1, 0.8));
        assert!(close(unsure.precision, 1.0) && close(unsure.recall, 0.5) && close(unsure.f1, 2.0 / 3.0));
        let mean_f1 = (0.5 + 0.8 + 2.0 / 3.0) / 3.0;
        assert!(close(r.weighted.f1, mean_f1));
    }

    #[test]
    fn perfect_and_invalid_reports() {
        let gold = [Y, N, U, Y];
        let r = classification_report(&gold, &gold.map(ParsedLabel::from)).unwrap();
        assert!(close(r.weighted.f1, 1.0) && close(r.weighted.precision, 1.0) && close(r.accuracy, 1.0));
        assert_eq!(classification_report(&[], &[]), Err(MetricError::Empty));
        assert_eq!(classification_report(&[Y], &[]), Err(MetricError::LengthMismatch(1, 0)));
    }

    #[test]
    fn unparseable_counts_against_gold_class() {
        let r = classification_report(&[Y, N], &[ParsedLabel::Unparseable, ParsedLabel::No]).unwrap();
        assert_eq!(r.class(SampleClass::Positive).scores.recall, 0.0);
        assert_eq!(r.class(SampleClass::Negative).scores.precision, 1.0);
        assert_eq!(r.unparseable, 1);
    }

    #[test]
    fn bleu_fixtures() {
        let s = bleu("the cat sat on the mat", &["the cat sat on the mat"], 4);
        assert!(s.precisions.iter().all(|&p| close(p, 1.0)) && close(s.composite, 1.0));
        let s = bleu("the the the", &["the cat"], 4);
        assert!((s.precisions[0] * 100.0 - 33.3).abs() < 0.1);
        assert!(close(s.brevity_penalty, 1.0));
        assert_eq!(bleu("", &["the cat"], 4).composite, 0.0);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let s = bleu("the cat", &["the cat sat on"], 2);
        assert!(close(s.brevity_penalty, (1.0f64 - 2.0).exp()));
    }

    #[test]
    fn rouge_fixtures() {
        let r = rouge("the cat", "the cat sat");
        assert!(close(r.rouge1.precision, 1.0) && close(r.rouge1.recall, 2.0 / 3.0) && close(r.rouge1.f1, 0.8));
        let same = rouge("a b c. d e", "a b c. d e");
        for p in [same.rouge1, same.rouge2, same.rouge_l, same.rouge_lsum] {
            assert!(close(p.f1, 1.0));
        }
        let none = rouge("x y z", "a b c");
        assert_eq!([none.rouge1.f1, none.rouge2.f1, none.rouge_l.f1, none.rouge_lsum.f1], [0.0; 4]);
        assert_eq!(rouge("x", "").rouge1.f1, 0.0);
    }

    #[test]
    fn rouge_l_uses_subsequence() {
        // LCS("a b c d", "a c d b") = 3.
        let r = rouge("a b c d", "a c d b");
        assert!(close(r.rouge_l.f1, 0.75));
    }

    #[test]
    fn rouge_lsum_unions_sentence_lcs() {
        // Reference sentence "a b c d" against candidate lines "a b" and "c d".
        let r = rouge("a b\nc d", "a b c d");
        assert!(close(r.rouge_lsum.f1, 1.0));
        assert!(r.rouge_l.f1 > 0.99);
        let r = rouge("a b\nx y", "a b c d\nx y");
        assert!(close(r.rouge_lsum.recall, 4.0 / 6.0) && close(r.rouge_lsum.precision, 1.0));
    }

    #[test]
    fn kappa_fixtures() {
        // [[20, 5], [10, 15]]
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (x, y, n) in [(0, 0, 20), (0, 1, 5), (1, 0, 10), (1, 1, 15)] {
            a.extend(std::iter::repeat_n(x, n));
            b.extend(std::iter::repeat_n(y, n));
        }
        assert!(close(cohen_kappa(&a, &b).unwrap(), 0.4));
        assert!(close(cohen_kappa(&b, &a).unwrap(), 0.4));
        assert!(close(cohen_kappa(&a, &a).unwrap(), 1.0));
        assert_eq!(cohen_kappa(&[1, 1], &[1, 1]).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&[1], &[1, 2]), Err(MetricError::LengthMismatch(1, 2)));
    }

    #[test]
    fn kappa_constant_vs_uniform_is_zero() {
        let a = vec!["yes"; 50];
        let b: Vec<&str> = (0..50).map(|i| if i % 2 == 0 { "yes" } else { "no" }).collect();
        // p_o = 0.5, p_e = 0.5 * 1.0 = 0.5.
        assert!(close(cohen_kappa(&a, &b).unwrap(), 0.0));
    }

    #[test]
    fn deletion_never_beats_identity() {
        let reference = "on november 4 barack obama expressed intent to meet china and on november 6 iran signed a formal agreement with barack obama so china will likely host a visit";
        let tokens: Vec<&str> = reference.split(' ').collect();
        let full_b = bleu(reference, &[reference], 4).composite;
        let full_r = rouge(reference, reference);
        let mut rng = crate::seeding::rng(5, 0);
        let (mut one, mut five) = (0.0, 0.0);
        for _ in 0..100 {
            let mut cand = tokens.clone();
            cand.remove(rng.random_range(0..cand.len()));
            let c1 = cand.join(" ");
            for _ in 0..4 {
                cand.remove(rng.random_range(0..cand.len()));
            }
            let c5 = cand.join(" ");
            for c in [&c1, &c5] {
                assert!(bleu(c, &[reference], 4).composite <= full_b);
                let r = rouge(c, reference);
                assert!(r.rouge1.f1 <= full_r.rouge1.f1 && r.rouge2.f1 <= full_r.rouge2.f1 && r.rouge_l.f1 <= full_r.rouge_l.f1);
            }
            one += rouge(&c1, reference).rouge_l.f1 + bleu(&c1, &[reference], 4).composite;
            five += rouge(&c5, reference).rouge_l.f1 + bleu(&c5, &[reference], 4).composite;
        }
        assert!(five < one);
    }

    #[test]
    fn record_evaluation_joins_by_id() {
        let gold: Vec<GoldRecord> = [("a", Y), ("b", N), ("c", U)]
            .iter()
            .map(|(id, l)| GoldRecord { id: id.to_string(), answer_label: *l, explanation: "the cat sat".into() })
            .collect();
        let preds = vec![
            PredictionRecord { id: "b".into(), output: Some("No. the cat sat".into()), answer_label: None, explanation: None },
            PredictionRecord { id: "a".into(), output: None, answer_label: Some("yes".into()), explanation: Some("the cat".into()) },
            PredictionRecord { id: "z".into(), output: Some("Yes.".into()), answer_label: None, explanation: None },
        ];
        let r = evaluate_records(&gold, &preds).unwrap();
        assert_eq!((r.missing_predictions, r.unmatched_predictions), (1, 1));
        assert!(close(r.classification.accuracy, 2.0 / 3.0));
        assert!(r.to_string().contains("overall"));
    }

    proptest! {
        #[test]
        fn weighted_f1_is_support_weighted_mean(labels in proptest::collection::vec((0u8..3, 0u8..4), 1..60)) {
            let to_answer = |x: u8| [Y, N, U][x as usize];
            let gold: Vec<AnswerLabel> = labels.iter().map(|(g, _)| to_answer(*g)).collect();
            let pred: Vec<ParsedLabel> = labels
                .iter()
                .map(|(_, p)| if *p == 3 { ParsedLabel::Unparseable } else { to_answer(*p).into() })
                .collect();
            let r = classification_report(&gold, &pred).unwrap();
            let expect: f64 = r.per_class.iter().map(|c| c.support as f64 * c.scores.f1).sum::<f64>() / gold.len() as f64;
            prop_assert!((r.weighted.f1 - expect).abs() < 1e-9);
            for c in &r.per_class {
                prop_assert!((0.0..=1.0).contains(&c.scores.f1));
            }
        }

        #[test]
        fn kappa_symmetric_and_self_one(a in proptest::collection::vec(0u8..3, 2..40), seed in 0u64..1000) {
            let mut b = a.clone();
            b.shuffle(&mut crate::seeding::rng(seed, 1));
            let k1 = cohen_kappa(&a, &b).unwrap();
            let k2 = cohen_kappa(&b, &a).unwrap();
            prop_assert!((k1 - k2).abs() < 1e-12);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&k1));
            if a.iter().any(|x| *x != a[0]) {
                prop_assert!((cohen_kappa(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn parse_answer_is_total(text in ".{0,80}") {
            let p = parse_answer_label(&text);
            prop_assert!(matches!(p.label, ParsedLabel::Yes | ParsedLabel::No | ParsedLabel::Unsure | ParsedLabel::Unparseable));
        }
    }
}
