//! Prompt and template-explanation rendering.
//!
//! Every text is produced from a plain-text template with `{name}`
//! placeholders. The built-in templates live in `templates/` and are compiled
//! in; a directory with files of the same names can override any of them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::paths::{NamedQuery, ReasoningPath};
use crate::seeding::stable_hash;
use crate::tkg::{Quadruple, TemporalKG};

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").expect("valid regex"));

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("missing slot {{{0}}}")]
    MissingSlot(String),
    #[error("template explanation needs at least one reasoning path")]
    NoPaths,
    #[error("no question templates loaded")]
    NoQuestions,
    #[error("template file {path}: {reason}")]
    Template { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    ContextDoc,
    EvalCorrectness,
    Polish,
    Revision,
    Neutral,
    EvalNegative,
}

impl PromptKind {
    pub const ALL: [PromptKind; 6] = [
        PromptKind::ContextDoc,
        PromptKind::EvalCorrectness,
        PromptKind::Polish,
        PromptKind::Revision,
        PromptKind::Neutral,
        PromptKind::EvalNegative,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptKind::ContextDoc => "context_doc.txt",
            PromptKind::EvalCorrectness => "eval_correctness.txt",
            PromptKind::Polish => "polish.txt",
            PromptKind::Revision => "revision.txt",
            PromptKind::Neutral => "neutral.txt",
            PromptKind::EvalNegative => "eval_negative.txt",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_owned));
        f.write_str(name.as_deref().unwrap_or("?"))
    }
}

pub type Slots = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPayload {
    pub kind: PromptKind,
    pub text: String,
    pub slots: Slots,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionOrigin {
    Canonical,
    Paraphrase,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionTemplate {
    pub origin: QuestionOrigin,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    /// Carries the opposite relation that replaced the original one.
    Negative { opposite: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateExplanation {
    pub text: String,
    pub query: NamedQuery,
    pub reasons: Vec<String>,
}

/// Substitutes `{name}` placeholders; every placeholder must have a slot.
pub fn fill(template: &str, slots: &Slots) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut last = 0;
    for caps in PLACEHOLDER.captures_iter(template) {
        let whole = caps.get(0).expect("match");
        let name = &caps[1];
        let value = slots.get(name).ok_or_else(|| PromptError::MissingSlot(name.to_owned()))?;
        out.push_str(&template[last..whole.start()]);
        out.push_str(value);
        last = whole.end();
    }
    out.push_str(&template[last..]);
    Ok(out)
}

/// Names of placeholders that survive in `text`.
pub fn unfilled_placeholders(text: &str) -> Vec<String> {
    PLACEHOLDER.captures_iter(text).map(|c| c[1].to_owned()).collect()
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    prompts: BTreeMap<PromptKind, String>,
    explanation_positive: String,
    explanation_negative: String,
    reason: String,
    questions: Vec<QuestionTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let prompts = BTreeMap::from([
            (PromptKind::ContextDoc, include_str!("../templates/context_doc.txt").to_owned()),
            (PromptKind::EvalCorrectness, include_str!("../templates/eval_correctness.txt").to_owned()),
            (PromptKind::Polish, include_str!("../templates/polish.txt").to_owned()),
            (PromptKind::Revision, include_str!("../templates/revision.txt").to_owned()),
            (PromptKind::Neutral, include_str!("../templates/neutral.txt").to_owned()),
            (PromptKind::EvalNegative, include_str!("../templates/eval_negative.txt").to_owned()),
        ]);
        Self {
            prompts,
            explanation_positive: include_str!("../templates/explanation_positive.txt").to_owned(),
            explanation_negative: include_str!("../templates/explanation_negative.txt").to_owned(),
            reason: include_str!("../templates/reason.txt").to_owned(),
            questions: parse_questions(include_str!("../templates/questions.tsv"))
                .expect("built-in question templates parse"),
        }
    }

    /// Built-in set with any same-named files in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        let read = |name: &str| -> Result<Option<String>, PromptError> {
            let path = dir.join(name);
            match std::fs::read_to_string(&path) {
                Ok(text) => Ok(Some(text)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(PromptError::Template { path: path.display().to_string(), reason: e.to_string() }),
            }
        };
        for kind in PromptKind::ALL {
            if let Some(text) = read(kind.file_name())? {
                set.prompts.insert(kind, text);
            }
        }
        if let Some(text) = read("explanation_positive.txt")? {
            set.explanation_positive = text;
        }
        if let Some(text) = read("explanation_negative.txt")? {
            set.explanation_negative = text;
        }
        if let Some(text) = read("reason.txt")? {
            set.reason = text;
        }
        if let Some(text) = read("questions.tsv")? {
            set.questions = parse_questions(&text).map_err(|reason| PromptError::Template {
                path: dir.join("questions.tsv").display().to_string(),
                reason,
            })?;
        }
        Ok(set)
    }

    pub fn questions(&self) -> &[QuestionTemplate] {
        &self.questions
    }

    pub fn render_prompt(&self, kind: PromptKind, slots: Slots) -> Result<PromptPayload, PromptError> {
        let text = fill(&self.prompts[&kind], &slots)?;
        Ok(PromptPayload { kind, text, slots })
    }

    /// One reasoning step in original orientation: `Iran sign formal agreement Barack Obama on 11-06-2014`.
    pub fn render_reason(&self, graph: &TemporalKG, hop: &Quadruple) -> String {
        let (s, r, o, t) = graph.display_quadruple(hop);
        let slots = Slots::from([
            ("subject".into(), s.to_owned()),
            ("relation".into(), r.to_owned()),
            ("object".into(), o.to_owned()),
            ("date".into(), t.us_format()),
        ]);
        fill(&self.reason, &slots).unwrap_or_else(|_| format!("{s} {r} {o} on {}", t.us_format()))
    }

    /// Deterministic explanation text enumerating every hop of every path.
    pub fn render_template_explanation(
        &self,
        graph: &TemporalKG,
        query: &NamedQuery,
        paths: &[ReasoningPath],
        polarity: &Polarity,
    ) -> Result<TemplateExplanation, PromptError> {
        let reasons: Vec<String> = paths
            .iter()
            .flat_map(|p| p.hops.iter())
            .map(|hop| self.render_reason(graph, hop))
            .collect();
        if reasons.is_empty() {
            return Err(PromptError::NoPaths);
        }
        let numbered: Vec<String> = reasons.iter().enumerate().map(|(i, r)| format!("{}: {r}", i + 1)).collect();
        let mut slots = query_slots(query, true);
        slots.insert("reasons".into(), numbered.join(", and "));
        let template = match polarity {
            Polarity::Positive => &self.explanation_positive,
            Polarity::Negative { opposite } => {
                slots.insert("opposite".into(), opposite.clone());
                &self.explanation_negative
            }
        };
        Ok(TemplateExplanation { text: fill(template, &slots)?, query: query.clone(), reasons })
    }

    /// Question text; the template is picked by a stable hash of the query.
    pub fn render_question(&self, query: &NamedQuery) -> Result<String, PromptError> {
        if self.questions.is_empty() {
            return Err(PromptError::NoQuestions);
        }
        let index = question_index(query, self.questions.len());
        fill(&self.questions[index].text, &query_slots(query, false))
    }
}

pub fn question_index(query: &NamedQuery, n: usize) -> usize {
    let key = format!("{}\t{}\t{}\t{}", query.subject, query.relation, query.object, query.time);
    (stable_hash(&key) % n as u64) as usize
}

/// `subject`, `relation`, `object` and `date` slots; `us_date` selects `MM-DD-YYYY`.
pub fn query_slots(query: &NamedQuery, us_date: bool) -> Slots {
    let date = if us_date { query.time.us_format() } else { query.time.to_string() };
    Slots::from([
        ("subject".into(), query.subject.clone()),
        ("relation".into(), query.relation.clone()),
        ("object".into(), query.object.clone()),
        ("date".into(), date),
    ])
}

/// One `(subject, relation, object, MM-DD-YYYY)` line per quadruple.
pub fn quadruple_listing<'a>(graph: &TemporalKG, quads: impl IntoIterator<Item = &'a Quadruple>) -> String {
    quads
        .into_iter()
        .map(|q| {
            let (s, r, o, t) = graph.display_quadruple(q);
            format!("({s}, {r}, {o}, {})", t.us_format())
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn parse_questions(text: &str) -> Result<Vec<QuestionTemplate>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (kind, template) = line.split_once('\t').ok_or(format!("line {}: missing tab", i + 1))?;
        let origin = match kind {
            "canonical" => QuestionOrigin::Canonical,
            "paraphrase" => QuestionOrigin::Paraphrase,
            other => return Err(format!("line {}: unknown kind {other:?}", i + 1)),
        };
        out.push(QuestionTemplate { origin, text: template.to_owned() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tkg::{GraphBuilder, Timestamp};

    fn ts(s: &str) -> Timestamp {
        s.parse().unwrap()
    }

    #[test]
    fn fill_reports_missing_slot_by_name() {
        let err = fill("a {x} b {y}", &Slots::from([("x".into(), "1".into())])).unwrap_err();
        assert!(matches!(err, PromptError::MissingSlot(ref n) if n == "y"), "{err}");
        assert_eq!(fill("{x}{x}", &Slots::from([("x".into(), "ab".into())])).unwrap(), "abab");
    }

    #[test]
    fn every_prompt_kind_lists_its_placeholders() {
        let set = TemplateSet::builtin();
        let needed = |k| unfilled_placeholders(&set.prompts[&k]);
        assert_eq!(needed(PromptKind::ContextDoc), ["quadruples"]);
        assert_eq!(needed(PromptKind::EvalCorrectness), ["explanation"]);
        assert!(needed(PromptKind::Polish).is_empty());
        assert_eq!(needed(PromptKind::Revision), ["quadruples"]);
        assert_eq!(needed(PromptKind::Neutral), ["document", "subject", "relation", "object", "date"]);
        assert_eq!(needed(PromptKind::EvalNegative), ["explanation"]);
    }

    #[test]
    fn eval_without_explanation_is_an_error() {
        let err = TemplateSet::builtin().render_prompt(PromptKind::EvalCorrectness, Slots::new()).unwrap_err();
        assert!(matches!(err, PromptError::MissingSlot(ref n) if n == "explanation"));
    }

    #[test]
    fn context_doc_lists_one_quadruple_per_line() {
        let mut b = GraphBuilder::new();
        b.add("Iran", "sign formal agreement", "Barack Obama", ts("2014-11-06"));
        b.add("China", "consult", "France", ts("2014-11-07"));
        b.add("Barack Obama", "express intent to meet", "China", ts("2014-11-04"));
        let g = b.build();
        let listing = quadruple_listing(&g, g.quadruples());
        let p = TemplateSet::builtin()
            .render_prompt(PromptKind::ContextDoc, Slots::from([("quadruples".into(), listing)]))
            .unwrap();
        assert!(p.text.starts_with(
            "Please generate a coherent paragraph to describe the following quadruples and the time should be precise to dates:"
        ));
        let lines: Vec<&str> = p.text.lines().skip(1).collect();
        assert_eq!(lines, [
            "(Barack Obama, express intent to meet, China, 11-04-2014)",
            "(Iran, sign formal agreement, Barack Obama, 11-06-2014)",
            "(China, consult, France, 11-07-2014)",
        ]);
    }

    #[test]
    fn neutral_prompt_asks_for_uncertainty() {
        let q = NamedQuery::new("Nepal", "host a visit", "Peru", ts("2014-11-10"));
        let mut slots = query_slots(&q, false);
        slots.insert("document".into(), "Some document.".into());
        let p = TemplateSet::builtin().render_prompt(PromptKind::Neutral, slots).unwrap();
        assert!(p.text.contains("your answer should be uncertain"));
        assert!(p.text.starts_with("Given the document \"Some document.\", how likely the event that Nepal host a visit Peru in 2014-11-10 would happen?"));
    }

    #[test]
    fn question_for_worked_example() {
        let q = NamedQuery::new("China", "host a visit", "Barack Obama", ts("2014-11-09"));
        let set = TemplateSet::builtin();
        assert_eq!(
            set.render_question(&q).unwrap(),
            "Given the following document, can we expect that China will host a visit Barack Obama on 2014-11-09? \
             Can you please answer with a yes, no, or unsure first, and then explain your decision?"
        );
        assert_eq!(set.render_question(&q).unwrap(), set.render_question(&q).unwrap());
    }

    #[test]
    fn all_questions_end_with_instruction_clause() {
        let set = TemplateSet::builtin();
        assert!(set.questions().len() >= 5);
        assert_eq!(set.questions().iter().filter(|q| q.origin == QuestionOrigin::Canonical).count(), 1);
        for q in set.questions() {
            assert!(q.text.ends_with("Can you please answer with a yes, no, or unsure first, and then explain your decision?"));
        }
    }

    #[test]
    fn every_question_variant_is_reachable() {
        let set = TemplateSet::builtin();
        let mut seen = vec![0usize; set.questions().len()];
        for i in 0..1000 {
            let q = NamedQuery::new(&format!("e{i}"), "r", &format!("f{}", i * 7), ts("2015-01-01").plus_days(i));
            let n = seen.len();
            seen[question_index(&q, n)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
    }

    #[test]
    fn explanation_requires_a_path() {
        let g = GraphBuilder::new().build();
        let q = NamedQuery::new("a", "r", "b", ts("2014-01-01"));
        let err = TemplateSet::builtin()
            .render_template_explanation(&g, &q, &[], &Polarity::Positive)
            .unwrap_err();
        assert!(matches!(err, PromptError::NoPaths));
    }

    #[test]
    fn two_paths_are_numbered_in_order() {
        let mut b = GraphBuilder::new();
        b.add("A", "consult", "B", ts("2014-01-01"));
        b.add("A", "praise", "B", ts("2014-01-02"));
        let g = b.build();
        let paths: Vec<ReasoningPath> =
            g.quadruples().iter().map(|q| ReasoningPath::new(vec![*q], None)).collect();
        let q = NamedQuery::new("A", "host a visit", "B", ts("2014-01-05"));
        let set = TemplateSet::builtin();
        let pos = set.render_template_explanation(&g, &q, &paths, &Polarity::Positive).unwrap();
        assert_eq!(
            pos.text,
            "Based on the information provided by the document, it is plausible that A will host a visit B on 01-05-2014. \
             Here are my reasons: 1: A consult B on 01-01-2014, and 2: A praise B on 01-02-2014. \
             Therefore, it is plausible that A will host a visit B on 01-05-2014"
        );
        let neg = set
            .render_template_explanation(&g, &q, &paths, &Polarity::Negative { opposite: "Cancel upcoming reception".into() })
            .unwrap();
        assert_eq!(
            neg.text,
            "Based on the information provided by the document, we predict that A Cancel upcoming reception B will not happen in 01-05-2014. \
             We could find the following patterns from the text: 1: A consult B on 01-01-2014, and 2: A praise B on 01-02-2014, \
             therefore, it is plausible that A will host a visit B in 01-05-2014."
        );
        assert!(unfilled_placeholders(&neg.text).is_empty());
    }

    #[test]
    fn overrides_replace_only_present_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("polish.txt"), "Polish {explanation} please").unwrap();
        let set = TemplateSet::with_overrides(dir.path()).unwrap();
        let p = set.render_prompt(PromptKind::Polish, Slots::from([("explanation".into(), "X".into())])).unwrap();
        assert_eq!(p.text, "Polish X please");
        assert_eq!(set.questions().len(), TemplateSet::builtin().questions().len());
    }
}
