//! Parsing of E-step completions and final-answer extraction.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::normalized_tokens;
use crate::task_model::{AnswerForm, Instance, TaskKind};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("completion text is empty")]
    EmptyCompletion,
    #[error("answer `{segment}` does not map onto any {form} label")]
    Unmappable { form: AnswerForm, segment: String },
    #[error("option-choice answer requested without an option list")]
    MissingOptions,
    #[error("malformed label table line {line}: {reason}")]
    LabelTable { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseMode {
    Labeled,
    Heuristic,
    FallbackWhole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EStepOutput {
    pub a_temp: String,
    pub evidence: String,
    pub raw: String,
    pub parse_mode: ParseMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub text: String,
    /// Class label, yes/no, or option key for label-valued tasks.
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SectionKind {
    Answer,
    Evidence,
}

struct Section<'a> {
    kind: SectionKind,
    content: &'a str,
}

fn label_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?im)^[ \t>#*_-]*(?:(final answer|answer)|(evidence and explanation|evidence & explanation|step-by-step-reasoning-with-evidence-and-explanation|evidence|explanation|reasoning))[ \t*_]*:[ \t*_]*",
        )
        .expect("label regex")
    })
}

fn sections(raw: &str) -> Vec<Section<'_>> {
    let caps: Vec<_> = label_regex().captures_iter(raw).collect();
    let mut out = Vec::with_capacity(caps.len());
    for (i, cap) in caps.iter().enumerate() {
        let whole = cap.get(0).expect("match");
        let end = caps
            .get(i + 1)
            .map(|c| c.get(0).expect("match").start())
            .unwrap_or(raw.len());
        let kind = if cap.get(1).is_some() {
            SectionKind::Answer
        } else {
            SectionKind::Evidence
        };
        out.push(Section {
            kind,
            content: raw[whole.end()..end].trim(),
        });
    }
    out
}

fn first_section<'a>(secs: &[Section<'a>], kind: SectionKind) -> Option<&'a str> {
    secs.iter().find(|s| s.kind == kind).map(|s| s.content)
}

/// Drops a leading "Answer:" label from a single line.
fn strip_answer_label(line: &str) -> &str {
    match label_regex().captures(line) {
        Some(cap) if cap.get(1).is_some() && cap.get(0).map(|m| m.start()) == Some(0) => {
            line[cap.get(0).expect("match").end()..].trim()
        }
        _ => line.trim(),
    }
}

/// Renders the labeled layout the E-step prompt asks for.
pub fn render_labeled(a_temp: &str, evidence: &str) -> String {
    format!("Answer: {a_temp}\nEvidence and explanation: {evidence}")
}

/// Splits an E-step completion into temporary answer and evidence.
/// Never fails on nonempty input.
pub fn parse_e_step(raw: &str) -> Result<EStepOutput, ExtractError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(ExtractError::EmptyCompletion);
    }
    let secs = sections(raw);
    if let (Some(answer), Some(evidence)) = (
        first_section(&secs, SectionKind::Answer),
        first_section(&secs, SectionKind::Evidence),
    ) {
        if !evidence.is_empty() {
            return Ok(EStepOutput {
                a_temp: answer.to_string(),
                evidence: evidence.to_string(),
                raw: raw.to_string(),
                parse_mode: ParseMode::Labeled,
            });
        }
    }
    if let Some((first, rest)) = trimmed.split_once('\n') {
        let rest = rest.trim();
        if !rest.is_empty() {
            return Ok(EStepOutput {
                a_temp: strip_answer_label(first).to_string(),
                evidence: rest.to_string(),
                raw: raw.to_string(),
                parse_mode: ParseMode::Heuristic,
            });
        }
    }
    Ok(EStepOutput {
        a_temp: strip_answer_label(trimmed).to_string(),
        evidence: String::new(),
        raw: raw.to_string(),
        parse_mode: ParseMode::FallbackWhole,
    })
}

/// Text the answer is read from: the first nonempty answer section, else the
/// whole completion.
pub fn answer_segment(raw: &str) -> &str {
    first_section(&sections(raw), SectionKind::Answer)
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| raw.trim())
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Phrase {
    label: String,
    words: Vec<String>,
}

/// Surface-form synonym table per answer form, loaded from a text resource.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTable {
    forms: BTreeMap<String, Vec<Phrase>>,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

impl LabelTable {
    pub fn parse(text: &str) -> Result<Self, ExtractError> {
        let mut forms: BTreeMap<String, Vec<Phrase>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(name.trim().to_string());
                continue;
            }
            let form = current.clone().ok_or_else(|| ExtractError::LabelTable {
                line: i + 1,
                reason: "entry before any [section]".into(),
            })?;
            let (label, phrases) = line.split_once(':').ok_or_else(|| ExtractError::LabelTable {
                line: i + 1,
                reason: "expected `LABEL: phrase, ...`".into(),
            })?;
            let entry = forms.entry(form).or_default();
            for phrase in phrases.split(',') {
                let w = words(phrase);
                if !w.is_empty() {
                    entry.push(Phrase {
                        label: label.trim().to_string(),
                        words: w,
                    });
                }
            }
        }
        Ok(Self { forms })
    }

    pub fn builtin() -> &'static LabelTable {
        static TABLE: OnceLock<LabelTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            LabelTable::parse(include_str!("../resources/label_synonyms.txt")).expect("builtin label table")
        })
    }

    /// Label of the earliest phrase occurrence in `text`; the longest phrase
    /// wins at a given position.
    pub fn first_label(&self, form: AnswerForm, text: &str) -> Option<String> {
        let phrases = self.forms.get(form.as_str())?;
        let toks = words(text);
        for start in 0..toks.len() {
            let best = phrases
                .iter()
                .filter(|p| toks[start..].starts_with(&p.words))
                .max_by_key(|p| p.words.len());
            if let Some(p) = best {
                return Some(p.label.clone());
            }
        }
        None
    }
}

/// First yes/no stance expressed in `text`.
pub fn yes_no_stance(text: &str) -> Option<String> {
    LabelTable::builtin().first_label(AnswerForm::YesNo, text)
}

fn option_key_regexes() -> &'static [Regex; 3] {
    static RES: OnceLock<[Regex; 3]> = OnceLock::new();
    RES.get_or_init(|| {
        [
            Regex::new(r"^\(?([A-Z])\)?(?:[.):,]|$)").expect("regex"),
            Regex::new(r"(?i)\b(?:option|choice|answer is|answer:)\s*\(?([A-Z])\)?(?:[^A-Za-z]|$)").expect("regex"),
            Regex::new(r"\(([A-Z])\)").expect("regex"),
        ]
    })
}

fn match_option(segment: &str, options: &[String]) -> Option<usize> {
    let valid = |k: &str| (0..options.len()).find(|&i| Instance::option_key(i) == k);
    for re in option_key_regexes() {
        if let Some(i) = re.captures(segment.trim()).and_then(|c| valid(c.get(1)?.as_str())) {
            return Some(i);
        }
    }
    let seg = normalized_tokens(segment);
    options
        .iter()
        .enumerate()
        .filter_map(|(i, opt)| {
            let o = normalized_tokens(opt);
            if o.is_empty() || o.len() > seg.len() {
                return None;
            }
            seg.windows(o.len()).position(|w| w == o.as_slice()).map(|pos| (pos, i))
        })
        .min()
        .map(|(_, i)| i)
}

pub fn extract_final_answer(raw: &str, task: &TaskKind, options: Option<&[String]>) -> Result<FinalAnswer, ExtractError> {
    extract_final_answer_with(raw, task, options, LabelTable::builtin())
}

pub fn extract_final_answer_with(
    raw: &str,
    task: &TaskKind,
    options: Option<&[String]>,
    table: &LabelTable,
) -> Result<FinalAnswer, ExtractError> {
    if raw.trim().is_empty() {
        return Err(ExtractError::EmptyCompletion);
    }
    let segment = answer_segment(raw);
    let unmappable = || ExtractError::Unmappable {
        form: task.answer_form,
        segment: segment.to_string(),
    };
    match task.answer_form {
        AnswerForm::ClassLabel | AnswerForm::YesNo => {
            let label = table
                .first_label(task.answer_form, segment)
                .or_else(|| table.first_label(task.answer_form, raw))
                .ok_or_else(unmappable)?;
            Ok(FinalAnswer {
                text: label.clone(),
                label: Some(label),
            })
        }
        AnswerForm::OptionChoice => {
            let options = options.ok_or(ExtractError::MissingOptions)?;
            let idx = match_option(segment, options)
                .or_else(|| match_option(raw, options))
                .ok_or_else(unmappable)?;
            Ok(FinalAnswer {
                text: options[idx].clone(),
                label: Some(Instance::option_key(idx)),
            })
        }
        AnswerForm::ShortSpan => {
            let line = segment
                .lines()
                .map(str::trim)
                .find(|l| !l.is_empty())
                .unwrap_or("");
            Ok(FinalAnswer {
                text: strip_answer_label(line).trim_matches('*').trim().to_string(),
                label: None,
            })
        }
        AnswerForm::FreeText => Ok(FinalAnswer {
            text: segment.to_string(),
            label: None,
        }),
    }
}

/// True iff the normalized `span` occurs as a contiguous token run in the
/// normalized `haystack`.
pub fn contains_span(haystack: &str, span: &str) -> bool {
    let s = normalized_tokens(span);
    if s.is_empty() {
        return true;
    }
    let h = normalized_tokens(haystack);
    h.len() >= s.len() && h.windows(s.len()).any(|w| w == s.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_model::{Benchmark, TaskName};
    use proptest::prelude::*;

    #[test]
    fn labeled_parse() {
        let out = parse_e_step("Answer: yes\nEvidence and explanation: The context states that both are cities.").unwrap();
        assert_eq!(out.a_temp, "yes");
        assert_eq!(out.evidence, "The context states that both are cities.");
        assert_eq!(out.parse_mode, ParseMode::Labeled);
    }

    #[test]
    fn labeled_parse_tolerates_markdown_and_order() {
        let raw = "**Evidence and explanation:** Doc 1 says X.\nDoc 2 says Y.\n\n**Answer:** Paris";
        let out = parse_e_step(raw).unwrap();
        assert_eq!(out.a_temp, "Paris");
        assert_eq!(out.evidence, "Doc 1 says X.\nDoc 2 says Y.");
        assert_eq!(out.parse_mode, ParseMode::Labeled);
    }

    #[test]
    fn single_line_falls_back() {
        let out = parse_e_step("Paris.").unwrap();
        assert_eq!(out.a_temp, "Paris.");
        assert_eq!(out.evidence, "");
        assert_eq!(out.parse_mode, ParseMode::FallbackWhole);
    }

    #[test]
    fn unlabeled_paragraphs_are_heuristic() {
        let out = parse_e_step("Walmart\n\nSam Walton opened the first Walmart in 1962.\nIt grew quickly.").unwrap();
        assert_eq!(out.a_temp, "Walmart");
        assert_eq!(out.evidence, "Sam Walton opened the first Walmart in 1962.\nIt grew quickly.");
        assert_eq!(out.parse_mode, ParseMode::Heuristic);
    }

    #[test]
    fn empty_completion_rejected() {
        assert_eq!(parse_e_step("  \n"), Err(ExtractError::EmptyCompletion));
    }

    #[test]
    fn fever_labels() {
        let fever = Benchmark::Fever.task_kind();
        let fa = extract_final_answer("The claim is SUPPORTED by the context.", &fever, None).unwrap();
        assert_eq!(fa.label.as_deref(), Some("SUPPORTS"));
        let fa = extract_final_answer("Answer: The claim is not supported.\nEvidence: none", &fever, None).unwrap();
        assert_eq!(fa.label.as_deref(), Some("REFUTES"));
        let err = extract_final_answer("I cannot tell.", &fever, None).unwrap_err();
        assert!(matches!(err, ExtractError::Unmappable { .. }));
    }

    #[test]
    fn option_key_answer() {
        let logiqa = Benchmark::LogiQa.task_kind();
        let opts: Vec<String> = ["red", "green", "blue", "black"].iter().map(|s| s.to_string()).collect();
        let fa = extract_final_answer("Answer: B", &logiqa, Some(&opts)).unwrap();
        assert_eq!(fa.label.as_deref(), Some("B"));
        assert_eq!(fa.text, "green");
        let fa = extract_final_answer("Answer: the correct choice is (D)", &logiqa, Some(&opts)).unwrap();
        assert_eq!(fa.label.as_deref(), Some("D"));
        let fa = extract_final_answer("Answer: it must be blue", &logiqa, Some(&opts)).unwrap();
        assert_eq!(fa.label.as_deref(), Some("C"));
        assert_eq!(
            extract_final_answer("Answer: B", &logiqa, None),
            Err(ExtractError::MissingOptions)
        );
    }

    #[test]
    fn yes_no_leading_token() {
        let yn = TaskKind::new(TaskName::MultihopQa, AnswerForm::YesNo).unwrap();
        let fa = extract_final_answer("No, they were not.", &yn, None).unwrap();
        assert_eq!(fa.label.as_deref(), Some("no"));
        let fa = extract_final_answer("Yes. There is no doubt.", &yn, None).unwrap();
        assert_eq!(fa.label.as_deref(), Some("yes"));
    }

    #[test]
    fn short_span_strips_framing() {
        let hp = Benchmark::HotpotQa.task_kind();
        let fa = extract_final_answer("Answer: Walmart\nEvidence and explanation: ...", &hp, None).unwrap();
        assert_eq!(fa.text, "Walmart");
        let fa = extract_final_answer("Walmart\nbecause ...", &hp, None).unwrap();
        assert_eq!(fa.text, "Walmart");
    }

    #[test]
    fn long_form_keeps_full_answer_section() {
        let eli5 = Benchmark::Eli5.task_kind();
        let raw = "Answer: First paragraph.\n\nSecond paragraph.\nEvidence and explanation: refs";
        let fa = extract_final_answer(raw, &eli5, None).unwrap();
        assert_eq!(fa.text, "First paragraph.\n\nSecond paragraph.");
    }

    #[test]
    fn span_containment() {
        assert!(contains_span("Sam Walton founded Walmart in 1962.", "Walmart"));
        assert!(contains_span("The Cat sat", "cat"));
        assert!(!contains_span("concatenate", "cat"));
        let s = "Any haystack, at all.";
        assert!(contains_span(s, s));
    }

    #[test]
    fn label_table_parse_errors() {
        assert!(LabelTable::parse("X: y").is_err());
        assert!(LabelTable::parse("[class-label]\nno colon here").is_err());
        let t = LabelTable::parse("[class-label]\nSUPPORTS: backs up").unwrap();
        assert_eq!(t.first_label(AnswerForm::ClassLabel, "It backs up the claim"), Some("SUPPORTS".into()));
    }

    proptest! {
        #[test]
        fn parse_is_total(raw in "\\PC{0,200}") {
            if raw.trim().is_empty() {
                prop_assert!(parse_e_step(&raw).is_err());
            } else {
                let out = parse_e_step(&raw).unwrap();
                prop_assert!(raw.contains(out.a_temp.as_str()));
                prop_assert!(raw.contains(out.evidence.as_str()));
                if out.parse_mode != ParseMode::FallbackWhole {
                    prop_assert!(!out.evidence.is_empty());
                }
            }
        }

        #[test]
        fn labeled_round_trip(a in "[a-z0-9][a-z0-9 ]{0,20}[a-z0-9]", e in "[a-z0-9][a-z0-9 .]{0,60}[a-z0-9]") {
            let out = parse_e_step(&render_labeled(&a, &e)).unwrap();
            prop_assert_eq!(out.parse_mode, ParseMode::Labeled);
            prop_assert_eq!(out.a_temp, a);
            prop_assert_eq!(out.evidence, e);
        }

        #[test]
        fn label_extraction_case_insensitive(upper in any::<bool>(), which in any::<bool>()) {
            let word = if which { "supported" } else { "refuted" };
            let text = format!("The claim is {}.", if upper { word.to_uppercase() } else { word.to_string() });
            let fever = Benchmark::Fever.task_kind();
            let a = extract_final_answer(&text, &fever, None).unwrap();
            let b = extract_final_answer(&text.to_lowercase(), &fever, None).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
