//! Evidence grounding and error taxonomy.
//!
//! Evidence is split into sentences at terminal punctuation followed by
//! whitespace. A sentence is grounded when some context window of the same
//! token length reaches the fuzzy threshold under the token-level LCS ratio
//! `2 * lcs / (|sentence| + |window|)`, computed over normalized tokens. An
//! exact contiguous match scores 1.0.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::{contains_span, yes_no_stance, FinalAnswer};
use crate::metrics::{exact_match, normalize_text, numeric_match};
use crate::task_model::{AnswerForm, Instance, TaskName};

pub const DEFAULT_FUZZ_THRESHOLD: f64 = 0.8;
pub const DEFAULT_MIN_GROUNDED_FRACTION: f64 = 0.5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GroundingError {
    #[error("instance `{0}` was answered correctly; only errors are classified")]
    NotAnError(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSpan {
    pub sentence_index: usize,
    /// Character offsets into the context, end exclusive.
    pub context_range: (usize, usize),
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub grounded_fraction: f64,
    pub sentence_count: usize,
    pub matched_spans: Vec<MatchedSpan>,
}

#[derive(Debug, Clone)]
struct Token {
    text: String,
    start: usize,
    end: usize,
}

/// Normalized word tokens with character offsets into `text`.
fn tokens_with_offsets(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    let mut word = String::new();
    let push = |word: &mut String, start: usize, end: usize, out: &mut Vec<Token>| {
        let norm = normalize_text(word);
        if !norm.is_empty() {
            out.push(Token { text: norm, start, end });
        }
        word.clear();
    };
    let mut count = 0;
    for (ci, ch) in text.chars().enumerate() {
        count = ci + 1;
        if ch.is_whitespace() {
            if let Some(s) = word_start.take() {
                push(&mut word, s, ci, &mut out);
            }
        } else {
            word_start.get_or_insert(ci);
            word.push(ch);
        }
    }
    if let Some(s) = word_start {
        push(&mut word, s, count, &mut out);
    }
    out
}

fn sentence_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[.!?]+\s+").expect("sentence regex"))
}

/// Splits at terminal punctuation followed by whitespace.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut last = 0;
    for m in sentence_regex().find_iter(text) {
        let end = m.start() + m.as_str().trim_end().len();
        out.push(text[last..end].trim());
        last = m.end();
    }
    out.push(text[last..].trim());
    out.into_iter().filter(|s| !s.is_empty()).collect()
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token-level LCS similarity in [0, 1].
pub fn lcs_ratio(a: &[&str], b: &[&str]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * lcs_len(a, b) as f64 / (a.len() + b.len()) as f64
}

/// Best (score, window start, window end) of `sentence` over context windows.
fn best_window(sentence: &[&str], context: &[&str]) -> (f64, usize, usize) {
    let n = context.len();
    let w = sentence.len().min(n);
    if w == 0 {
        return (0.0, 0, 0);
    }
    if let Some(pos) = context.windows(sentence.len()).position(|win| win == sentence) {
        return (1.0, pos, pos + sentence.len());
    }
    let mut best = (0.0, 0, w);
    for start in 0..=(n - w) {
        let win = &context[start..start + w];
        if !win.iter().any(|t| sentence.contains(t)) {
            continue;
        }
        let score = lcs_ratio(sentence, win);
        if score > best.0 {
            best = (score, start, start + w);
        }
    }
    best
}

pub fn grounding_score(evidence: &str, context: &str, fuzz_threshold: f64) -> GroundingReport {
    let ctx_tokens = tokens_with_offsets(context);
    let ctx: Vec<&str> = ctx_tokens.iter().map(|t| t.text.as_str()).collect();
    let mut sentence_count = 0;
    let mut matched_spans = Vec::new();
    for sentence in split_sentences(evidence) {
        let toks = tokens_with_offsets(sentence);
        if toks.is_empty() {
            continue;
        }
        let index = sentence_count;
        sentence_count += 1;
        let words: Vec<&str> = toks.iter().map(|t| t.text.as_str()).collect();
        let (score, start, end) = best_window(&words, &ctx);
        if score >= fuzz_threshold && end > start {
            matched_spans.push(MatchedSpan {
                sentence_index: index,
                context_range: (ctx_tokens[start].start, ctx_tokens[end - 1].end),
                score,
            });
        }
    }
    let grounded_fraction = if sentence_count == 0 {
        0.0
    } else {
        matched_spans.len() as f64 / sentence_count as f64
    };
    GroundingReport {
        grounded_fraction,
        sentence_count,
        matched_spans,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCategory {
    AnswerSpanInReasoning,
    YesNoFlip,
    UngroundedHypothesis,
    Other,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 4] = [
        ErrorCategory::AnswerSpanInReasoning,
        ErrorCategory::YesNoFlip,
        ErrorCategory::UngroundedHypothesis,
        ErrorCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::AnswerSpanInReasoning => "answer-span-in-reasoning",
            ErrorCategory::YesNoFlip => "yes-no-flip",
            ErrorCategory::UngroundedHypothesis => "ungrounded-hypothesis",
            ErrorCategory::Other => "other",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionType {
    Wh,
    YesNo,
}

/// Yes/no when the task says so or every gold answer is "yes" or "no".
pub fn question_type(instance: &Instance) -> QuestionType {
    let all_yes_no = instance
        .gold_answers
        .iter()
        .all(|g| matches!(normalize_text(g).as_str(), "yes" | "no"));
    if instance.task.answer_form == AnswerForm::YesNo || all_yes_no {
        QuestionType::YesNo
    } else {
        QuestionType::Wh
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingConfig {
    pub fuzz_threshold: f64,
    /// Reasoning with a lower grounded fraction counts as ungrounded.
    pub min_grounded_fraction: f64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            fuzz_threshold: DEFAULT_FUZZ_THRESHOLD,
            min_grounded_fraction: DEFAULT_MIN_GROUNDED_FRACTION,
        }
    }
}

/// Whether `pred` is correct for `instance` under EM or label accuracy.
pub fn is_correct(instance: &Instance, pred: &FinalAnswer, golds: &[String]) -> bool {
    if instance.task.is_label_task() {
        return pred.label.is_some() && pred.label == instance.resolved_gold_label();
    }
    if question_type(instance) == QuestionType::YesNo {
        if let (Some(p), Some(g)) = (yes_no_stance(&pred.text), golds.first()) {
            return normalize_text(g) == p;
        }
    }
    exact_match(&pred.text, golds) == 1
        || (instance.task.name == TaskName::ArithmeticMrc && numeric_match(&pred.text, golds))
}

pub fn source_context(instance: &Instance) -> String {
    instance.context_docs.join("\n")
}

/// Assigns one error category; precedence is yes-no-flip,
/// answer-span-in-reasoning, ungrounded-hypothesis, other.
pub fn classify_error(
    instance: &Instance,
    reasoning: &str,
    pred: &FinalAnswer,
    golds: &[String],
    config: &GroundingConfig,
) -> Result<ErrorCategory, GroundingError> {
    if is_correct(instance, pred, golds) {
        return Err(GroundingError::NotAnError(instance.id.clone()));
    }
    match question_type(instance) {
        QuestionType::YesNo => {
            let predicted = pred
                .label
                .clone()
                .filter(|l| l == "yes" || l == "no")
                .or_else(|| yes_no_stance(&pred.text));
            if let (Some(stance), Some(predicted)) = (yes_no_stance(reasoning), predicted) {
                if stance != predicted {
                    return Ok(ErrorCategory::YesNoFlip);
                }
            }
        }
        QuestionType::Wh => {
            if golds.iter().any(|g| contains_span(reasoning, g)) {
                return Ok(ErrorCategory::AnswerSpanInReasoning);
            }
        }
    }
    let report = grounding_score(reasoning, &source_context(instance), config.fuzz_threshold);
    if report.grounded_fraction < config.min_grounded_fraction {
        return Ok(ErrorCategory::UngroundedHypothesis);
    }
    Ok(ErrorCategory::Other)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyRow {
    pub category: ErrorCategory,
    pub wh: usize,
    pub wh_pct: f64,
    pub yes_no: usize,
    pub yes_no_pct: f64,
    pub total: usize,
    pub total_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyTable {
    pub rows: Vec<TaxonomyRow>,
    pub wh_errors: usize,
    pub yes_no_errors: usize,
    pub total_errors: usize,
}

fn pct(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64 * 100.0
    }
}

pub fn taxonomy_summary(entries: &[(QuestionType, ErrorCategory)]) -> TaxonomyTable {
    let wh_errors = entries.iter().filter(|e| e.0 == QuestionType::Wh).count();
    let yes_no_errors = entries.len() - wh_errors;
    let rows = ErrorCategory::ALL
        .iter()
        .map(|&category| {
            let wh = entries.iter().filter(|e| e.1 == category && e.0 == QuestionType::Wh).count();
            let yes_no = entries.iter().filter(|e| e.1 == category && e.0 == QuestionType::YesNo).count();
            TaxonomyRow {
                category,
                wh,
                wh_pct: pct(wh, wh_errors),
                yes_no,
                yes_no_pct: pct(yes_no, yes_no_errors),
                total: wh + yes_no,
                total_pct: pct(wh + yes_no, entries.len()),
            }
        })
        .collect();
    TaxonomyTable {
        rows,
        wh_errors,
        yes_no_errors,
        total_errors: entries.len(),
    }
}

pub fn render_taxonomy(table: &TaxonomyTable) -> String {
    let mut out = format!(
        "{:<26} {:>6} {:>7} {:>6} {:>7} {:>6} {:>7}\n",
        "category", "wh", "wh%", "yes/no", "yn%", "total", "total%"
    );
    for r in &table.rows {
        out.push_str(&format!(
            "{:<26} {:>6} {:>7.1} {:>6} {:>7.1} {:>6} {:>7.1}\n",
            r.category.as_str(),
            r.wh,
            r.wh_pct,
            r.yes_no,
            r.yes_no_pct,
            r.total,
            r.total_pct
        ));
    }
    out.push_str("yes-no-flip uses an automatic first-occurrence stance rule\n");
    out
}
