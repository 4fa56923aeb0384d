//! Answer normalization, EM / token-F1 / accuracy, and run aggregation.
//!
//! Normalization follows the SQuAD evaluation script: lowercase, drop ASCII
//! punctuation, drop the articles `a`, `an`, `the`, collapse whitespace.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::pipeline::RunOutcome;
use crate::task_model::{Instance, TaskName};

pub fn normalize_text(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn normalized_tokens(s: &str) -> Vec<String> {
    normalize_text(s).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

pub fn exact_match(pred: &str, golds: &[String]) -> u8 {
    let p = normalize_text(pred);
    golds.iter().any(|g| normalize_text(g) == p) as u8
}

fn parse_number(s: &str) -> Option<f64> {
    let cleaned: String = s.trim().trim_end_matches('.').chars().filter(|c| *c != ',').collect();
    let cleaned = cleaned.trim_start_matches('$');
    if cleaned.is_empty() {
        return None;
    }
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Exact numeric equality after parsing both sides, e.g. "456.0" == "456".
pub fn numeric_match(pred: &str, golds: &[String]) -> bool {
    match parse_number(pred) {
        Some(p) => golds.iter().filter_map(|g| parse_number(g)).any(|g| g == p),
        None => false,
    }
}

fn f1_tokens(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return (pred.is_empty() && gold.is_empty()) as u8 as f64;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Max over golds of the token-level F1 on normalized multisets.
pub fn token_f1(pred: &str, golds: &[String]) -> f64 {
    let p = normalized_tokens(pred);
    golds
        .iter()
        .map(|g| f1_tokens(&p, &normalized_tokens(g)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyScore {
    pub value: u8,
    /// Set when the prediction could not be mapped onto the label set.
    pub unmappable: bool,
}

pub fn accuracy(pred_label: Option<&str>, gold_label: &str) -> AccuracyScore {
    match pred_label {
        Some(p) => AccuracyScore {
            value: (p == gold_label) as u8,
            unmappable: false,
        },
        None => AccuracyScore {
            value: 0,
            unmappable: true,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub em: u8,
    pub f1: f64,
    pub acc: Option<u8>,
    pub unmappable: bool,
}

/// Scores one outcome against its instance's references.
pub fn score_outcome(instance: &Instance, outcome: &RunOutcome) -> ScoreRow {
    let text = &outcome.final_answer.text;
    let golds = &instance.gold_answers;
    let mut em = exact_match(text, golds);
    let mut f1 = token_f1(text, golds);
    if instance.task.name == TaskName::ArithmeticMrc && numeric_match(text, golds) {
        em = 1;
        f1 = 1.0;
    }
    let unmappable = outcome.answer_error.is_some();
    let acc = if instance.task.is_label_task() {
        let gold = instance.resolved_gold_label().unwrap_or_default();
        let score = accuracy(outcome.final_answer.label.as_deref(), &gold);
        Some(score.value)
    } else {
        None
    };
    if unmappable {
        em = 0;
        f1 = 0.0;
    }
    ScoreRow {
        id: instance.id.clone(),
        em,
        f1,
        acc,
        unmappable,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// `None` when there are no rows to average.
    pub em: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub instances: usize,
    pub acc_scored: usize,
    pub unmappable: usize,
    pub calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_instance: Vec<ScoreRow>,
    pub aggregates: Aggregates,
    pub counts: Counts,
    pub cost_total: f64,
    pub latency_ms_total: u64,
}

impl ScoreReport {
    pub fn means_defined(&self) -> bool {
        self.counts.instances > 0
    }
}

/// Order-independent float sum: values are summed in sorted order.
fn stable_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

fn mean_percent(values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    Some(stable_sum(values) / n * 100.0)
}

/// Aggregates one score row per outcome, matched by instance id.
pub fn aggregate(outcomes: &[RunOutcome], scores: &[ScoreRow]) -> ScoreReport {
    let aggregates = Aggregates {
        em: mean_percent(scores.iter().map(|r| r.em as f64).collect()),
        f1: mean_percent(scores.iter().map(|r| r.f1).collect()),
        accuracy: mean_percent(scores.iter().filter_map(|r| r.acc.map(f64::from)).collect()),
    };
    ScoreReport {
        per_instance: scores.to_vec(),
        aggregates,
        counts: Counts {
            instances: scores.len(),
            acc_scored: scores.iter().filter(|r| r.acc.is_some()).count(),
            unmappable: scores.iter().filter(|r| r.unmappable).count(),
            calls: outcomes.iter().map(|o| o.calls as usize).sum(),
        },
        cost_total: stable_sum(outcomes.iter().map(|o| o.cost_total).collect()),
        latency_ms_total: outcomes.iter().map(|o| o.latency_ms_total).sum(),
    }
}

/// Human-readable summary table.
pub fn render_report_table(report: &ScoreReport) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "n/a".into());
    let mut out = String::new();
    out.push_str("metric     value\n");
    out.push_str(&format!("EM         {}\n", fmt(report.aggregates.em)));
    out.push_str(&format!("F1         {}\n", fmt(report.aggregates.f1)));
    out.push_str(&format!("Acc        {}\n", fmt(report.aggregates.accuracy)));
    out.push_str(&format!("instances  {}\n", report.counts.instances));
    out.push_str(&format!("calls      {}\n", report.counts.calls));
    out.push_str(&format!("unmappable {}\n", report.counts.unmappable));
    out.push_str(&format!("cost       {:.6}\n", report.cost_total));
    out.push_str(&format!("latency_ms {}\n", report.latency_ms_total));
    out
}

/// Machine-readable per-instance rows, one JSON object per line.
pub fn report_jsonl(report: &ScoreReport) -> String {
    report
        .per_instance
        .iter()
        .map(|r| serde_json::to_string(r).expect("score rows serialize") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::FinalAnswer;
    use proptest::prelude::*;

    fn golds(g: &[&str]) -> Vec<String> {
        g.iter().map(|s| s.to_string()).collect()
    }

    fn outcome(id: &str, cost: f64) -> RunOutcome {
        RunOutcome {
            instance_id: id.into(),
            e_output: None,
            final_answer: FinalAnswer {
                text: String::new(),
                label: None,
            },
            answer_error: None,
            calls: 1,
            latency_ms_total: 10,
            cost_total: cost,
            transcript_keys: vec![],
            steps: vec![],
            g_policy: None,
        }
    }

    fn row(id: &str, em: u8, f1: f64) -> ScoreRow {
        ScoreRow {
            id: id.into(),
            em,
            f1,
            acc: None,
            unmappable: false,
        }
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_text("The Cat!"), "cat");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("A  B the C"), "b c");
    }

    #[test]
    fn exact_match_cases() {
        assert_eq!(exact_match("Eiffel Tower", &golds(&["Eiffel Tower"])), 1);
        assert_eq!(exact_match("the Eiffel Tower", &golds(&["Eiffel Tower"])), 1);
        assert_eq!(exact_match("Eiffel", &golds(&["Eiffel Tower"])), 0);
        assert_eq!(exact_match("Paris", &golds(&["Lyon", "paris."])), 1);
    }

    #[test]
    fn f1_cases() {
        assert!((token_f1("obama", &golds(&["barack obama"])) - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(token_f1("barack obama", &golds(&["barack obama"])), 1.0);
        assert_eq!(token_f1("cat", &golds(&["dog"])), 0.0);
        assert_eq!(token_f1("the", &golds(&["a"])), 1.0);
        assert_eq!(token_f1("the", &golds(&["dog"])), 0.0);
    }

    #[test]
    fn numeric_fallback() {
        assert!(numeric_match("456.0", &golds(&["456"])));
        assert!(numeric_match("1,200", &golds(&["1200"])));
        assert!(!numeric_match("456.5", &golds(&["456"])));
        assert!(!numeric_match("four", &golds(&["4"])));
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(Some("SUPPORTS"), "SUPPORTS").value, 1);
        assert_eq!(accuracy(Some("REFUTES"), "SUPPORTS").value, 0);
        let u = accuracy(None, "SUPPORTS");
        assert_eq!(u.value, 0);
        assert!(u.unmappable);
    }

    #[test]
    fn aggregate_means() {
        let outs = vec![outcome("a", 0.1), outcome("b", 0.2)];
        let rows = vec![row("a", 1, 1.0), row("b", 0, 0.0)];
        let rep = aggregate(&outs, &rows);
        assert_eq!(rep.aggregates.f1, Some(50.0));
        assert_eq!(rep.aggregates.em, Some(50.0));
        assert_eq!(rep.aggregates.accuracy, None);
        assert_eq!(rep.counts.calls, 2);
    }

    #[test]
    fn aggregate_empty_is_flagged_not_nan() {
        let rep = aggregate(&[], &[]);
        assert_eq!(rep.counts.instances, 0);
        assert!(!rep.means_defined());
        assert_eq!(rep.aggregates.em, None);
        assert_eq!(rep.aggregates.f1, None);
    }

    proptest! {
        #[test]
        fn normalize_idempotent(s in "\\PC{0,60}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }

        #[test]
        fn em_implies_full_f1(p in "[a-cA-C .,!]{0,20}", g in "[a-cA-C .,!]{0,20}") {
            if exact_match(&p, &golds(&[&g])) == 1 {
                prop_assert_eq!(token_f1(&p, &golds(&[&g])), 1.0);
            }
        }

        #[test]
        fn f1_symmetric(p in "[a-d ]{0,20}", g in "[a-d ]{0,20}") {
            prop_assert_eq!(token_f1(&p, &golds(&[&g])), token_f1(&g, &golds(&[&p])));
        }

        #[test]
        fn aggregate_permutation_invariant(
            vals in prop::collection::vec((0u8..2, 0.0f64..1.0, 0.0f64..5.0), 0..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let outs: Vec<RunOutcome> = vals.iter().enumerate().map(|(i, v)| outcome(&i.to_string(), v.2)).collect();
            let rows: Vec<ScoreRow> = vals.iter().enumerate().map(|(i, v)| row(&i.to_string(), v.0, v.1)).collect();
            let mut idx: Vec<usize> = (0..vals.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let outs2: Vec<RunOutcome> = idx.iter().map(|&i| outs[i].clone()).collect();
            let rows2: Vec<ScoreRow> = idx.iter().map(|&i| rows[i].clone()).collect();
            let a = aggregate(&outs, &rows);
            let b = aggregate(&outs2, &rows2);
            prop_assert_eq!(a.aggregates, b.aggregates);
            prop_assert_eq!(a.counts, b.counts);
            prop_assert_eq!(a.cost_total, b.cost_total);
        }
    }
}
