//! Grounding analysis, run comparison and plot-ready series.

use serde::{Deserialize, Serialize};

use e2g_core::grounding::{
    classify_error, grounding_score, is_correct, question_type, render_taxonomy, source_context, taxonomy_summary,
    ErrorCategory, GroundingConfig, QuestionType, TaxonomyTable,
};
use e2g_core::metrics::{render_report_table, ScoreRow};
use e2g_core::pipeline::RunOutcome;
use e2g_core::task_model::Instance;

use crate::run::{FinishedRun, RunRecord};
use crate::CliError;

/// Per-instance grounding and error analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub id: String,
    pub question_type: QuestionType,
    pub correct: bool,
    pub category: Option<ErrorCategory>,
    /// Grounded fraction of the E-step evidence against the source context.
    pub grounded_fraction: Option<f64>,
    pub recall: Option<f64>,
    pub f1: f64,
}

fn reasoning_of(outcome: &RunOutcome) -> &str {
    match &outcome.e_output {
        Some(e) if !e.evidence.trim().is_empty() => &e.evidence,
        Some(e) => &e.raw,
        None => "",
    }
}

pub fn analyze(instance: &Instance, outcome: &RunOutcome, score: &ScoreRow) -> AnalysisRow {
    let config = GroundingConfig::default();
    let reasoning = reasoning_of(outcome);
    let golds = &instance.gold_answers;
    let correct = is_correct(instance, &outcome.final_answer, golds);
    let category = if correct {
        None
    } else {
        classify_error(instance, reasoning, &outcome.final_answer, golds, &config).ok()
    };
    let grounded_fraction = (!reasoning.trim().is_empty())
        .then(|| grounding_score(reasoning, &source_context(instance), config.fuzz_threshold).grounded_fraction);
    AnalysisRow {
        id: instance.id.clone(),
        question_type: question_type(instance),
        correct,
        category,
        grounded_fraction,
        recall: instance.recall,
        f1: score.f1,
    }
}

pub fn taxonomy_of(rows: &[AnalysisRow]) -> TaxonomyTable {
    let entries: Vec<(QuestionType, ErrorCategory)> = rows
        .iter()
        .filter_map(|r| r.category.map(|c| (r.question_type, c)))
        .collect();
    taxonomy_summary(&entries)
}

pub fn render_run_report(record: &RunRecord) -> String {
    let p = &record.plan;
    let mut out = format!(
        "dataset    {} ({} instances)\nstrategy   {}\nsteps      {}\ng_policy   {}\ntop_k      {}\n\n",
        record.dataset.name,
        record.dataset.instances,
        p.strategy,
        p.calls_per_instance(),
        if p.two_step { p.g_policy.as_str() } else { "-" },
        p.top_k,
    );
    out.push_str(&render_report_table(&record.report));
    out.push('\n');
    out.push_str(&render_taxonomy(&record.taxonomy));
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "n/a".into())
}

fn fmt_delta(a: Option<f64>, b: Option<f64>) -> String {
    match (a, b) {
        (Some(a), Some(b)) => format!("{:+.2}", b - a),
        _ => "n/a".into(),
    }
}

/// Side-by-side metrics for runs over the same dataset, with a delta row
/// for each run against the first.
pub fn compare_runs(runs: &[FinishedRun]) -> Result<String, CliError> {
    if runs.len() < 2 {
        return Err(CliError::Config("compare needs at least two runs".into()));
    }
    let base = &runs[0];
    for r in &runs[1..] {
        if r.record.dataset.sha256 != base.record.dataset.sha256 {
            return Err(CliError::Failed(format!(
                "runs `{}` and `{}` use different datasets",
                base.run_id, r.run_id
            )));
        }
    }
    let width = runs.iter().map(|r| r.run_id.len() + 8).max().unwrap_or(0).max(12);
    let mut out = format!(
        "{:<width$} {:<9} {:>5} {:>7} {:>7} {:>7} {:>6} {:>10}\n",
        "run", "strategy", "steps", "EM", "F1", "Acc", "calls", "cost"
    );
    for r in runs {
        let rep = &r.record.report;
        out.push_str(&format!(
            "{:<width$} {:<9} {:>5} {:>7} {:>7} {:>7} {:>6} {:>10.6}\n",
            r.run_id,
            r.record.plan.strategy.as_str(),
            r.record.plan.calls_per_instance(),
            fmt_opt(rep.aggregates.em),
            fmt_opt(rep.aggregates.f1),
            fmt_opt(rep.aggregates.accuracy),
            rep.counts.calls,
            rep.cost_total,
        ));
    }
    let b = &base.record.report;
    for r in &runs[1..] {
        let rep = &r.record.report;
        out.push_str(&format!(
            "{:<width$} {:<9} {:>5} {:>7} {:>7} {:>7} {:>+6} {:>+10.6}\n",
            format!("delta {}", r.run_id),
            "",
            "",
            fmt_delta(b.aggregates.em, rep.aggregates.em),
            fmt_delta(b.aggregates.f1, rep.aggregates.f1),
            fmt_delta(b.aggregates.accuracy, rep.aggregates.accuracy),
            rep.counts.calls as i64 - b.counts.calls as i64,
            rep.cost_total - b.cost_total,
        ));
    }
    Ok(out)
}

pub const HISTOGRAM_BINS: usize = 10;
pub const RECALL_BINS: usize = 5;

fn bin_of(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Counts of grounded fraction per tenth, as `lo\thi\tcount` rows.
pub fn grounding_histogram(rows: &[AnalysisRow]) -> String {
    let mut counts = [0usize; HISTOGRAM_BINS];
    for f in rows.iter().filter_map(|r| r.grounded_fraction) {
        counts[bin_of(f, HISTOGRAM_BINS)] += 1;
    }
    let mut out = String::from("lo\thi\tcount\n");
    for (i, c) in counts.iter().enumerate() {
        let lo = i as f64 / HISTOGRAM_BINS as f64;
        let hi = (i + 1) as f64 / HISTOGRAM_BINS as f64;
        out.push_str(&format!("{lo:.1}\t{hi:.1}\t{c}\n"));
    }
    out
}

/// Mean F1 (percent) per retrieval-recall bin, or `None` when no instance
/// carries a recall value.
pub fn recall_f1_series(rows: &[AnalysisRow]) -> Option<String> {
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); RECALL_BINS];
    for r in rows {
        if let Some(rc) = r.recall {
            bins[bin_of(rc, RECALL_BINS)].push(r.f1);
        }
    }
    if bins.iter().all(Vec::is_empty) {
        return None;
    }
    let mut out = String::from("recall_lo\trecall_hi\tn\tmean_f1\n");
    for (i, b) in bins.iter_mut().enumerate() {
        let lo = i as f64 / RECALL_BINS as f64;
        let hi = (i + 1) as f64 / RECALL_BINS as f64;
        b.sort_by(f64::total_cmp);
        let mean = if b.is_empty() {
            "n/a".to_string()
        } else {
            format!("{:.4}", b.iter().sum::<f64>() / b.len() as f64 * 100.0)
        };
        out.push_str(&format!("{lo:.1}\t{hi:.1}\t{}\t{mean}\n", b.len()));
    }
    Some(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaxonomyOutput {
    pub table: TaxonomyTable,
    pub text: String,
    pub histogram: String,
    pub recall_series: Option<String>,
}

pub fn taxonomy_report(run: &FinishedRun) -> TaxonomyOutput {
    let table = taxonomy_of(&run.analysis);
    let mut text = render_taxonomy(&table);
    if table.total_errors == 0 {
        text.push_str("note: no erroneous instances in this run\n");
    }
    TaxonomyOutput {
        text,
        histogram: grounding_histogram(&run.analysis),
        recall_series: recall_f1_series(&run.analysis),
        table,
    }
}
