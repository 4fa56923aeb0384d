//! E/G step orchestration and routing.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::{answer_segment, extract_final_answer, parse_e_step, EStepOutput, ExtractError, FinalAnswer};
use crate::llm_backend::{default_max_output_tokens, estimate_cost, Backend, BackendError, CompletionRequest, CostModel};
use crate::prompting::{build_step_prompt_with, estimate_tokens, PromptError, PromptTemplates, Step, Strategy, StrategyName};
use crate::runstore::{CacheKey, RunState, StoreError};
use crate::task_model::{assemble_context, context_word_count, Benchmark, Dataset, Instance, TaskError, TaskKind, TaskName};

pub const DEFAULT_WORD_THRESHOLD: usize = 200;
pub const DEFAULT_TOP_K: usize = 5;
/// Distractor-style multi-hop inputs keep all ten documents.
pub const MULTIHOP_TOP_K: usize = 10;
/// Placed between the evidence and the original context.
pub const EVIDENCE_CONTEXT_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GPolicyKind {
    EvidenceOnly,
    EvidencePlusContext,
    TempAnswer,
    Adaptive,
}

impl GPolicyKind {
    pub const ALL: [GPolicyKind; 4] = [
        GPolicyKind::EvidenceOnly,
        GPolicyKind::EvidencePlusContext,
        GPolicyKind::TempAnswer,
        GPolicyKind::Adaptive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GPolicyKind::EvidenceOnly => "evidence-only",
            GPolicyKind::EvidencePlusContext => "evidence-plus-context",
            GPolicyKind::TempAnswer => "temp-answer",
            GPolicyKind::Adaptive => "adaptive",
        }
    }
}

impl fmt::Display for GPolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GPolicyKind {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GPolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| PipelineError::Plan(format!("unknown G-context policy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub strategy: StrategyName,
    pub two_step: bool,
    /// Ignored when `two_step` is false.
    pub g_policy: GPolicyKind,
    pub top_k: usize,
    pub word_threshold: usize,
}

impl PipelinePlan {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.top_k == 0 {
            return Err(PipelineError::Plan("top_k must be at least 1".into()));
        }
        if self.two_step && Strategy::of(self.strategy).steps < 2 {
            return Err(PipelineError::Plan(format!(
                "strategy `{}` cannot run two steps",
                self.strategy
            )));
        }
        Ok(())
    }

    pub fn calls_per_instance(&self) -> u8 {
        if self.two_step {
            2
        } else {
            1
        }
    }
}

/// Routing defaults: E2G-Pro for arithmetic/logical reading, E2G-base
/// otherwise; two steps only when the context exceeds the word threshold.
pub fn default_plan(task: &TaskKind, avg_context_words: usize) -> PipelinePlan {
    let threshold = DEFAULT_WORD_THRESHOLD;
    let strategy = match task.name {
        TaskName::LogicalMrc | TaskName::ArithmeticMrc => StrategyName::E2gPro,
        _ => StrategyName::E2gBase,
    };
    let g_policy = match task.name {
        TaskName::LongFormQa => GPolicyKind::TempAnswer,
        TaskName::OpenQa => GPolicyKind::Adaptive,
        _ => GPolicyKind::EvidenceOnly,
    };
    PipelinePlan {
        strategy,
        two_step: avg_context_words > threshold,
        g_policy,
        top_k: if task.name == TaskName::MultihopQa {
            MULTIHOP_TOP_K
        } else {
            DEFAULT_TOP_K
        },
        word_threshold: threshold,
    }
}

/// Default plan for a named benchmark at its reported context length.
/// The adaptive G-context policy is used for NQ only; TQA keeps the
/// evidence-only default.
pub fn benchmark_plan(benchmark: Benchmark) -> PipelinePlan {
    benchmark_plan_at(benchmark, benchmark.reported_context_words())
}

/// Same as [`benchmark_plan`] for a measured context length.
pub fn benchmark_plan_at(benchmark: Benchmark, avg_context_words: usize) -> PipelinePlan {
    let mut plan = default_plan(&benchmark.task_kind(), avg_context_words);
    if benchmark == Benchmark::Tqa {
        plan.g_policy = GPolicyKind::EvidenceOnly;
    }
    plan
}

const WH_WORDS: &[&str] = &["who", "what", "when", "where", "why", "which", "whose", "whom", "how"];
const BE_FORMS: &[&str] = &["be", "am", "is", "are", "was", "were", "been", "being", "isn't", "aren't", "wasn't", "weren't"];
const DO_FORMS: &[&str] = &["do", "does", "did", "don't", "doesn't", "didn't"];
const HAVE_FORMS: &[&str] = &["have", "has", "had", "haven't", "hasn't", "hadn't"];
const MODALS: &[&str] = &[
    "can", "could", "may", "might", "must", "shall", "should", "will", "would", "ought", "can't", "cannot",
    "couldn't", "mightn't", "mustn't", "shan't", "shouldn't", "won't", "wouldn't",
];

fn starter_word(word: &str) -> bool {
    [WH_WORDS, BE_FORMS, DO_FORMS, HAVE_FORMS, MODALS]
        .iter()
        .any(|list| list.contains(&word))
}

/// True when the first word is a wh-word or a be/do/have/modal verb.
pub fn is_well_formed_question(query: &str) -> bool {
    let Some(first) = query.split_whitespace().next() else {
        return false;
    };
    let word = first
        .replace('\u{2019}', "'")
        .to_lowercase()
        .trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
        .trim_matches('\'')
        .to_string();
    if starter_word(&word) {
        return true;
    }
    // contractions such as "who's" or "what're"
    word.split_once('\'').map(|(head, _)| WH_WORDS.contains(&head)).unwrap_or(false)
}

/// Replaces `adaptive` with the branch chosen for this query.
pub fn resolve_policy(policy: GPolicyKind, query: &str) -> GPolicyKind {
    match policy {
        GPolicyKind::Adaptive if is_well_formed_question(query) => GPolicyKind::EvidencePlusContext,
        GPolicyKind::Adaptive => GPolicyKind::EvidenceOnly,
        other => other,
    }
}

fn evidence_or_raw(e_out: &EStepOutput) -> &str {
    if e_out.evidence.trim().is_empty() {
        e_out.raw.trim()
    } else {
        &e_out.evidence
    }
}

/// Text fed to the G step as its context.
pub fn select_g_context(policy: GPolicyKind, instance: &Instance, e_out: &EStepOutput, original_context: &str) -> String {
    match resolve_policy(policy, &instance.query) {
        GPolicyKind::EvidenceOnly => evidence_or_raw(e_out).to_string(),
        GPolicyKind::EvidencePlusContext => {
            format!("{}{EVIDENCE_CONTEXT_SEPARATOR}{original_context}", evidence_or_raw(e_out))
        }
        GPolicyKind::TempAnswer if !e_out.a_temp.trim().is_empty() => e_out.a_temp.clone(),
        GPolicyKind::TempAnswer => evidence_or_raw(e_out).to_string(),
        GPolicyKind::Adaptive => unreachable!("resolved above"),
    }
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("instance `{id}`: {source}")]
    Instance {
        id: String,
        #[source]
        source: StepError,
    },
    #[error("invalid plan: {0}")]
    Plan(String),
}

impl PipelineError {
    fn at(id: &str) -> impl FnOnce(StepError) -> PipelineError + '_ {
        move |source| PipelineError::Instance {
            id: id.to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: Step,
    /// Estimated tokens of the rendered prompt and of its context block.
    pub prompt_estimate: usize,
    pub context_estimate: usize,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub latency_ms: u64,
    pub cost: f64,
    pub transcript_key: CacheKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub instance_id: String,
    pub e_output: Option<EStepOutput>,
    pub final_answer: FinalAnswer,
    /// Set when the final completion could not be mapped to an answer label.
    pub answer_error: Option<String>,
    pub calls: u8,
    pub latency_ms_total: u64,
    pub cost_total: f64,
    pub transcript_keys: Vec<CacheKey>,
    pub steps: Vec<StepTrace>,
    /// Resolved G-context policy for two-step runs.
    pub g_policy: Option<GPolicyKind>,
}

/// Persisted per-instance progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum InstanceState {
    EDone { e_output: EStepOutput, e_trace: StepTrace },
    Done { outcome: RunOutcome },
}

/// Everything a run needs besides the dataset and plan.
pub struct RunContext<'a> {
    pub backend: &'a dyn Backend,
    pub model_id: String,
    pub temperature: f64,
    /// Overrides the per-task default when set.
    pub max_output_tokens: Option<u32>,
    pub templates: PromptTemplates,
    pub cost_model: CostModel,
    /// Partial-run state for resume; `None` disables persistence.
    pub state: Option<RunState>,
}

impl<'a> RunContext<'a> {
    pub fn new(backend: &'a dyn Backend, model_id: impl Into<String>) -> Self {
        Self {
            backend,
            model_id: model_id.into(),
            temperature: 0.0,
            max_output_tokens: None,
            templates: PromptTemplates::default(),
            cost_model: CostModel::default(),
            state: None,
        }
    }

    fn call(&self, instance: &Instance, step: Step, prompt: &str, context_estimate: usize) -> Result<(String, StepTrace), StepError> {
        let request = CompletionRequest::new(&self.model_id, prompt)
            .with_temperature(self.temperature)
            .with_max_output_tokens(
                self.max_output_tokens
                    .unwrap_or_else(|| default_max_output_tokens(&instance.task)),
            )
            .with_tag(format!("{}/{}", instance.id, step));
        let resp = self.backend.complete(&request)?;
        let trace = StepTrace {
            step,
            prompt_estimate: estimate_tokens(prompt),
            context_estimate,
            prompt_tokens: resp.prompt_tokens,
            output_tokens: resp.output_tokens,
            latency_ms: resp.latency_ms,
            cost: estimate_cost(&resp, &self.cost_model),
            transcript_key: request.transcript_key(),
        };
        Ok((resp.text, trace))
    }

    fn save(&self, id: &str, state: &InstanceState) -> Result<(), StepError> {
        if let Some(st) = &self.state {
            st.save(id, state)?;
        }
        Ok(())
    }

    fn load(&self, id: &str) -> Result<Option<InstanceState>, StepError> {
        match &self.state {
            Some(st) => Ok(st.load(id)?),
            None => Ok(None),
        }
    }
}

fn finish(
    instance: &Instance,
    e_output: EStepOutput,
    final_text: &str,
    steps: Vec<StepTrace>,
    g_policy: Option<GPolicyKind>,
) -> RunOutcome {
    let (final_answer, answer_error) =
        match extract_final_answer(final_text, &instance.task, instance.options.as_deref()) {
            Ok(fa) => (fa, None),
            Err(e) => (
                FinalAnswer {
                    text: answer_segment(final_text).to_string(),
                    label: None,
                },
                Some(e.to_string()),
            ),
        };
    RunOutcome {
        instance_id: instance.id.clone(),
        e_output: Some(e_output),
        final_answer,
        answer_error,
        calls: steps.len() as u8,
        latency_ms_total: steps.iter().map(|s| s.latency_ms).sum(),
        cost_total: steps.iter().map(|s| s.cost).sum(),
        transcript_keys: steps.iter().map(|s| s.transcript_key.clone()).collect(),
        steps,
        g_policy,
    }
}

fn run_steps(instance: &Instance, plan: &PipelinePlan, ctx: &RunContext<'_>) -> Result<RunOutcome, StepError> {
    let prior = ctx.load(&instance.id)?;
    if let Some(InstanceState::Done { outcome }) = prior {
        return Ok(outcome);
    }
    let strategy = Strategy::of(plan.strategy);
    let context = assemble_context(instance, plan.top_k)?;
    let first_step = if strategy.name == StrategyName::Cot {
        Step::Single
    } else {
        Step::E
    };

    let (e_output, e_trace, e_text) = match prior {
        Some(InstanceState::EDone { e_output, e_trace }) => {
            let raw = e_output.raw.clone();
            (e_output, e_trace, raw)
        }
        _ => {
            let bundle = build_step_prompt_with(instance, &strategy, first_step, &context, &ctx.templates)?;
            let (text, trace) = ctx.call(instance, first_step, &bundle.full_text, estimate_tokens(&context))?;
            (parse_e_step(&text)?, trace, text)
        }
    };

    if !plan.two_step {
        let outcome = finish(instance, e_output, &e_text, vec![e_trace], None);
        ctx.save(&instance.id, &InstanceState::Done { outcome: outcome.clone() })?;
        return Ok(outcome);
    }

    ctx.save(
        &instance.id,
        &InstanceState::EDone {
            e_output: e_output.clone(),
            e_trace: e_trace.clone(),
        },
    )?;
    let policy = resolve_policy(plan.g_policy, &instance.query);
    let g_context = select_g_context(policy, instance, &e_output, &context);
    let bundle = build_step_prompt_with(instance, &strategy, Step::G, &g_context, &ctx.templates)?;
    let (g_text, g_trace) = ctx.call(instance, Step::G, &bundle.full_text, estimate_tokens(&g_context))?;
    let outcome = finish(instance, e_output, &g_text, vec![e_trace, g_trace], Some(policy));
    ctx.save(&instance.id, &InstanceState::Done { outcome: outcome.clone() })?;
    Ok(outcome)
}

/// Runs the E step and, for two-step plans, the G step on one instance.
/// The final answer is read from the last completion.
pub fn run_instance(instance: &Instance, plan: &PipelinePlan, ctx: &RunContext<'_>) -> Result<RunOutcome, PipelineError> {
    plan.validate()?;
    run_steps(instance, plan, ctx).map_err(PipelineError::at(&instance.id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub index: usize,
    pub instance_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRun {
    /// Successful outcomes in dataset order.
    pub outcomes: Vec<RunOutcome>,
    pub failures: Vec<FailureRecord>,
}

/// Runs every instance on a pool of `parallelism` workers. Results come back
/// in dataset order; a failing instance is recorded and the rest continue.
pub fn run_dataset(
    dataset: &Dataset,
    plan: &PipelinePlan,
    ctx: &RunContext<'_>,
    parallelism: usize,
) -> Result<DatasetRun, PipelineError> {
    if parallelism == 0 {
        return Err(PipelineError::Plan("parallelism must be at least 1".into()));
    }
    plan.validate()?;
    let n = dataset.instances.len();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunOutcome, String>>>> = Mutex::new(vec![None; n]);
    std::thread::scope(|scope| {
        for _ in 0..parallelism.min(n.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let inst = &dataset.instances[i];
                let result = run_instance(inst, plan, ctx).map_err(|e| {
                    warn!("{e}");
                    let mut msg = e.to_string();
                    let mut src = std::error::Error::source(&e);
                    while let Some(s) = src {
                        msg = format!("{msg}: {s}");
                        src = s.source();
                    }
                    msg
                });
                slots.lock().expect("result slots")[i] = Some(result);
            });
        }
    });
    let mut run = DatasetRun {
        outcomes: Vec::with_capacity(n),
        failures: Vec::new(),
    };
    for (i, slot) in slots.into_inner().expect("result slots").into_iter().enumerate() {
        match slot.expect("every index visited") {
            Ok(o) => run.outcomes.push(o),
            Err(error) => run.failures.push(FailureRecord {
                index: i,
                instance_id: dataset.instances[i].id.clone(),
                error,
            }),
        }
    }
    info!("{} outcomes, {} failures", run.outcomes.len(), run.failures.len());
    Ok(run)
}

/// Mean assembled-context word count over a dataset, rounded down.
pub fn average_context_words(dataset: &Dataset, top_k: usize) -> usize {
    let counts: Vec<usize> = dataset
        .instances
        .iter()
        .filter_map(|i| assemble_context(i, top_k).ok())
        .map(|c| context_word_count(&c))
        .collect();
    if counts.is_empty() {
        0
    } else {
        counts.iter().sum::<usize>() / counts.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::ParseMode;
    use crate::llm_backend::{CompletionResponse, FnBackend, ResponseSource};
    use crate::task_model::Provenance;

    fn e_out(a: &str, ev: &str, raw: &str) -> EStepOutput {
        EStepOutput {
            a_temp: a.into(),
            evidence: ev.into(),
            raw: raw.into(),
            parse_mode: if ev.is_empty() {
                ParseMode::FallbackWhole
            } else {
                ParseMode::Labeled
            },
        }
    }

    fn inst(query: &str) -> Instance {
        Instance {
            id: "n1".into(),
            task: Benchmark::Nq.task_kind(),
            query: query.into(),
            context_docs: vec!["C".into()],
            options: None,
            gold_answers: vec!["x".into()],
            gold_label: None,
            recall: None,
        }
    }

    #[test]
    fn plans_for_examples() {
        let logiqa = default_plan(&Benchmark::LogiQa.task_kind(), 77);
        assert_eq!((logiqa.strategy, logiqa.two_step), (StrategyName::E2gPro, false));
        let hotpot = default_plan(&Benchmark::HotpotQa.task_kind(), 1106);
        assert_eq!(
            (hotpot.strategy, hotpot.two_step, hotpot.g_policy),
            (StrategyName::E2gBase, true, GPolicyKind::EvidenceOnly)
        );
        assert_eq!(default_plan(&Benchmark::Eli5.task_kind(), 650).g_policy, GPolicyKind::TempAnswer);
    }

    #[test]
    fn threshold_is_strict() {
        let t = Benchmark::HotpotQa.task_kind();
        assert!(!default_plan(&t, 200).two_step);
        assert!(default_plan(&t, 201).two_step);
    }

    #[test]
    fn well_formed_examples() {
        assert!(is_well_formed_question("where are the winter olympics and when do they start?"));
        assert!(!is_well_formed_question("my age is what?"));
        assert!(is_well_formed_question("Could the same team win twice?"));
        assert!(is_well_formed_question("\"Who's there?\""));
        assert!(is_well_formed_question("Isn't it late?"));
        assert!(!is_well_formed_question("   "));
    }

    #[test]
    fn g_context_routing() {
        let i = inst("my age is what?");
        let e = e_out("A", "E", "raw");
        assert_eq!(select_g_context(GPolicyKind::EvidenceOnly, &i, &e, "C"), "E");
        assert_eq!(select_g_context(GPolicyKind::EvidencePlusContext, &i, &e, "C"), "E\n\nC");
        assert_eq!(select_g_context(GPolicyKind::TempAnswer, &i, &e, "C"), "A");
        assert_eq!(select_g_context(GPolicyKind::Adaptive, &i, &e, "C"), "E");
        let wf = inst("who won?");
        assert_eq!(select_g_context(GPolicyKind::Adaptive, &wf, &e, "C"), "E\n\nC");
        let fallback = e_out("Paris.", "", "Paris.");
        assert_eq!(select_g_context(GPolicyKind::EvidenceOnly, &i, &fallback, "C"), "Paris.");
    }

    #[test]
    fn adaptive_has_no_hidden_state() {
        for q in ["who?", "my age is what?", "Can it fly?", "tell me", "How many?"] {
            let expect = if is_well_formed_question(q) {
                GPolicyKind::EvidencePlusContext
            } else {
                GPolicyKind::EvidenceOnly
            };
            assert_eq!(resolve_policy(GPolicyKind::Adaptive, q), expect);
            assert_eq!(resolve_policy(GPolicyKind::Adaptive, q), expect);
        }
    }

    #[test]
    fn plan_validation() {
        let mut p = default_plan(&Benchmark::HotpotQa.task_kind(), 1000);
        p.strategy = StrategyName::Cot;
        assert!(p.validate().is_err());
        p.two_step = false;
        assert!(p.validate().is_ok());
    }

    fn echo_backend() -> impl Backend {
        FnBackend(|r: &CompletionRequest| {
            let ans = if r.request_tag.ends_with("/G") { "final" } else { "temp" };
            Ok(CompletionResponse {
                text: format!("Answer: {ans}\nEvidence and explanation: short evidence."),
                prompt_tokens: 100,
                output_tokens: 10,
                latency_ms: 7,
                source: ResponseSource::Live,
            })
        })
    }

    #[test]
    fn two_step_and_single_step_calls() {
        let backend = echo_backend();
        let ctx = RunContext::new(&backend, "m");
        let i = inst("who won?");
        let mut plan = default_plan(&i.task, 650);
        let out = run_instance(&i, &plan, &ctx).unwrap();
        assert_eq!(out.calls, 2);
        assert_eq!(out.transcript_keys.len(), 2);
        assert_eq!(out.final_answer.text, "final");
        assert_eq!(out.latency_ms_total, 14);
        plan.two_step = false;
        let out = run_instance(&i, &plan, &ctx).unwrap();
        assert_eq!(out.calls, 1);
        assert_eq!(out.final_answer.text, "temp");
    }

    #[test]
    fn resume_after_e_step_repeats_only_g() {
        use std::sync::atomic::{AtomicBool, AtomicUsize};
        let dir = tempfile::tempdir().unwrap();
        let g_broken = AtomicBool::new(true);
        let e_calls = AtomicUsize::new(0);
        let backend = FnBackend(|r: &CompletionRequest| {
            if r.request_tag.ends_with("/G") {
                if g_broken.load(Ordering::SeqCst) {
                    return Err(BackendError::Transport {
                        attempts: 1,
                        message: "reset".into(),
                    });
                }
            } else {
                e_calls.fetch_add(1, Ordering::SeqCst);
            }
            Ok(CompletionResponse {
                text: "Answer: x\nEvidence and explanation: e.".into(),
                prompt_tokens: 1,
                output_tokens: 1,
                latency_ms: 1,
                source: ResponseSource::Live,
            })
        });
        let mut ctx = RunContext::new(&backend, "m");
        ctx.state = Some(RunState::open(dir.path()));
        let i = inst("who?");
        let plan = default_plan(&i.task, 650);
        assert!(run_instance(&i, &plan, &ctx).is_err());
        g_broken.store(false, Ordering::SeqCst);
        let out = run_instance(&i, &plan, &ctx).unwrap();
        assert_eq!(out.calls, 2);
        assert_eq!(e_calls.load(Ordering::SeqCst), 1);
        // a finished instance is served from state without any call
        let again = run_instance(&i, &plan, &ctx).unwrap();
        assert_eq!(again, out);
        assert_eq!(e_calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn dataset_order_and_failures() {
        let backend = FnBackend(|r: &CompletionRequest| {
            if r.request_tag.starts_with("bad/") {
                return Err(BackendError::Protocol("boom".into()));
            }
            Ok(CompletionResponse {
                text: "Answer: ok\nEvidence and explanation: e.".into(),
                prompt_tokens: 1,
                output_tokens: 1,
                latency_ms: 1,
                source: ResponseSource::Live,
            })
        });
        let ctx = RunContext::new(&backend, "m");
        let mut instances: Vec<Instance> = (0..10)
            .map(|k| {
                let mut i = inst("who?");
                i.id = format!("i{k}");
                i
            })
            .collect();
        instances[4].id = "bad".into();
        let ds = Dataset {
            name: "t".into(),
            instances,
            provenance: Provenance {
                path: "t.jsonl".into(),
                split: "dev".into(),
            },
        };
        let plan = default_plan(&Benchmark::Nq.task_kind(), 650);
        let run = run_dataset(&ds, &plan, &ctx, 4).unwrap();
        assert_eq!(run.outcomes.len(), 9);
        assert_eq!(run.failures.len(), 1);
        assert_eq!(run.failures[0].index, 4);
        assert!(run.failures[0].error.contains("boom"));
        let ids: Vec<&str> = run.outcomes.iter().map(|o| o.instance_id.as_str()).collect();
        assert_eq!(ids, ["i0", "i1", "i2", "i3", "i5", "i6", "i7", "i8", "i9"]);

        let empty = Dataset {
            instances: vec![],
            ..ds
        };
        assert!(run_dataset(&empty, &plan, &ctx, 3).unwrap().outcomes.is_empty());
        assert!(run_dataset(&empty, &plan, &ctx, 0).is_err());
    }
}
