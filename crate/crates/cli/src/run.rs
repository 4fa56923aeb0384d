//! The `run` command and the on-disk run layout.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use e2g_core::grounding::TaxonomyTable;
use e2g_core::llm_backend::{Backend, CostModel, HttpBackend, HttpConfig, TranscriptBackend, TRANSCRIPT_NAMESPACE};
use e2g_core::metrics::{aggregate, report_jsonl, score_outcome, ScoreReport};
use e2g_core::pipeline::{run_dataset, FailureRecord, PipelinePlan, RunContext, RunOutcome};
use e2g_core::prompting::PromptTemplates;
use e2g_core::runstore::{
    now_rfc3339, read_json, sha256_hex, write_json, ContentStore, RunDir, RunMeta, META_FILE, OUTCOMES_FILE,
    RECORD_FILE, REPORT_TEXT_FILE, SCORES_FILE,
};
use e2g_core::task_model::{load_dataset, Benchmark, Dataset, Instance};

use crate::analysis::{analyze, render_run_report, taxonomy_of, AnalysisRow};
use crate::config::{resolve_plan, BackendMode, RunConfig};
use crate::CliError;

pub const ANALYSIS_FILE: &str = "analysis.jsonl";
pub const PLAN_FILE: &str = "plan.json";
pub const FAILURES_FILE: &str = "failures.json";
pub const RUNS_DIR: &str = "runs";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Store root: transcripts and runs live side by side.
#[derive(Debug, Clone)]
pub struct Store {
    pub root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn transcripts(&self) -> ContentStore {
        ContentStore::open(self.root.join(TRANSCRIPT_NAMESPACE))
    }

    pub fn run_dir(&self, run_id: &str) -> RunDir {
        RunDir::new(self.root.join(RUNS_DIR).join(run_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub benchmark: Benchmark,
    pub path: String,
    pub split: String,
    /// Digest of the dataset file bytes.
    pub sha256: String,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub mode: BackendMode,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
}

/// Timestamp-free part of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub dataset: DatasetInfo,
    pub plan: PipelinePlan,
    pub backend: BackendInfo,
    pub report: ScoreReport,
    pub taxonomy: TaxonomyTable,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub record: RunRecord,
    pub report_text: String,
    /// Instances that failed; a run with failures stays open for `--resume`.
    pub failures: Vec<FailureRecord>,
    pub finalized: bool,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            crate::EXIT_OK
        } else {
            crate::EXIT_FAILURE
        }
    }
}

/// Builds the live backend for record mode.
pub type LiveFactory<'a> = dyn Fn(&RunConfig) -> Result<Arc<dyn Backend>, CliError> + 'a;

/// Live backend from `E2G_API_KEY` / `E2G_API_BASE`.
pub fn http_backend(cfg: &RunConfig) -> Result<Arc<dyn Backend>, CliError> {
    let mut http = HttpConfig::from_env().map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(n) = cfg.max_in_flight {
        http.max_in_flight = n.max(1);
    }
    Ok(Arc::new(HttpBackend::new(http)?))
}

fn generated_run_id(dataset: &str, plan: &PipelinePlan) -> String {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3f");
    format!("{dataset}-{}-{stamp}", plan.strategy)
}

fn jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("rows serialize"));
        out.push('\n');
    }
    out.into_bytes()
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("record serializes");
    bytes.push(b'\n');
    bytes
}

/// Scores outcomes against their instances.
pub fn score_run(dataset: &Dataset, outcomes: &[RunOutcome]) -> (ScoreReport, Vec<AnalysisRow>) {
    let by_id: HashMap<&str, &Instance> = dataset.instances.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut scores = Vec::with_capacity(outcomes.len());
    let mut rows = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let inst = by_id[o.instance_id.as_str()];
        let score = score_outcome(inst, o);
        rows.push(analyze(inst, o, &score));
        scores.push(score);
    }
    (aggregate(outcomes, &scores), rows)
}

/// Runs the pipeline over a dataset and writes a finalized run directory.
/// All configuration problems surface before the first backend call.
pub fn execute_run(cfg: &RunConfig, store: &Store, live: &LiveFactory<'_>) -> Result<RunSummary, CliError> {
    let started_at = now_rfc3339();
    let clock = Instant::now();
    let schema = cfg.benchmark.task_kind();
    let dataset_bytes = fs::read(&cfg.dataset_path)
        .map_err(|e| CliError::Config(format!("cannot read dataset {}: {e}", cfg.dataset_path.display())))?;
    let mut dataset = load_dataset(&cfg.dataset_path, &schema)?;
    if let Some(name) = &cfg.dataset_name {
        dataset.name = name.clone();
    }
    dataset.provenance.split = cfg.split.clone();
    let plan = resolve_plan(cfg.benchmark, &dataset, &cfg.overrides)?;
    let templates = match &cfg.templates_dir {
        Some(dir) => PromptTemplates::with_overrides(dir).map_err(|e| CliError::Config(e.to_string()))?,
        None => PromptTemplates::default(),
    };

    let backend: Arc<dyn Backend> = match cfg.mode {
        BackendMode::Replay => Arc::new(TranscriptBackend::replay(store.transcripts())),
        BackendMode::Record => Arc::new(TranscriptBackend::record(store.transcripts(), live(cfg)?)),
    };

    let run_id = match &cfg.run_id {
        Some(id) => id.clone(),
        None => generated_run_id(&dataset.name, &plan),
    };
    let run_dir = store.run_dir(&run_id);
    if run_dir.is_finalized() {
        return Err(CliError::Config(format!("run `{run_id}` is already finished")));
    }
    let plan_path = run_dir.dir.join(PLAN_FILE);
    if run_dir.dir.exists() {
        if !cfg.resume {
            return Err(CliError::Config(format!("run `{run_id}` exists; pass --resume to continue it")));
        }
        let saved: PipelinePlan = read_json(&plan_path)?;
        if saved != plan {
            return Err(CliError::Config(format!("run `{run_id}` was started with a different plan")));
        }
    } else if cfg.resume {
        return Err(CliError::Config(format!("no partial run `{run_id}` to resume")));
    } else {
        fs::create_dir_all(&run_dir.dir).map_err(|e| CliError::Failed(format!("{}: {e}", run_dir.dir.display())))?;
        write_json(&plan_path, &plan)?;
    }

    let defaults = CostModel::default();
    let mut ctx = RunContext::new(backend.as_ref(), cfg.model_id.clone());
    ctx.temperature = cfg.temperature;
    ctx.max_output_tokens = cfg.max_output_tokens;
    ctx.templates = templates;
    ctx.cost_model = CostModel {
        input_rate: cfg.input_rate.unwrap_or(defaults.input_rate),
        output_rate: cfg.output_rate.unwrap_or(defaults.output_rate),
    };
    ctx.state = Some(run_dir.state());

    let run = run_dataset(&dataset, &plan, &ctx, cfg.parallelism)?;
    let (report, rows) = score_run(&dataset, &run.outcomes);
    let taxonomy = taxonomy_of(&rows);
    let record = RunRecord {
        tool_version: TOOL_VERSION.to_string(),
        dataset: DatasetInfo {
            name: dataset.name.clone(),
            benchmark: cfg.benchmark,
            path: cfg.dataset_path.display().to_string(),
            split: dataset.provenance.split.clone(),
            sha256: sha256_hex(&dataset_bytes),
            instances: dataset.instances.len(),
        },
        plan,
        backend: BackendInfo {
            mode: cfg.mode,
            model_id: cfg.model_id.clone(),
            temperature: cfg.temperature,
            max_output_tokens: cfg.max_output_tokens,
        },
        report,
        taxonomy,
    };
    let report_text = render_run_report(&record);
    if !run.failures.is_empty() {
        // leave the run open; finished instances are kept in the state dir
        write_json(&run_dir.dir.join(FAILURES_FILE), &run.failures)?;
        return Ok(RunSummary {
            run_id,
            run_dir: run_dir.dir,
            record,
            report_text,
            failures: run.failures,
            finalized: false,
        });
    }
    let _ = fs::remove_file(run_dir.dir.join(FAILURES_FILE));
    let files = [
        (RECORD_FILE, pretty(&record)),
        (OUTCOMES_FILE, jsonl(&run.outcomes)),
        (SCORES_FILE, report_jsonl(&record.report).into_bytes()),
        (ANALYSIS_FILE, jsonl(&rows)),
        (REPORT_TEXT_FILE, report_text.clone().into_bytes()),
    ];
    let meta = RunMeta {
        run_id: run_id.clone(),
        started_at,
        finished_at: now_rfc3339(),
        wall_clock_ms: clock.elapsed().as_millis() as u64,
    };
    run_dir.finalize(&files, &meta)?;
    Ok(RunSummary {
        run_id,
        run_dir: run_dir.dir,
        record,
        report_text,
        failures: Vec::new(),
        finalized: true,
    })
}

/// A finished run read back from the store.
#[derive(Debug, Clone)]
pub struct FinishedRun {
    pub run_id: String,
    pub record: RunRecord,
    pub outcomes: Vec<RunOutcome>,
    pub analysis: Vec<AnalysisRow>,
    pub meta: RunMeta,
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<Vec<T>, CliError> {
    String::from_utf8_lossy(bytes)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Failed(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn load_run(store: &Store, run_id: &str) -> Result<FinishedRun, CliError> {
    let dir = store.run_dir(run_id);
    if !dir.is_finalized() {
        return Err(CliError::Failed(format!("no finished run `{run_id}` under {}", store.root.display())));
    }
    let record: RunRecord = read_json(&dir.dir.join(RECORD_FILE))?;
    let meta: RunMeta = read_json(&dir.dir.join(META_FILE))?;
    let outcomes = parse_jsonl(&dir.read_file(OUTCOMES_FILE)?, &dir.dir.join(OUTCOMES_FILE))?;
    let analysis = parse_jsonl(&dir.read_file(ANALYSIS_FILE)?, &dir.dir.join(ANALYSIS_FILE))?;
    Ok(FinishedRun {
        run_id: run_id.to_string(),
        record,
        outcomes,
        analysis,
        meta,
    })
}
