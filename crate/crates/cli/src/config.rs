//! Run configuration: TOML file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use e2g_core::pipeline::{average_context_words, benchmark_plan_at, GPolicyKind, PipelinePlan};
use e2g_core::prompting::StrategyName;
use e2g_core::task_model::{Benchmark, Dataset};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendMode {
    /// Cached transcripts only; a miss fails the instance.
    Replay,
    /// Live calls, every response stored as a transcript.
    Record,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    pub benchmark: Option<Benchmark>,
    pub name: Option<String>,
    pub split: Option<String>,
}

/// Plan fields that may be overridden. Unset fields fall back to the
/// benchmark default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanOverrides {
    pub strategy: Option<StrategyName>,
    pub two_step: Option<bool>,
    pub g_policy: Option<GPolicyKind>,
    pub word_threshold: Option<usize>,
    pub top_k: Option<usize>,
}

impl PlanOverrides {
    /// Field-wise merge where `self` wins.
    pub fn over(&self, lower: &PlanOverrides) -> PlanOverrides {
        PlanOverrides {
            strategy: self.strategy.or(lower.strategy),
            two_step: self.two_step.or(lower.two_step),
            g_policy: self.g_policy.or(lower.g_policy),
            word_threshold: self.word_threshold.or(lower.word_threshold),
            top_k: self.top_k.or(lower.top_k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub mode: Option<BackendMode>,
    pub model_id: Option<String>,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub max_in_flight: Option<usize>,
    pub input_rate: Option<f64>,
    pub output_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub parallelism: Option<usize>,
    pub run_id: Option<String>,
    pub resume: Option<bool>,
    pub templates_dir: Option<PathBuf>,
}

/// Partial configuration as read from a file or assembled from flags.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub plan: PlanOverrides,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub run: RunSection,
}

impl ConfigLayer {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config file: {e}")))
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut layer = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut layer.dataset.path, &mut layer.run.templates_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(layer)
    }

    /// Field-wise merge where `self` wins.
    pub fn over(&self, lower: &ConfigLayer) -> ConfigLayer {
        let (d, l) = (&self.dataset, &lower.dataset);
        let (b, lb) = (&self.backend, &lower.backend);
        let (r, lr) = (&self.run, &lower.run);
        ConfigLayer {
            dataset: DatasetSection {
                path: d.path.clone().or_else(|| l.path.clone()),
                benchmark: d.benchmark.or(l.benchmark),
                name: d.name.clone().or_else(|| l.name.clone()),
                split: d.split.clone().or_else(|| l.split.clone()),
            },
            plan: self.plan.over(&lower.plan),
            backend: BackendSection {
                mode: b.mode.or(lb.mode),
                model_id: b.model_id.clone().or_else(|| lb.model_id.clone()),
                temperature: b.temperature.or(lb.temperature),
                max_output_tokens: b.max_output_tokens.or(lb.max_output_tokens),
                max_in_flight: b.max_in_flight.or(lb.max_in_flight),
                input_rate: b.input_rate.or(lb.input_rate),
                output_rate: b.output_rate.or(lb.output_rate),
            },
            run: RunSection {
                parallelism: r.parallelism.or(lr.parallelism),
                run_id: r.run_id.clone().or_else(|| lr.run_id.clone()),
                resume: r.resume.or(lr.resume),
                templates_dir: r.templates_dir.clone().or_else(|| lr.templates_dir.clone()),
            },
        }
    }
}

pub const DEFAULT_PARALLELISM: usize = 4;

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset_path: PathBuf,
    pub benchmark: Benchmark,
    pub dataset_name: Option<String>,
    pub split: String,
    pub overrides: PlanOverrides,
    pub mode: BackendMode,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
    pub max_in_flight: Option<usize>,
    pub input_rate: Option<f64>,
    pub output_rate: Option<f64>,
    pub parallelism: usize,
    pub run_id: Option<String>,
    pub resume: bool,
    pub templates_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Validates a merged layer. Nothing here touches the backend.
    pub fn from_layer(layer: &ConfigLayer) -> Result<Self, CliError> {
        let missing = |what: &str| CliError::Config(format!("missing required setting `{what}`"));
        let parallelism = layer.run.parallelism.unwrap_or(DEFAULT_PARALLELISM);
        if parallelism == 0 {
            return Err(CliError::Config("parallelism must be at least 1".into()));
        }
        if layer.plan.top_k == Some(0) {
            return Err(CliError::Config("top_k must be at least 1".into()));
        }
        let temperature = layer.backend.temperature.unwrap_or(0.0);
        if !(0.0..=2.0).contains(&temperature) {
            return Err(CliError::Config(format!("temperature {temperature} is outside [0, 2]")));
        }
        for rate in [layer.backend.input_rate, layer.backend.output_rate].into_iter().flatten() {
            if rate.is_nan() || rate < 0.0 {
                return Err(CliError::Config("token rates must be nonnegative".into()));
            }
        }
        if let Some(id) = &layer.run.run_id {
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || id.starts_with('.') {
                return Err(CliError::Config(format!("run id `{id}` may only contain letters, digits, `-`, `_` and `.`")));
            }
        }
        Ok(RunConfig {
            dataset_path: layer.dataset.path.clone().ok_or_else(|| missing("dataset.path"))?,
            benchmark: layer.dataset.benchmark.ok_or_else(|| missing("dataset.benchmark"))?,
            dataset_name: layer.dataset.name.clone(),
            split: layer.dataset.split.clone().unwrap_or_else(|| "dev".into()),
            overrides: layer.plan.clone(),
            mode: layer.backend.mode.ok_or_else(|| missing("backend.mode"))?,
            model_id: layer.backend.model_id.clone().ok_or_else(|| missing("backend.model_id"))?,
            temperature,
            max_output_tokens: layer.backend.max_output_tokens,
            max_in_flight: layer.backend.max_in_flight,
            input_rate: layer.backend.input_rate,
            output_rate: layer.backend.output_rate,
            parallelism,
            run_id: layer.run.run_id.clone(),
            resume: layer.run.resume.unwrap_or(false),
            templates_dir: layer.run.templates_dir.clone(),
        })
    }
}

/// Applies overrides to the benchmark default for this dataset.
///
/// `top_k` is applied first because it changes the measured context length.
/// When `two_step` is not set it is recomputed from the word threshold; a
/// single-step strategy without an explicit `two_step` runs one step.
pub fn resolve_plan(benchmark: Benchmark, dataset: &Dataset, overrides: &PlanOverrides) -> Result<PipelinePlan, CliError> {
    let base = benchmark_plan_at(benchmark, 0);
    let top_k = overrides.top_k.unwrap_or(base.top_k);
    let avg = average_context_words(dataset, top_k);
    let mut plan = benchmark_plan_at(benchmark, avg);
    plan.top_k = top_k;
    if let Some(s) = overrides.strategy {
        plan.strategy = s;
    }
    if let Some(g) = overrides.g_policy {
        plan.g_policy = g;
    }
    if let Some(t) = overrides.word_threshold {
        plan.word_threshold = t;
    }
    plan.two_step = match overrides.two_step {
        Some(v) => v,
        None if plan.strategy == StrategyName::Cot => false,
        None => avg > plan.word_threshold,
    };
    plan.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use e2g_core::task_model::{Instance, Provenance};

    fn dataset(words: usize) -> Dataset {
        let doc = vec!["w"; words].join(" ");
        Dataset {
            name: "d".into(),
            instances: vec![Instance {
                id: "1".into(),
                task: Benchmark::HotpotQa.task_kind(),
                query: "who?".into(),
                context_docs: vec![doc],
                options: None,
                gold_answers: vec!["x".into()],
                gold_label: None,
                recall: None,
            }],
            provenance: Provenance {
                path: "d.jsonl".into(),
                split: "dev".into(),
            },
        }
    }

    const FILE: &str = r#"
[dataset]
path = "data.jsonl"
benchmark = "hotpotqa"

[plan]
g_policy = "evidence-plus-context"
top_k = 3

[backend]
mode = "replay"
model_id = "m"
"#;

    #[test]
    fn cli_beats_file_beats_default() {
        let file = ConfigLayer::from_toml(FILE).unwrap();
        let cli = ConfigLayer {
            plan: PlanOverrides {
                top_k: Some(7),
                ..Default::default()
            },
            ..Default::default()
        };
        let cfg = RunConfig::from_layer(&cli.over(&file)).unwrap();
        assert_eq!(cfg.overrides.top_k, Some(7));
        assert_eq!(cfg.overrides.g_policy, Some(GPolicyKind::EvidencePlusContext));
        let plan = resolve_plan(cfg.benchmark, &dataset(300), &cfg.overrides).unwrap();
        assert_eq!(plan.top_k, 7);
        assert_eq!(plan.g_policy, GPolicyKind::EvidencePlusContext);
        assert_eq!(plan.strategy, StrategyName::E2gBase);
        assert!(plan.two_step);
    }

    #[test]
    fn threshold_drives_two_step_unless_set() {
        let mut o = PlanOverrides::default();
        assert!(!resolve_plan(Benchmark::HotpotQa, &dataset(150), &o).unwrap().two_step);
        o.word_threshold = Some(100);
        assert!(resolve_plan(Benchmark::HotpotQa, &dataset(150), &o).unwrap().two_step);
        o.two_step = Some(false);
        assert!(!resolve_plan(Benchmark::HotpotQa, &dataset(150), &o).unwrap().two_step);
    }

    #[test]
    fn cot_defaults_to_one_step_and_rejects_two() {
        let mut o = PlanOverrides {
            strategy: Some(StrategyName::Cot),
            ..Default::default()
        };
        assert!(!resolve_plan(Benchmark::HotpotQa, &dataset(900), &o).unwrap().two_step);
        o.two_step = Some(true);
        assert!(matches!(resolve_plan(Benchmark::HotpotQa, &dataset(900), &o), Err(CliError::Config(_))));
    }

    #[test]
    fn invalid_settings_are_config_errors() {
        assert!(matches!(ConfigLayer::from_toml("[plan]\nbogus = 1"), Err(CliError::Config(_))));
        assert!(matches!(ConfigLayer::from_toml("[plan]\ng_policy = \"nope\""), Err(CliError::Config(_))));
        let mut layer = ConfigLayer::from_toml(FILE).unwrap();
        layer.run.parallelism = Some(0);
        assert!(RunConfig::from_layer(&layer).is_err());
        let mut layer = ConfigLayer::from_toml(FILE).unwrap();
        layer.backend.mode = None;
        assert!(RunConfig::from_layer(&layer).is_err());
        let mut layer = ConfigLayer::from_toml(FILE).unwrap();
        layer.run.run_id = Some("../escape".into());
        assert!(RunConfig::from_layer(&layer).is_err());
    }
}
