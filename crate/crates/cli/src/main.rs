use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use e2g_cli::analysis::{compare_runs, taxonomy_report};
use e2g_cli::config::{BackendMode, ConfigLayer, PlanOverrides, RunConfig};
use e2g_cli::run::{execute_run, http_backend, load_run, Store};
use e2g_cli::{CliError, EXIT_FAILURE, EXIT_OK};
use e2g_core::llm_backend::TRANSCRIPT_NAMESPACE;
use e2g_core::pipeline::GPolicyKind;
use e2g_core::prompting::StrategyName;
use e2g_core::runstore::{export_archive, import_archive};
use e2g_core::task_model::Benchmark;

#[derive(Parser)]
#[command(name = "e2g", version, about = "Evidence-to-generate prompting runs and reports")]
struct Cli {
    /// Store root holding transcripts and runs.
    #[arg(long, global = true, env = "E2G_STORE", default_value = ".e2g-store")]
    store: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a strategy over a dataset and write a run record.
    Run(Box<RunArgs>),
    /// Compare finished runs over the same dataset.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<String>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Error taxonomy and plot data for a finished run.
    Taxonomy {
        run: String,
        /// Directory for taxonomy.txt and the .tsv series.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write all cached transcripts to one archive file.
    ExportCache { out: PathBuf },
    /// Load transcripts from an archive into the store.
    ImportCache { archive: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_parser = parse_benchmark)]
    benchmark: Option<Benchmark>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<StrategyName>,
    #[arg(long)]
    two_step: Option<bool>,
    #[arg(long, value_parser = parse_policy)]
    g_policy: Option<GPolicyKind>,
    #[arg(long)]
    word_threshold: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    /// `replay` (cache only) or `record` (live calls, cached).
    #[arg(long, value_parser = parse_mode)]
    mode: Option<BackendMode>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_output_tokens: Option<u32>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    run_id: Option<String>,
    /// Continue a partial run with the same id.
    #[arg(long)]
    resume: bool,
    /// Directory with replacement prompt templates.
    #[arg(long)]
    templates: Option<PathBuf>,
}

fn parse_benchmark(s: &str) -> Result<Benchmark, String> {
    s.parse().map_err(|e: e2g_core::task_model::TaskError| e.to_string())
}

fn parse_strategy(s: &str) -> Result<StrategyName, String> {
    StrategyName::ALL
        .into_iter()
        .find(|n| n.as_str() == s)
        .ok_or_else(|| format!("expected one of cot, e2g-base, e2g-pro; got `{s}`"))
}

fn parse_policy(s: &str) -> Result<GPolicyKind, String> {
    s.parse().map_err(|e: e2g_core::pipeline::PipelineError| e.to_string())
}

fn parse_mode(s: &str) -> Result<BackendMode, String> {
    match s {
        "replay" => Ok(BackendMode::Replay),
        "record" => Ok(BackendMode::Record),
        _ => Err(format!("expected `replay` or `record`, got `{s}`")),
    }
}

impl RunArgs {
    fn layer(&self) -> ConfigLayer {
        let mut l = ConfigLayer::default();
        l.dataset.path = self.dataset.clone();
        l.dataset.benchmark = self.benchmark;
        l.dataset.name = self.name.clone();
        l.dataset.split = self.split.clone();
        l.plan = PlanOverrides {
            strategy: self.strategy,
            two_step: self.two_step,
            g_policy: self.g_policy,
            word_threshold: self.word_threshold,
            top_k: self.top_k,
        };
        l.backend.mode = self.mode;
        l.backend.model_id = self.model.clone();
        l.backend.temperature = self.temperature;
        l.backend.max_output_tokens = self.max_output_tokens;
        l.backend.max_in_flight = self.max_in_flight;
        l.run.parallelism = self.parallelism;
        l.run.run_id = self.run_id.clone();
        l.run.resume = self.resume.then_some(true);
        l.run.templates_dir = self.templates.clone();
        l
    }
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    let store = Store::new(&cli.store);
    match cli.command {
        Command::Run(args) => {
            let file = match &args.config {
                Some(path) => ConfigLayer::load(path)?,
                None => ConfigLayer::default(),
            };
            let cfg = RunConfig::from_layer(&args.layer().over(&file))?;
            let summary = execute_run(&cfg, &store, &http_backend)?;
            print!("{}", summary.report_text);
            if summary.finalized {
                println!("\nrun {} written to {}", summary.run_id, summary.run_dir.display());
            } else {
                for f in &summary.failures {
                    eprintln!("failed: {} ({})", f.instance_id, f.error);
                }
                eprintln!(
                    "{} instances failed; run {} left open, continue with --run-id {} --resume",
                    summary.failures.len(),
                    summary.run_id,
                    summary.run_id
                );
            }
            Ok(summary.exit_code())
        }
        Command::Compare { runs, out } => {
            let loaded = runs.iter().map(|id| load_run(&store, id)).collect::<Result<Vec<_>, _>>()?;
            let table = compare_runs(&loaded)?;
            print!("{table}");
            if let Some(path) = out {
                fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(EXIT_OK)
        }
        Command::Taxonomy { run, out } => {
            let finished = load_run(&store, &run)?;
            let report = taxonomy_report(&finished);
            print!("{}", report.text);
            if let Some(dir) = out {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                fs::write(dir.join("taxonomy.txt"), &report.text)?;
                fs::write(dir.join("grounding_histogram.tsv"), &report.histogram)?;
                if let Some(series) = &report.recall_series {
                    fs::write(dir.join("recall_f1.tsv"), series)?;
                }
                println!("plot data written to {}", dir.display());
            }
            Ok(EXIT_OK)
        }
        Command::ExportCache { out } => {
            let n = export_archive(&store.root, &[TRANSCRIPT_NAMESPACE], &out).map_err(CliError::from)?;
            println!("exported {n} transcripts to {}", out.display());
            Ok(EXIT_OK)
        }
        Command::ImportCache { archive } => {
            let s = import_archive(&store.root, &archive).map_err(CliError::from)?;
            println!("imported {} transcripts ({} already present)", s.stored, s.already_present);
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map(CliError::exit_code).unwrap_or(EXIT_FAILURE);
            ExitCode::from(code as u8)
        }
    }
}
