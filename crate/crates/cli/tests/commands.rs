use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use e2g_cli::config::{BackendMode, PlanOverrides, RunConfig};
use e2g_cli::run::{execute_run, load_run, Store, FAILURES_FILE};
use e2g_cli::{CliError, EXIT_CONFIG, EXIT_FAILURE};
use e2g_core::llm_backend::{Backend, BackendError, CompletionRequest, CompletionResponse, ResponseSource};
use e2g_core::runstore::sha256_hex;
use e2g_core::task_model::{to_jsonl, Benchmark, Instance};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/hotpot50")
}

fn e2g(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_e2g"))
        .arg("--store")
        .arg(store)
        .args(args)
        .env_remove("E2G_API_KEY")
        .env_remove("E2G_STORE")
        .output()
        .expect("spawn e2g")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn imported_store() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let archive = fixture().join("transcripts.jsonl");
    let out = e2g(dir.path(), &["import-cache", archive.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("imported 150 transcripts"));
    dir
}

#[test]
fn replay_compare_and_taxonomy() {
    let store = imported_store();
    let config = fixture().join("run.toml");
    let cfg = config.to_str().unwrap();
    let dataset_digest = sha256_hex(&fs::read(fixture().join("dataset.jsonl")).unwrap());

    let e = e2g(store.path(), &["run", "--config", cfg, "--run-id", "e2g"]);
    assert_eq!(e.status.code(), Some(0), "{}", String::from_utf8_lossy(&e.stderr));
    assert!(stdout(&e).contains("strategy   e2g-base"));
    let c = e2g(store.path(), &["run", "--config", cfg, "--run-id", "cot", "--strategy", "cot"]);
    assert_eq!(c.status.code(), Some(0), "{}", String::from_utf8_lossy(&c.stderr));
    assert_eq!(sha256_hex(&fs::read(fixture().join("dataset.jsonl")).unwrap()), dataset_digest);

    let cmp = e2g(store.path(), &["compare", "cot", "e2g"]);
    assert!(cmp.status.success());
    let table = stdout(&cmp);
    assert!(table.contains("delta e2g"), "{table}");
    assert!(table.lines().any(|l| l.starts_with("delta e2g") && l.contains("+50")), "{table}");

    let same = e2g(store.path(), &["compare", "e2g", "e2g"]);
    let delta = stdout(&same).lines().find(|l| l.starts_with("delta")).unwrap().to_string();
    assert_eq!(delta.split_whitespace().skip(2).collect::<Vec<_>>(), ["+0.00", "+0.00", "n/a", "+0", "+0.000000"]);

    let plots = store.path().join("plots");
    let tax = e2g(store.path(), &["taxonomy", "e2g", "--out", plots.to_str().unwrap()]);
    assert!(tax.status.success());
    let flip = stdout(&tax).lines().find(|l| l.starts_with("yes-no-flip")).unwrap().to_string();
    assert_eq!(flip.split_whitespace().nth(3), Some("1"), "{flip}");
    let series = fs::read_to_string(plots.join("recall_f1.tsv")).unwrap();
    assert!(series.starts_with("recall_lo\trecall_hi\tn\tmean_f1\n"));
    assert_eq!(series.lines().count(), 6);
    let hist = fs::read_to_string(plots.join("grounding_histogram.tsv")).unwrap();
    let total: usize = hist.lines().skip(1).map(|l| l.rsplit('\t').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 50);

    // finished runs are never rewritten
    let again = e2g(store.path(), &["run", "--config", cfg, "--run-id", "e2g"]);
    assert_eq!(again.status.code(), Some(EXIT_CONFIG));
    assert!(e2g(store.path(), &["taxonomy", "missing"]).status.code() == Some(EXIT_FAILURE));
}

#[test]
fn compare_refuses_different_datasets() {
    let store = imported_store();
    let text = fs::read_to_string(fixture().join("dataset.jsonl")).unwrap();
    let subset: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    let subset_path = store.path().join("subset.jsonl");
    fs::write(&subset_path, subset).unwrap();
    let cfg = fixture().join("run.toml");
    let cfg = cfg.to_str().unwrap();
    assert!(e2g(store.path(), &["run", "--config", cfg, "--run-id", "full"]).status.success());
    let sub = e2g(
        store.path(),
        &["run", "--config", cfg, "--run-id", "sub", "--dataset", subset_path.to_str().unwrap()],
    );
    assert!(sub.status.success(), "{}", String::from_utf8_lossy(&sub.stderr));
    let cmp = e2g(store.path(), &["compare", "full", "sub"]);
    assert_eq!(cmp.status.code(), Some(EXIT_FAILURE));
    assert!(String::from_utf8_lossy(&cmp.stderr).contains("different datasets"));
}

#[test]
fn record_mode_without_credential_fails_before_any_call() {
    let store = tempfile::tempdir().unwrap();
    let cfg = fixture().join("run.toml");
    let out = e2g(
        store.path(),
        &["run", "--config", cfg.to_str().unwrap(), "--mode", "record", "--run-id", "live"],
    );
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("E2G_API_KEY"));
    assert!(!store.path().join("runs").exists());
    assert!(!store.path().join("transcripts").exists());
}

#[test]
fn bad_flags_and_config_are_config_errors() {
    let store = tempfile::tempdir().unwrap();
    let cfg = fixture().join("run.toml");
    let cfg = cfg.to_str().unwrap();
    let cases: &[&[&str]] = &[
        &["run", "--config", cfg, "--strategy", "cot", "--two-step", "true"],
        &["run", "--config", cfg, "--g-policy", "sometimes"],
        &["run", "--config", cfg, "--parallelism", "0"],
        &["run", "--dataset", cfg],
        &["run", "--config", "/nonexistent/run.toml"],
    ];
    for args in cases {
        assert_eq!(e2g(store.path(), args).status.code(), Some(EXIT_CONFIG), "{args:?}");
    }
}

#[test]
fn replay_miss_is_a_hard_failure() {
    let store = tempfile::tempdir().unwrap();
    let cfg = fixture().join("run.toml");
    let out = e2g(store.path(), &["run", "--config", cfg.to_str().unwrap(), "--run-id", "empty"]);
    assert_eq!(out.status.code(), Some(EXIT_FAILURE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("50 instances failed"));
}

fn small_dataset(dir: &Path) -> PathBuf {
    let instances: Vec<Instance> = (0..6)
        .map(|i| Instance {
            id: format!("q{i}"),
            task: Benchmark::HotpotQa.task_kind(),
            query: format!("Who built tower {i}?"),
            context_docs: vec![format!("Tower {i} was built by Builder{i}. {}", "Filler words here. ".repeat(80))],
            options: None,
            gold_answers: vec![format!("Builder{i}")],
            gold_label: None,
            recall: None,
        })
        .collect();
    let path = dir.join("towers.jsonl");
    fs::write(&path, to_jsonl(&instances)).unwrap();
    path
}

/// Answers every request; fails instance `q3` while `broken` is set.
struct Flaky {
    broken: AtomicBool,
    seen: Mutex<Vec<String>>,
}

impl Backend for Flaky {
    fn complete(&self, r: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.seen.lock().unwrap().push(r.request_tag.clone());
        let id = r.request_tag.split('/').next().unwrap();
        if id == "q3" && self.broken.load(Ordering::SeqCst) {
            return Err(BackendError::Transport {
                attempts: 3,
                message: "connection reset".into(),
            });
        }
        let n = &id[1..];
        Ok(CompletionResponse {
            text: format!("Answer: Builder{n}\nEvidence and explanation: Tower {n} was built by Builder{n}."),
            prompt_tokens: 10,
            output_tokens: 5,
            latency_ms: 3,
            source: ResponseSource::Live,
        })
    }
}

fn record_config(dataset: PathBuf, resume: bool) -> RunConfig {
    RunConfig {
        dataset_path: dataset,
        benchmark: Benchmark::HotpotQa,
        dataset_name: None,
        split: "dev".into(),
        overrides: PlanOverrides::default(),
        mode: BackendMode::Record,
        model_id: "m".into(),
        temperature: 0.0,
        max_output_tokens: None,
        max_in_flight: None,
        input_rate: None,
        output_rate: None,
        parallelism: 3,
        run_id: Some("towers".into()),
        resume,
        templates_dir: None,
    }
}

#[test]
fn resume_runs_only_missing_instances() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = small_dataset(dir.path());
    let store = Store::new(dir.path().join("store"));
    let flaky = Arc::new(Flaky {
        broken: AtomicBool::new(true),
        seen: Mutex::new(Vec::new()),
    });
    let live = flaky.clone();
    let factory = move |_: &RunConfig| -> Result<Arc<dyn Backend>, CliError> { Ok(live.clone()) };

    let first = execute_run(&record_config(dataset.clone(), false), &store, &factory).unwrap();
    assert!(!first.finalized);
    assert_eq!(first.exit_code(), EXIT_FAILURE);
    assert_eq!(first.failures.len(), 1);
    assert_eq!(first.failures[0].instance_id, "q3");
    assert!(first.run_dir.join(FAILURES_FILE).exists());
    assert!(load_run(&store, "towers").is_err());

    // without --resume the open run is protected
    assert!(matches!(
        execute_run(&record_config(dataset.clone(), false), &store, &factory),
        Err(CliError::Config(_))
    ));

    flaky.broken.store(false, Ordering::SeqCst);
    flaky.seen.lock().unwrap().clear();
    let second = execute_run(&record_config(dataset.clone(), true), &store, &factory).unwrap();
    assert!(second.finalized);
    let seen: HashSet<String> = flaky.seen.lock().unwrap().iter().cloned().collect();
    assert_eq!(seen, HashSet::from(["q3/E".to_string(), "q3/G".to_string()]));
    assert_eq!(second.record.report.counts.instances, 6);
    assert_eq!(second.record.report.aggregates.em, Some(100.0));
    assert!(!second.run_dir.join(FAILURES_FILE).exists());

    let run = load_run(&store, "towers").unwrap();
    assert_eq!(run.outcomes.len(), 6);
    assert!(run.meta.wall_clock_ms < 600_000);
}

#[test]
fn resume_requires_the_same_plan() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = small_dataset(dir.path());
    let store = Store::new(dir.path().join("store"));
    let flaky = Arc::new(Flaky {
        broken: AtomicBool::new(true),
        seen: Mutex::new(Vec::new()),
    });
    let factory = move |_: &RunConfig| -> Result<Arc<dyn Backend>, CliError> { Ok(flaky.clone()) };
    execute_run(&record_config(dataset.clone(), false), &store, &factory).unwrap();
    let mut changed = record_config(dataset, true);
    changed.overrides.top_k = Some(3);
    assert!(matches!(execute_run(&changed, &store, &factory), Err(CliError::Config(_))));
}
