//! Builds the bundled multi-hop replay fixture.
//!
//! A seeded generator writes 50 distractor-style instances (ten documents
//! each, bridge wh-questions and comparison yes/no questions). A scripted
//! backend plays a model with a fixed mix of behaviours: correct answers,
//! answer spans left in the reasoning, fabricated evidence, flipped yes/no
//! conclusions. Both an E2G-base run and a CoT run are recorded; the
//! transcripts are exported as one archive next to the expected reports.
//!
//! Usage: cargo run -p e2g-cli --example make_fixture -- <out-dir>

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use e2g_cli::config::{BackendMode, PlanOverrides, RunConfig};
use e2g_cli::run::{execute_run, Store};
use e2g_cli::CliError;
use e2g_core::llm_backend::{Backend, BackendError, CompletionRequest, CompletionResponse, ResponseSource};
use e2g_core::prompting::{estimate_tokens, StrategyName};
use e2g_core::runstore::{export_archive, sha256_hex};
use e2g_core::task_model::{to_jsonl, Benchmark, Instance};

const SEED: u64 = 20_231_016;
const WH_COUNT: usize = 36;
const YES_NO_COUNT: usize = 14;

const FIRST: &[&str] = &[
    "Maren", "Tobias", "Ilse", "Corwin", "Delphine", "Anselm", "Rosalind", "Emeric", "Thea", "Lucan", "Odile",
    "Bastian", "Hesper", "Quentin", "Linnea", "Severin",
];
const LAST: &[&str] = &[
    "Halvorsen", "Dunmore", "Kestrel", "Abernathy", "Vossberg", "Lindqvist", "Ashcombe", "Ferrando", "Oakridge",
    "Marchetti", "Quillon", "Strand", "Wexley", "Thornbury",
];
const COMPANY_A: &[&str] = &[
    "Brightwater", "Ironvale", "Silverline", "Northgate", "Cobalt", "Redfern", "Amberly", "Westmark", "Highbury",
    "Stonebridge", "Larkspur", "Meridian",
];
const COMPANY_B: &[&str] = &["Systems", "Works", "Industries", "Labs", "Holdings", "Foods", "Motors", "Textiles"];
const CITIES: &[&str] = &[
    "Tallinn", "Porto", "Ghent", "Bergen", "Lyon", "Graz", "Leipzig", "Turku", "Bilbao", "Aarhus", "Trieste",
    "Utrecht", "Krakow", "Cork", "Bremen", "Malmo",
];
const PRODUCTS: &[&str] = &[
    "industrial pumps", "bicycle frames", "solar inverters", "canned fish", "ceramic tiles", "rail signals",
    "wool blankets", "marine engines", "garden tools", "optical lenses",
];

#[derive(Clone)]
struct Company {
    name: String,
    founder: String,
    city: String,
    product: String,
    year: u32,
    staff: u32,
}

impl Company {
    fn founder_doc(&self, birth: u32) -> String {
        format!(
            "{f} is an entrepreneur born in {birth}. {f} founded {c} in {y}. Before that {f} worked as an engineer.",
            f = self.founder,
            c = self.name,
            y = self.year
        )
    }

    fn company_doc(&self) -> String {
        format!(
            "{c} is a manufacturer of {p}. The headquarters of {c} are located in {city}. The company employs about {n} people.",
            c = self.name,
            p = self.product,
            city = self.city,
            n = self.staff
        )
    }

    fn founding_sentence(&self) -> String {
        format!("{} founded {} in {}.", self.founder, self.name, self.year)
    }

    fn hq_sentence(&self) -> String {
        format!("The headquarters of {} are located in {}.", self.name, self.city)
    }
}

struct World {
    rng: ChaCha8Rng,
    used: std::collections::HashSet<String>,
}

impl World {
    fn company(&mut self) -> Company {
        loop {
            let name = format!(
                "{} {}",
                COMPANY_A.choose(&mut self.rng).unwrap(),
                COMPANY_B.choose(&mut self.rng).unwrap()
            );
            let founder = format!("{} {}", FIRST.choose(&mut self.rng).unwrap(), LAST.choose(&mut self.rng).unwrap());
            // names and founders are unique within one instance
            if !self.used.contains(&name) && !self.used.contains(&founder) {
                self.used.insert(name.clone());
                self.used.insert(founder.clone());
                return Company {
                    name,
                    founder,
                    city: CITIES.choose(&mut self.rng).unwrap().to_string(),
                    product: PRODUCTS.choose(&mut self.rng).unwrap().to_string(),
                    year: self.rng.gen_range(1950..2010),
                    staff: self.rng.gen_range(2..90) * 100,
                };
            }
        }
    }

    fn birth(&mut self, c: &Company) -> u32 {
        c.year - self.rng.gen_range(22..40)
    }
}

/// Canned completions for one instance, keyed by step.
#[derive(Default, Clone)]
struct Script {
    e: String,
    g: String,
    cot: String,
}

fn labeled(answer: &str, evidence: &str) -> String {
    format!("Answer: {answer}\nEvidence and explanation: {evidence}")
}

fn reasoning(answer: &str, reasoning: &str) -> String {
    format!("Reasoning: {reasoning}\nAnswer: {answer}")
}

/// Documents shuffled with the supporting pair tracked; returns recall@5.
fn shuffle_docs(rng: &mut ChaCha8Rng, support: Vec<String>, distractors: Vec<String>) -> (Vec<String>, f64) {
    let support_set: Vec<String> = support.clone();
    let mut docs: Vec<String> = support.into_iter().chain(distractors).collect();
    docs.shuffle(rng);
    let hits = docs[..5].iter().filter(|d| support_set.contains(d)).count();
    (docs, hits as f64 / support_set.len() as f64)
}

fn distractor_docs(world: &mut World, n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            let c = world.company();
            if i % 2 == 0 {
                c.company_doc()
            } else {
                let b = world.birth(&c);
                c.founder_doc(b)
            }
        })
        .collect()
}

fn wh_instance(world: &mut World, idx: usize) -> (Instance, Script) {
    world.used.clear();
    let c = world.company();
    let birth = world.birth(&c);
    let support = vec![c.founder_doc(birth), c.company_doc()];
    let distractors = distractor_docs(world, 8);
    let (docs, recall) = shuffle_docs(&mut world.rng, support, distractors);
    let other_city = CITIES.iter().find(|x| **x != c.city).unwrap().to_string();
    let query = format!("Which city is home to the headquarters of the company founded by {}?", c.founder);
    let grounded = format!("{} {}", c.founding_sentence(), c.hq_sentence());
    let bridge = format!("So the company founded by {} is based in {}.", c.founder, c.city);

    let mut s = Script::default();
    // behaviour mix for the E2G run, by position
    match idx % 12 {
        // answer span present in the evidence, wrong final answer
        3 => {
            s.e = labeled(&c.city, &format!("{grounded} {bridge}"));
            s.g = labeled(&other_city, &format!("The company moved away from {} later.", c.city));
        }
        // fabricated evidence
        7 => {
            let fake = "Varnholm";
            s.e = labeled(
                fake,
                &format!("{} relocated the firm to {fake} after a merger with Osterly Group.", c.founder),
            );
            s.g = labeled(fake, &format!("The firm was relocated to {fake}."));
        }
        // grounded but incomplete evidence, wrong answer
        10 => {
            s.e = labeled(&other_city, &c.founding_sentence());
            s.g = labeled(&other_city, &c.founding_sentence());
        }
        // partially correct span
        5 => {
            s.e = labeled(&format!("central {}", c.city), &format!("{grounded} {bridge}"));
            s.g = labeled(&format!("central {}", c.city), &c.hq_sentence());
        }
        // unlabeled E-step output, recovered by the G step
        9 => {
            s.e = format!("{grounded} The answer is {}.", c.city);
            s.g = labeled(&c.city, &c.hq_sentence());
        }
        _ => {
            s.e = labeled(&c.city, &format!("{grounded} {bridge}"));
            s.g = labeled(&c.city, &c.hq_sentence());
        }
    }
    // the single-step baseline is wrong a little more often
    s.cot = match idx % 6 {
        1 => reasoning(&other_city, &format!("{} It is probably in {other_city}.", c.founding_sentence())),
        4 => reasoning(&format!("{} area", c.city), &format!("{grounded} {bridge}")),
        _ => reasoning(&c.city, &format!("{grounded} {bridge}")),
    };
    let inst = Instance {
        id: format!("mh-{idx:03}"),
        task: Benchmark::HotpotQa.task_kind(),
        query,
        context_docs: docs,
        options: None,
        gold_answers: vec![c.city.clone()],
        gold_label: None,
        recall: Some(recall),
    };
    (inst, s)
}

fn yes_no_instance(world: &mut World, idx: usize) -> (Instance, Script) {
    world.used.clear();
    let a = world.company();
    let mut b = world.company();
    let same = idx.is_multiple_of(2);
    if same {
        b.year = a.year;
    } else if b.year == a.year {
        b.year += 3;
    }
    let gold = if same { "yes" } else { "no" };
    let wrong = if same { "no" } else { "yes" };
    let (ba, bb) = (world.birth(&a), world.birth(&b));
    let support = vec![a.founder_doc(ba), b.founder_doc(bb)];
    let distractors = distractor_docs(world, 8);
    let (docs, recall) = shuffle_docs(&mut world.rng, support, distractors);
    let query = format!("Were {} and {} founded in the same year?", a.name, b.name);
    let grounded = format!("{} {}", a.founding_sentence(), b.founding_sentence());

    let mut s = Script::default();
    match idx {
        // exactly one flipped conclusion in the E2G run
        2 => {
            s.e = labeled("yes", &format!("Yes, both were founded in {}. {grounded}", a.year));
            s.g = labeled("no", &grounded);
        }
        // grounded evidence without a stance, wrong answer
        5 => {
            s.e = labeled(wrong, &grounded);
            s.g = labeled(wrong, &grounded);
        }
        _ => {
            s.e = labeled(gold, &grounded);
            s.g = labeled(gold, &grounded);
        }
    }
    s.cot = if idx % 4 == 1 {
        reasoning(wrong, &grounded)
    } else {
        reasoning(gold, &grounded)
    };
    let inst = Instance {
        id: format!("yn-{idx:03}"),
        task: Benchmark::HotpotQa.task_kind(),
        query,
        context_docs: docs,
        options: None,
        gold_answers: vec![gold.to_string()],
        gold_label: None,
        recall: Some(recall),
    };
    (inst, s)
}

struct ScriptedBackend {
    scripts: HashMap<String, Script>,
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let (id, step) = request
            .request_tag
            .rsplit_once('/')
            .ok_or_else(|| BackendError::Protocol(format!("untagged request `{}`", request.request_tag)))?;
        let script = self
            .scripts
            .get(id)
            .ok_or_else(|| BackendError::Protocol(format!("no script for `{id}`")))?;
        let text = match step {
            "E" => &script.e,
            "G" => &script.g,
            _ => &script.cot,
        }
        .clone();
        // latency derived from the prompt so that it is reproducible
        let digest = sha256_hex(request.prompt.as_bytes());
        let jitter = u64::from_str_radix(&digest[..4], 16).unwrap() % 400;
        let prompt_tokens = estimate_tokens(&request.prompt) as u32;
        Ok(CompletionResponse {
            prompt_tokens,
            output_tokens: estimate_tokens(&text) as u32,
            latency_ms: 300 + u64::from(prompt_tokens) / 4 + jitter,
            text,
            source: ResponseSource::Live,
        })
    }
}

fn config(dataset: PathBuf, strategy: Option<StrategyName>, run_id: &str) -> RunConfig {
    RunConfig {
        dataset_path: dataset,
        benchmark: Benchmark::HotpotQa,
        dataset_name: Some("hotpot50".into()),
        split: "dev".into(),
        overrides: PlanOverrides {
            strategy,
            ..Default::default()
        },
        mode: BackendMode::Record,
        model_id: "sim-1".into(),
        temperature: 0.0,
        max_output_tokens: None,
        max_in_flight: None,
        input_rate: Some(0.0015),
        output_rate: Some(0.002),
        parallelism: 4,
        run_id: Some(run_id.into()),
        resume: false,
        templates_dir: None,
    }
}

fn main() -> anyhow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/cli/fixtures/hotpot50".into()));
    fs::create_dir_all(&out)?;
    let mut world = World {
        rng: ChaCha8Rng::seed_from_u64(SEED),
        used: Default::default(),
    };
    let mut instances = Vec::new();
    let mut scripts = HashMap::new();
    let (mut wh, mut yn) = (0, 0);
    for k in 0..WH_COUNT + YES_NO_COUNT {
        // interleave yes/no questions among the wh ones
        let (inst, script) = if k % 7 == 3 && yn < YES_NO_COUNT || wh == WH_COUNT {
            yn += 1;
            yes_no_instance(&mut world, yn - 1)
        } else {
            wh += 1;
            wh_instance(&mut world, wh - 1)
        };
        scripts.insert(inst.id.clone(), script);
        instances.push(inst);
    }
    let dataset = out.join("dataset.jsonl");
    fs::write(&dataset, to_jsonl(&instances))?;

    let store_dir = tempfile::tempdir()?;
    let store = Store::new(store_dir.path());
    let live: Arc<dyn Backend> = Arc::new(ScriptedBackend { scripts });
    let factory = move |_: &RunConfig| -> Result<Arc<dyn Backend>, CliError> { Ok(live.clone()) };
    for (strategy, id) in [(None, "e2g-base"), (Some(StrategyName::Cot), "cot")] {
        let summary = execute_run(&config(dataset.clone(), strategy, id), &store, &factory)?;
        anyhow::ensure!(summary.finalized, "fixture run {id} had failures");
        let mut report = serde_json::to_string_pretty(&summary.record.report)?;
        report.push('\n');
        fs::write(out.join(format!("expected_report_{id}.json")), report)?;
        println!("{id}:\n{}", summary.report_text);
    }
    let n = export_archive(store.root.as_path(), &[e2g_core::llm_backend::TRANSCRIPT_NAMESPACE], &out.join("transcripts.jsonl"))?;
    println!("{} instances, {n} transcripts written to {}", instances.len(), out.display());
    Ok(())
}
