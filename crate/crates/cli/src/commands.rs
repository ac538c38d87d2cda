//! Argument definitions and the handler for each subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use urbanplan::config::{BackendKind, Config};
use urbanplan::dataset::{self, ForgeError, ForgeOptions};
use urbanplan::evaluator::{evaluate, load_pairs};
use urbanplan::executor::{ExecMode, TaskStatus};
use urbanplan::pipeline::{persist_run, reference_replay, Pipeline, PipelineError, PLANNER};
use urbanplan::{serialize_strict, validate};

use crate::{ask_body, load_config, read_plan};

#[derive(Parser, Debug)]
#[command(name = "urbanplan", version, about = "Plan, match and execute urban spatio-temporal queries")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings that override the config file. Paths given here are relative to
/// the working directory.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    /// Config file [default: ./urbanllm.toml when present]
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Model zoo JSON
    #[arg(long, global = true, value_name = "FILE")]
    pub registry: Option<PathBuf>,
    /// Fixture directory for the stub adapters
    #[arg(long, global = true, value_name = "DIR")]
    pub fixtures: Option<PathBuf>,
    /// Prompt template directory
    #[arg(long, global = true, value_name = "DIR")]
    pub templates: Option<PathBuf>,
    /// Prompt components to leave out, e.g. `tu` or `sf,cu`
    #[arg(long, global = true, value_name = "LIST")]
    pub ablate: Option<String>,
    /// Execute independent tasks concurrently
    #[arg(long, global = true)]
    pub parallel: bool,
    /// Worker threads in parallel mode
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    /// Execution clock: RFC 3339 time or `now`
    #[arg(long, global = true, value_name = "TIME")]
    pub clock: Option<String>,
    /// Extra replay store (repeatable)
    #[arg(long = "replay", global = true, value_name = "FILE")]
    pub replay: Vec<PathBuf>,
    /// Use the live chat backend instead of replay
    #[arg(long, global = true)]
    pub live: bool,
    /// Match models deterministically, without asking the backend
    #[arg(long, global = true)]
    pub no_llm_matching: bool,
    /// Directory for run records
    #[arg(long, global = true, value_name = "DIR")]
    pub runs_dir: Option<PathBuf>,
}

impl Overrides {
    /// Loads the config file and applies these flags on top.
    pub fn config(&self) -> anyhow::Result<Config> {
        let mut cfg = load_config(self.config.as_deref())?;
        let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if v.is_some() {
                slot.clone_from(v);
            }
        };
        set(&mut cfg.paths.registry, &self.registry);
        set(&mut cfg.paths.fixtures, &self.fixtures);
        set(&mut cfg.paths.templates, &self.templates);
        set(&mut cfg.paths.runs_dir, &self.runs_dir);
        if let Some(a) = &self.ablate {
            cfg.prompt.ablate.clone_from(a);
        }
        if self.parallel {
            cfg.execution.mode = ExecMode::Parallel;
        }
        if self.workers.is_some() {
            cfg.execution.workers = self.workers;
        }
        if let Some(c) = &self.clock {
            cfg.execution.clock.clone_from(c);
        }
        cfg.backend.replay_files.extend(self.replay.iter().cloned());
        if self.live {
            cfg.backend.kind = BackendKind::Live;
        }
        if self.no_llm_matching {
            cfg.matching.llm = false;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Decompose a query into a plan
    Plan {
        #[arg(long)]
        query: String,
        /// Write the strict plan JSON here instead of stdout
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Check a plan file
    Validate { plan: PathBuf },
    /// Assign a model to every task of a plan
    Match {
        plan: PathBuf,
        /// Query the plan answers, shown to the matcher
        #[arg(long, default_value = "")]
        query: String,
    },
    /// Match and execute a plan
    Run {
        plan: PathBuf,
        #[arg(long, default_value = "")]
        query: String,
        /// Write the execution trace here instead of stdout
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
    },
    /// Answer a query end to end
    Ask {
        query: String,
        /// Write the full run record here
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
        /// Print `{response, run_id}` as JSON
        #[arg(long)]
        json: bool,
    },
    /// Score predicted plans against gold plans
    Eval {
        #[arg(long, value_name = "FILE")]
        pred: PathBuf,
        #[arg(long, value_name = "FILE")]
        gold: PathBuf,
        /// Require argument values to match as well
        #[arg(long)]
        strict_args: bool,
        /// Write the JSON report here instead of stdout
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Training corpus tools
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Serve the pipeline over HTTP
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        host: Option<String>,
    },
    /// Write the planner replay store for the reference queries
    ReplayBuild {
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum DatasetCommand {
    /// Generate examples from seeds, then split them into train and eval
    Gen {
        /// Seed examples as JSONL [default: the built-in reference set]
        #[arg(long, value_name = "FILE")]
        seeds: Option<PathBuf>,
        /// Accepted examples to generate
        #[arg(long)]
        n: usize,
        #[arg(long)]
        rng_seed: Option<u64>,
        #[arg(long)]
        train_ratio: Option<f64>,
        #[arg(long)]
        seeds_per_prompt: Option<usize>,
        /// Concurrent generation requests
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        /// Output directory for generated, train and eval JSONL
        #[arg(long, value_name = "DIR", default_value = "dataset")]
        out_dir: PathBuf,
    },
}

/// Process exit status of a handler that did not error out.
pub type Status = u8;

pub fn dispatch(cli: Cli) -> anyhow::Result<Status> {
    let mut cfg = cli.overrides.config()?;
    match cli.command {
        Command::Plan { query, out } => plan(&cfg, &query, out.as_deref()),
        Command::Validate { plan } => validate_file(&plan),
        Command::Match { plan, query } => match_file(&cfg, &plan, &query),
        Command::Run { plan, query, trace } => run_file(&cfg, &plan, &query, trace.as_deref()),
        Command::Ask { query, trace, json } => ask(&cfg, &query, trace.as_deref(), json),
        Command::Eval { pred, gold, strict_args, report } => {
            eval(&pred, &gold, strict_args || cfg.eval.strict_args, report.as_deref())
        }
        Command::Dataset { command: DatasetCommand::Gen { seeds, n, rng_seed, train_ratio, seeds_per_prompt, parallelism, out_dir } } => {
            if let Some(s) = rng_seed {
                cfg.dataset.rng_seed = s;
            }
            if let Some(r) = train_ratio {
                cfg.dataset.train_ratio = r;
            }
            if let Some(k) = seeds_per_prompt {
                cfg.dataset.seeds_per_prompt = k;
            }
            dataset_gen(&cfg, seeds.as_deref(), n, parallelism, &out_dir)
        }
        Command::Serve { port, host } => {
            if let Some(p) = port {
                cfg.server.port = p;
            }
            if let Some(h) = host {
                cfg.server.host = h;
            }
            crate::server::serve_blocking(&cfg).map(|()| 0)
        }
        Command::ReplayBuild { out } => {
            let pipeline = Pipeline::from_config(&cfg)?;
            let store = reference_replay(&pipeline.templates);
            store.save(&out).with_context(|| format!("writing {}", out.display()))?;
            println!("{} entries written to {}", store.len(), out.display());
            Ok(0)
        }
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn report_failure(e: &PipelineError) -> Status {
    eprintln!("error: {e}");
    for v in &e.failure.violations {
        eprintln!("  {v}");
    }
    1
}

fn plan(cfg: &Config, query: &str, out: Option<&Path>) -> anyhow::Result<Status> {
    let pipeline = Pipeline::from_config(cfg)?;
    let run = match pipeline.plan_query(query) {
        Ok(r) => r,
        Err(e) => return Ok(report_failure(&e)),
    };
    for w in &run.warnings {
        eprintln!("{w}");
    }
    write_or_print(out, &serialize_strict(run.plan.as_ref().expect("planned")))?;
    Ok(0)
}

fn validate_file(path: &Path) -> anyhow::Result<Status> {
    let plan = read_plan(path)?;
    let report = validate(&plan);
    for issue in &report.issues {
        eprintln!("{issue}");
    }
    if report.is_ok() {
        println!("ok");
        Ok(0)
    } else {
        Ok(1)
    }
}

fn match_file(cfg: &Config, path: &Path, query: &str) -> anyhow::Result<Status> {
    let plan = read_plan(path)?;
    let pipeline = Pipeline::from_config(cfg)?;
    match pipeline.match_plan(query, &plan) {
        Ok(m) => {
            println!("{}", serde_json::to_string_pretty(&m)?);
            Ok(0)
        }
        Err(e) => Ok(report_failure(&e)),
    }
}

fn run_file(cfg: &Config, path: &Path, query: &str, trace_out: Option<&Path>) -> anyhow::Result<Status> {
    let plan = read_plan(path)?;
    let pipeline = Pipeline::from_config(cfg)?;
    let run = match pipeline.run_plan(query, plan, false) {
        Ok(r) => r,
        Err(e) => return Ok(report_failure(&e)),
    };
    let trace = run.trace.as_ref().expect("executed");
    write_or_print(trace_out, &trace.to_json_pretty())?;
    let failed: Vec<String> = trace
        .tasks
        .iter()
        .filter(|t| t.status != TaskStatus::Ok)
        .map(|t| format!("task {} {:?}: {}", t.task_id, t.status, t.error.as_deref().unwrap_or("")))
        .collect();
    for f in &failed {
        eprintln!("{f}");
    }
    Ok(if failed.is_empty() { 0 } else { 1 })
}

fn ask(cfg: &Config, query: &str, record: Option<&Path>, json: bool) -> anyhow::Result<Status> {
    let pipeline = Pipeline::from_config(cfg)?;
    let outcome = pipeline.run_query(query);
    let run = match &outcome {
        Ok(r) => r,
        Err(e) => &e.run,
    };
    if let Some(p) = record {
        fs::write(p, run.to_json_pretty()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(dir) = &cfg.paths.runs_dir {
        let saved = persist_run(dir, run).with_context(|| format!("writing run record to {}", dir.display()))?;
        eprintln!("run record: {}", saved.display());
    }
    if let Err(e) = &outcome {
        return Ok(report_failure(e));
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&ask_body(run))?);
    } else {
        println!("{}", run.response.as_deref().unwrap_or(""));
        eprintln!("run_id: {}", run.run_id);
    }
    Ok(0)
}

fn eval(pred: &Path, gold: &Path, strict_args: bool, out: Option<&Path>) -> anyhow::Result<Status> {
    let examples = load_pairs(pred, gold)?;
    let report = evaluate(&examples, strict_args)?;
    let m = report.overall;
    let summary = format!(
        "n={} accuracy={:.4} precision={:.4} recall={:.4} f1={:.4}",
        m.n, m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1
    );
    match out {
        Some(_) => {
            write_or_print(out, &report.to_json_pretty())?;
            println!("{summary}");
        }
        None => {
            println!("{}", report.to_json_pretty());
            eprintln!("{summary}");
        }
    }
    Ok(0)
}

fn dataset_gen(cfg: &Config, seeds: Option<&Path>, n: usize, parallelism: usize, out_dir: &Path) -> anyhow::Result<Status> {
    if !(0.0..=1.0).contains(&cfg.dataset.train_ratio) {
        bail!("train ratio must be within [0, 1], got {}", cfg.dataset.train_ratio);
    }
    let seeds = match seeds {
        Some(p) => dataset::load_seeds(p)?,
        None => dataset::builtin_seeds(),
    };
    let pipeline = Pipeline::from_config(cfg)?;
    let opts = ForgeOptions {
        backend: PLANNER.into(),
        rng_seed: cfg.dataset.rng_seed,
        seeds_per_prompt: cfg.dataset.seeds_per_prompt,
        temperature: cfg.dataset.temperature,
        parallelism,
        ..ForgeOptions::default()
    };
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let generated = match dataset::generate(&seeds, n, &pipeline.gateway, &opts) {
        Ok(g) => g,
        Err(ForgeError::QuotaExceeded { target, accepted, attempts, examples }) => {
            dataset::write_jsonl(&out_dir.join("generated.jsonl"), &examples)?;
            bail!("only {accepted} of {target} examples accepted after {attempts} attempts; partial output in generated.jsonl");
        }
        Err(e) => return Err(e.into()),
    };
    let split = dataset::split_and_stratify(&generated, cfg.dataset.train_ratio, cfg.dataset.rng_seed);
    dataset::write_jsonl(&out_dir.join("generated.jsonl"), &generated)?;
    dataset::write_jsonl(&out_dir.join("train.jsonl"), &split.train)?;
    dataset::write_jsonl(&out_dir.join("eval.jsonl"), &split.eval)?;
    let rejected = generated.iter().filter(|g| !g.accepted()).count();
    println!(
        "{} accepted, {} rejected; {} train, {} eval in {}",
        generated.len() - rejected,
        rejected,
        split.train.len(),
        split.eval.len(),
        out_dir.display()
    );
    Ok(0)
}
