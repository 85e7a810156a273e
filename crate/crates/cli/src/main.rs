//! retuner: generate noisy inference logs, run cold-start and production
//! improvement loops, replay the stage protocol, and rebuild reports.
//!
//! Every command takes `--seed` and an optional JSON `--config`; identical
//! seed and config always reproduce byte-identical outputs.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use retuner_core::gates::GateConfig;
use retuner_core::harness::{
    generate_logs, run_coldstart, run_production, run_stages, ColdStartConfig, LogGenConfig,
    ProductionConfig, RunArtifacts, StageConfig, StageSpec,
};
use retuner_core::perturb::{self, PerturbationKind, RateTable};
use retuner_core::report;
use retuner_core::search::Budget;
use retuner_core::task::ToyTaskSpec;
use retuner_core::trace::TraceStore;
use serde::Deserialize;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "retuner", version, about = "Closed-loop model improvement on a deterministic toy task")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize judged inference logs with realistic noise.
    GenerateLogs {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of base samples before duplicates and retries.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Bootstrap a model from the task definition alone.
    RunColdstart {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Maximum pipeline evaluations.
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Improve a deployed model from judged failures.
    RunProduction {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSONL trace file; generated in-process when omitted.
        #[arg(long)]
        logs: Option<PathBuf>,
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Adaptive-vs-naive deployment stages with rising poison rates.
    RunStages {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Truncate to the first N configured stages.
        #[arg(long)]
        stages: Option<usize>,
    },
    /// Regenerate report.md from an existing run.jsonl.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Optional JSON config; every field falls back to a default.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    /// Full task definition; wins over task_seed.
    task: Option<ToyTaskSpec>,
    /// Seed for the built-in demo task (defaults to --seed).
    task_seed: Option<u64>,
    /// Per-kind rate overrides, e.g. {"typo": 0.2}.
    rates: Option<std::collections::BTreeMap<String, f64>>,
    log_count: Option<usize>,
    serving_train_count: Option<usize>,
    budget: Option<u64>,
    tau: Option<f64>,
    epsilon: Option<u64>,
    tau_override_justification: Option<String>,
    stages: Option<Vec<StageSpec>>,
    split: Option<(f64, f64)>,
    iterations_per_stage: Option<usize>,
    seeds: Option<Vec<u64>>,
}

impl ConfigFile {
    fn load(path: &Option<PathBuf>) -> Result<ConfigFile> {
        match path {
            None => Ok(ConfigFile::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    fn task(&self, seed: u64) -> ToyTaskSpec {
        self.task.clone().unwrap_or_else(|| ToyTaskSpec::demo(self.task_seed.unwrap_or(seed)))
    }

    fn rate_table(&self) -> Result<RateTable> {
        let mut rates = perturb::default_rates();
        if let Some(overrides) = &self.rates {
            for (name, rate) in overrides {
                let kind = PerturbationKind::parse(name)
                    .with_context(|| format!("unknown perturbation kind '{name}'"))?;
                if !(0.0..=1.0).contains(rate) {
                    bail!("rate for '{name}' must be in [0, 1], got {rate}");
                }
                rates.insert(kind, *rate);
            }
        }
        Ok(rates)
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(contents.as_bytes())?;
    Ok(path)
}

fn write_artifacts(dir: &Path, art: &RunArtifacts) -> Result<()> {
    write_file(dir, "run.jsonl", &art.run_jsonl)?;
    write_file(dir, "report.md", &art.markdown)?;
    write_file(dir, "trajectory.jsonl", &art.trajectory_jsonl)?;
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::GenerateLogs { seed, config, out, count } => {
            let cfg_file = ConfigFile::load(&config)?;
            let task = cfg_file.task(seed);
            let mut cfg = LogGenConfig::new(task, count.or(cfg_file.log_count).unwrap_or(500), seed);
            cfg.rates = cfg_file.rate_table()?;
            if let Some(n) = cfg_file.serving_train_count {
                cfg.serving_train_count = n;
            }
            let logs = generate_logs(&cfg)?;
            let mut buf = Vec::new();
            for t in &logs.traces {
                serde_json::to_writer(&mut buf, t)?;
                buf.push(b'\n');
            }
            fs::create_dir_all(&out)?;
            fs::write(out.join("logs.jsonl"), &buf)?;
            println!("wrote {} traces to {}", logs.traces.len(), out.join("logs.jsonl").display());
            Ok(0)
        }
        Cmd::RunColdstart { seed, config, out, budget } => {
            let cfg_file = ConfigFile::load(&config)?;
            let task = cfg_file.task(seed);
            let mut cfg = ColdStartConfig::new(task, seed);
            if let Some(b) = budget.or(cfg_file.budget) {
                cfg.budget = cfg.budget.with_evaluations(b);
            }
            if let Some(tau) = cfg_file.tau {
                cfg.budget = cfg.budget.with_tau(tau);
            }
            let art = run_coldstart(&cfg)?;
            write_artifacts(&out, &art)?;
            println!("cold start: {}", summary_line(&art));
            Ok(art.exit.code())
        }
        Cmd::RunProduction { seed, config, out, logs, budget } => {
            let cfg_file = ConfigFile::load(&config)?;
            let task = cfg_file.task(seed);
            let traces = match &logs {
                Some(path) => {
                    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
                    let (store, rejects) = TraceStore::ingest(std::io::BufReader::new(file))?;
                    for r in &rejects {
                        eprintln!("rejected line {}: {}", r.line, r.reason);
                    }
                    store.iter().cloned().collect()
                }
                None => {
                    let mut gen_cfg = LogGenConfig::new(
                        task.clone(),
                        cfg_file.log_count.unwrap_or(500),
                        seed,
                    );
                    gen_cfg.rates = cfg_file.rate_table()?;
                    if let Some(n) = cfg_file.serving_train_count {
                        gen_cfg.serving_train_count = n;
                    }
                    generate_logs(&gen_cfg)?.traces
                }
            };
            let mut cfg = ProductionConfig::new(task, seed);
            if let Some(b) = budget.or(cfg_file.budget) {
                cfg.budget = cfg.budget.with_evaluations(b);
            }
            let mut gate = GateConfig::default();
            if let Some(eps) = cfg_file.epsilon {
                gate.epsilon = eps;
            }
            if let Some(tau) = cfg_file.tau {
                if tau < gate.tau {
                    let justification = cfg_file
                        .tau_override_justification
                        .clone()
                        .context("lowering tau requires tau_override_justification in the config")?;
                    gate = gate.with_lowered_tau(tau, justification);
                } else {
                    gate.tau = tau;
                }
            }
            cfg.budget = cfg.budget.with_tau(gate.tau);
            cfg.budget.epsilon = gate.epsilon;
            cfg.gate = gate;
            let art = run_production(traces, &cfg)?;
            write_artifacts(&out, &art)?;
            println!("production: {}", summary_line(&art));
            Ok(art.exit.code())
        }
        Cmd::RunStages { seed, config, out, stages } => {
            let cfg_file = ConfigFile::load(&config)?;
            let task = cfg_file.task(seed);
            let mut stage_cfg = StageConfig::default();
            if let Some(s) = cfg_file.stages.clone() {
                stage_cfg.stages = s;
            }
            if let Some(split) = cfg_file.split {
                stage_cfg.split = split;
            }
            if let Some(iters) = cfg_file.iterations_per_stage {
                stage_cfg.iterations_per_stage = iters;
            }
            if let Some(n) = stages {
                stage_cfg.stages.truncate(n.max(1));
            }
            let seeds = cfg_file.seeds.clone().unwrap_or_else(|| vec![seed]);
            let (trajectories, art) = run_stages(&stage_cfg, &task, &seeds)?;
            write_artifacts(&out, &art)?;
            for t in &trajectories {
                let last = t.checkpoints.last();
                println!(
                    "seed {}: final adaptive {:.4} naive {:.4} gap {:+.4}",
                    t.seed,
                    last.map(|c| c.adaptive_score).unwrap_or(0.0),
                    last.map(|c| c.naive_score).unwrap_or(0.0),
                    t.final_gap()
                );
            }
            Ok(art.exit.code())
        }
        Cmd::Report { out } => {
            let jsonl_path = out.join("run.jsonl");
            let text = fs::read_to_string(&jsonl_path)
                .with_context(|| format!("reading {}", jsonl_path.display()))?;
            let events = report::read_jsonl(&text)?;
            let md = report::render_markdown(&events);
            write_file(&out, "report.md", &md)?;
            println!("regenerated {}", out.join("report.md").display());
            Ok(0)
        }
    }
}

fn summary_line(art: &RunArtifacts) -> String {
    use retuner_core::report::RunEvent;
    art.events
        .iter()
        .rev()
        .find_map(|e| match e {
            RunEvent::Final { verdict, best_score, .. } => Some(format!(
                "{verdict}{}",
                best_score.map(|s| format!(" (score {s:.4})")).unwrap_or_default()
            )),
            _ => None,
        })
        .unwrap_or_else(|| "no final event".to_string())
}
