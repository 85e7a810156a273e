//! End-to-end orchestration: synthetic log generation, cold-start runs,
//! production improvement runs, and the stage-based adaptive-vs-naive
//! protocol, all reported as markdown plus a JSONL mirror.
//!
//! Everything is driven by a master seed and named seed streams, so a rerun
//! with the same config produces byte-identical logs, trajectories, and
//! reports.

use crate::audit::HiddenLabels;
use crate::curation::{self, BuiltinDetector, CurationConfig, ErrorProfile, ToyCounterGenerator};
use crate::gates::{self, DeployedCheckpoint, GateConfig, GateDecision, LedgerEntry, RollbackLedger};
use crate::perturb::{
    self, decorate_log_sequence, make_near_duplicate, ConfusionLexicon, DecorateConfig,
    PerturbConfig, PerturbationKind, RateTable, RawLog, SampleToxicity,
};
use crate::pipeline::{DatasetSpec, Example, HyperConfig, Mode, Pipeline, Provenance, Slice, StrategySpec};
use crate::report::{render_markdown, write_jsonl, ClusterSummary, RunEvent};
use crate::search::{run_search, Budget, RuleProposer, SearchOutcome, ToyEvaluator};
use crate::seeds;
use crate::task::{self, generate_examples, judge, ToyModel, ToyTaskSpec, Verdict};
use crate::trace::{
    build_regression_set, build_taxonomy, partition, BoundaryProbeGenerator, ConfusionClusterer,
    FailureCluster, Fixability, InferenceTrace, JudgeMeta, ProbeGenerator, TraceStore,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    /// Converged or an accepted deployment decision.
    Ok,
    /// Run failed: invalid input or no acceptable candidate.
    Error,
    /// Diagnosis found no fixable failure cluster.
    NoFixableFailures,
}

impl ExitStatus {
    pub fn code(&self) -> i32 {
        match self {
            ExitStatus::Ok => 0,
            ExitStatus::Error => 1,
            ExitStatus::NoFixableFailures => 2,
        }
    }
}

/// Bundle returned by every run command.
#[derive(Debug)]
pub struct RunArtifacts {
    pub events: Vec<RunEvent>,
    pub markdown: String,
    pub run_jsonl: String,
    pub trajectory_jsonl: String,
    pub exit: ExitStatus,
}

impl RunArtifacts {
    fn from_events(events: Vec<RunEvent>, trajectory_jsonl: String, exit: ExitStatus) -> Self {
        RunArtifacts {
            markdown: render_markdown(&events),
            run_jsonl: write_jsonl(&events),
            events,
            trajectory_jsonl,
            exit,
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid stage config: {0}")]
    InvalidStageConfig(String),
    #[error("log generation needs count >= 1")]
    EmptyLogRequest,
    #[error("{0}")]
    Curation(#[from] curation::CurationError),
    #[error("{0}")]
    Train(#[from] task::TrainError),
}

// ─── Log generation ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LogGenConfig {
    pub task: ToyTaskSpec,
    pub count: usize,
    pub rates: RateTable,
    pub seed: u64,
    pub model_id: String,
    /// Clean examples used to train the serving model.
    pub serving_train_count: usize,
}

impl LogGenConfig {
    pub fn new(task: ToyTaskSpec, count: usize, seed: u64) -> Self {
        LogGenConfig {
            task,
            count,
            rates: perturb::default_rates(),
            seed,
            model_id: "toy-count-base".to_string(),
            serving_train_count: 120,
        }
    }
}

#[derive(Debug)]
pub struct GeneratedLogs {
    pub traces: Vec<InferenceTrace>,
    pub serving_model: ToyModel,
    pub clean_pool: Vec<Example>,
    /// Per-kind application tallies from the generator, for audits.
    pub kind_tallies: std::collections::BTreeMap<String, usize>,
}

/// Train a serving model on clean data, perturb fresh task inputs at the
/// configured rates, serve them, judge against the recorded target, and
/// decorate the sequence with timestamps, latency, duplicates, and retries.
pub fn generate_logs(cfg: &LogGenConfig) -> Result<GeneratedLogs, HarnessError> {
    if cfg.count == 0 {
        return Err(HarnessError::EmptyLogRequest);
    }
    let mut pool_rng = seeds::rng(cfg.seed, "logs/clean-pool");
    let clean_pool = generate_examples(&cfg.task, cfg.serving_train_count, &mut pool_rng)
        .expect("count checked");
    let serving_dataset = DatasetSpec::from_examples(clean_pool.clone(), 1, None, Vec::new());
    let serving_model = task::train(&serving_dataset, &HyperConfig::default())?;

    let mut input_rng = seeds::rng(cfg.seed, "logs/inputs");
    let inputs = generate_examples(&cfg.task, cfg.count, &mut input_rng).expect("count checked");
    let median = median_length(&inputs);
    let perturb_cfg = PerturbConfig {
        rates: cfg.rates.clone(),
        median_length: median,
        lexicon: Some(ConfusionLexicon::from_task(&cfg.task)),
    };

    let mut raw = Vec::with_capacity(cfg.count);
    let mut tallies: std::collections::BTreeMap<String, usize> = std::collections::BTreeMap::new();
    let mut dup_rng = seeds::rng(cfg.seed, "logs/duplicates");
    for (i, example) in inputs.iter().enumerate() {
        let mut rng = seeds::rng(cfg.seed, &format!("logs/perturb/{i}"));
        let sample = perturb::perturb_sample(example, &perturb_cfg, &mut rng);
        for k in &sample.applied {
            *tallies.entry(k.name().to_string()).or_insert(0) += 1;
        }
        let storm = sample.applied.contains(&PerturbationKind::RetryStorm);
        let id = format!("t{i:05}");
        raw.push(RawLog {
            trace: trace_for(&serving_model, &cfg.model_id, &id, &sample.noisy_input, &sample.recorded_target, &sample.applied),
            retry_storm: storm,
        });
        if sample.applied.contains(&PerturbationKind::ExactDuplicate) {
            let dup_id = format!("{id}-d0");
            raw.push(RawLog {
                trace: trace_for(&serving_model, &cfg.model_id, &dup_id, &sample.noisy_input, &sample.recorded_target, &sample.applied),
                retry_storm: false,
            });
        }
        if sample.applied.contains(&PerturbationKind::NearDuplicate) {
            let host = Example::new(
                sample.noisy_input.clone(),
                sample.recorded_target.clone(),
                Slice::Gold,
                Provenance::Synthesized,
            );
            if let Ok(variant) = make_near_duplicate(&host, &mut dup_rng) {
                let dup_id = format!("{id}-n0");
                raw.push(RawLog {
                    trace: trace_for(&serving_model, &cfg.model_id, &dup_id, &variant.input, &sample.recorded_target, &sample.applied),
                    retry_storm: false,
                });
            }
        }
    }

    let mut decorate_rng = seeds::rng(cfg.seed, "logs/decorate");
    let traces = decorate_log_sequence(raw, &DecorateConfig::default(), &mut decorate_rng);
    Ok(GeneratedLogs { traces, serving_model, clean_pool, kind_tallies: tallies })
}

fn trace_for(
    model: &ToyModel,
    model_id: &str,
    id: &str,
    input: &str,
    recorded_target: &str,
    applied: &[PerturbationKind],
) -> InferenceTrace {
    let (prediction, _) = model.predict(input);
    let (verdict, reasoning) = judge(&prediction, recorded_target);
    let corrected =
        if verdict == Verdict::Fail { Some(recorded_target.to_string()) } else { None };
    let hidden: Vec<String> = applied.iter().map(|k| k.name().to_string()).collect();
    let t = InferenceTrace::new(
        id,
        input,
        prediction,
        corrected,
        verdict,
        reasoning,
        JudgeMeta::exact_match(),
        model_id,
    );
    if hidden.is_empty() {
        t
    } else {
        t.with_hidden(HiddenLabels::new(hidden))
    }
}

fn median_length(examples: &[Example]) -> usize {
    let mut lengths: Vec<usize> = examples.iter().map(|e| e.length).collect();
    lengths.sort_unstable();
    if lengths.is_empty() {
        9
    } else {
        lengths[lengths.len() / 2]
    }
}

// ─── Cold start ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ColdStartConfig {
    pub task: ToyTaskSpec,
    pub seed: u64,
    pub budget: Budget,
    pub train_pool: usize,
    pub eval_positive: usize,
    pub eval_negative: usize,
    pub eval_boundary: usize,
}

impl ColdStartConfig {
    pub fn new(task: ToyTaskSpec, seed: u64) -> Self {
        ColdStartConfig {
            task,
            seed,
            budget: Budget::cold_start(),
            train_pool: 80,
            eval_positive: 60,
            eval_negative: 20,
            eval_boundary: 20,
        }
    }
}

/// Positive, negative, and boundary eval slices, built before any training
/// and held fixed throughout iteration.
pub fn build_cold_eval(cfg: &ColdStartConfig) -> Vec<Example> {
    let task = &cfg.task;
    let mut rng = seeds::rng(cfg.seed, "cold/eval");
    let mut eval = Vec::new();
    for i in 0..cfg.eval_positive {
        let label = &task.labels[i % task.labels.len()];
        eval.push(task::generate_example_for(task, label, &mut rng));
    }
    if let Some(neg) = &task.negative_label {
        for _ in 0..cfg.eval_negative {
            eval.push(task::generate_example_for(task, neg, &mut rng));
        }
    }
    if let Some((a, b)) = task.confusable_pairs.first() {
        use rand::seq::IndexedRandom;
        for i in 0..cfg.eval_boundary {
            let (gold, other) = if i % 2 == 0 { (a, b) } else { (b, a) };
            let (lo, hi) = task.input_length_range;
            let len = rng.random_range(lo..=hi).max(5);
            let minority = len * 2 / 5;
            let mut toks: Vec<&str> = Vec::with_capacity(len);
            for j in 0..len {
                let v = if j < minority { &task.vocab[other.as_str()] } else { &task.vocab[gold.as_str()] };
                toks.push(v.choose(&mut rng).unwrap().as_str());
            }
            use rand::seq::SliceRandom;
            toks.shuffle(&mut rng);
            eval.push(Example::new(toks.join(" "), gold.as_str(), Slice::Gold, Provenance::Benchmark));
        }
    }
    eval
}

/// Cold-start run: build the held-out eval set, assemble a 65:35 curriculum
/// from generated gold plus 2-for-1 hard negatives, and search to the score
/// threshold or budget.
pub fn run_coldstart(cfg: &ColdStartConfig) -> Result<RunArtifacts, HarnessError> {
    let task = &cfg.task;
    let eval_set = build_cold_eval(cfg);
    let eval_inputs: BTreeSet<&str> = eval_set.iter().map(|e| e.input.as_str()).collect();

    let mut pool_rng = seeds::rng(cfg.seed, "cold/pool");
    let gold_pool: Vec<Example> = generate_examples(task, cfg.train_pool, &mut pool_rng)
        .expect("pool size checked")
        .into_iter()
        .filter(|e| !eval_inputs.contains(e.input.as_str()))
        .collect();

    let gen = ToyCounterGenerator { task };
    let mut hard_rng = seeds::rng(cfg.seed, "cold/hard");
    let mut hard_pool = Vec::new();
    for e in &gold_pool {
        if task.confusable_of(&e.target).is_some() {
            if let Ok((_, h)) = curation::two_for_one(e, &gen, &mut hard_rng) {
                if !eval_inputs.contains(h.input.as_str()) {
                    hard_pool.push(h);
                }
            }
        }
    }

    let curation_cfg = CurationConfig {
        reference_lengths: eval_set.iter().map(|e| e.length).collect(),
        ..CurationConfig::cold_start()
    };
    let mut compose_rng = seeds::rng(cfg.seed, "cold/compose");
    let root_dataset =
        curation::compose_dataset(&gold_pool, &hard_pool, None, &curation_cfg, &mut compose_rng)?;

    let train_inputs: BTreeSet<&str> =
        root_dataset.examples.iter().map(|e| e.input.as_str()).collect();
    let holdout_clean = train_inputs.intersection(&eval_inputs).count() == 0;

    let root = Pipeline {
        dataset: root_dataset.clone(),
        hyper: HyperConfig::default(),
        strategy: StrategySpec::default(),
        mode: Mode::ColdStart,
    };
    let evaluator =
        ToyEvaluator { task: task.clone(), eval_set: eval_set.clone(), regression_set: Vec::new() };
    let proposer = RuleProposer {
        task: task.clone(),
        curation: curation_cfg,
        replay_parent: None,
        seed: seeds::derive(cfg.seed, "cold/proposer"),
    };
    let outcome = run_search(root, &evaluator, &proposer, &cfg.budget, Mode::ColdStart);

    let mut events = vec![RunEvent::Header {
        mode: "cold_start".to_string(),
        seed: cfg.seed,
        config_digest: format!(
            "budget={} tau={} pool={} eval={}/{}/{} holdout_clean={holdout_clean}",
            cfg.budget.max_evaluations,
            cfg.budget.tau,
            cfg.train_pool,
            cfg.eval_positive,
            cfg.eval_negative,
            cfg.eval_boundary
        ),
    }];
    push_dataset_event(&mut events, &root_dataset);
    push_iteration_events(&mut events, &outcome);
    if let Some(best) = outcome.best_pipeline() {
        if best.dataset.version != root_dataset.version {
            push_dataset_event(&mut events, &best.dataset);
        }
    }
    let best_score = outcome.graph.best_score();
    events.push(RunEvent::Final {
        verdict: if outcome.converged {
            "converged".to_string()
        } else {
            "budget exhausted before convergence".to_string()
        },
        best_score,
        version: outcome.best_pipeline().map(|p| p.dataset.version),
        converged: outcome.converged,
    });

    let exit = if outcome.converged && holdout_clean { ExitStatus::Ok } else { ExitStatus::Error };
    Ok(RunArtifacts::from_events(events, outcome.trajectory_jsonl(), exit))
}

fn push_dataset_event(events: &mut Vec<RunEvent>, d: &DatasetSpec) {
    events.push(RunEvent::DatasetVersion {
        version: d.version,
        parent_version: d.parent_version,
        size: d.len(),
        gold_frac: d.composition.gold_frac,
        hard_frac: d.composition.hard_frac,
        replay_frac: d.composition.replay_frac,
        curation_log: d.curation_log.clone(),
    });
}

fn push_iteration_events(events: &mut Vec<RunEvent>, outcome: &SearchOutcome) {
    for (i, r) in outcome.trajectory.iter().enumerate() {
        events.push(RunEvent::Iteration {
            index: i,
            node_id: r.node_id,
            kind: r.kind.clone(),
            move_desc: r.move_desc.clone(),
            score: r.score,
            regressions: r.regressions,
            accepted: r.accepted,
            rolled_back: r.rolled_back,
        });
    }
}

// ─── Production ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ProductionConfig {
    pub task: ToyTaskSpec,
    pub seed: u64,
    pub budget: Budget,
    pub model_id: String,
    /// Dataset of the deployed model's most recent run (replay source);
    /// None for base checkpoints.
    pub parent_dataset: Option<DatasetSpec>,
    pub regression_fraction: f64,
    pub probe_count: usize,
    pub gate: GateConfig,
    /// Passing set of the immediately preceding checkpoint, when one
    /// exists, for the cross-checkpoint gate.
    pub prev_checkpoint_pass_set: Option<Vec<InferenceTrace>>,
}

impl ProductionConfig {
    pub fn new(task: ToyTaskSpec, seed: u64) -> Self {
        ProductionConfig {
            task,
            seed,
            budget: Budget::production(),
            model_id: "toy-count-base".to_string(),
            parent_dataset: None,
            regression_fraction: 0.5,
            probe_count: 12,
            gate: GateConfig::default(),
            prev_checkpoint_pass_set: None,
        }
    }
}

fn cluster_summary(c: &FailureCluster) -> ClusterSummary {
    ClusterSummary {
        id: c.id.clone(),
        size: c.size,
        fixability: match c.fixability {
            Fixability::Fixable => "fixable".to_string(),
            Fixability::External => "external".to_string(),
        },
        predicted: c.characteristics.confusion.0.clone(),
        expected: c.characteristics.confusion.1.clone(),
    }
}

/// Dominant error shape across fixable clusters: one over-firing predicted
/// label across several golds reads as precision-heavy, one under-recalled
/// gold label across several predictions as recall-heavy.
fn classify_error_profile(clusters: &[FailureCluster]) -> ErrorProfile {
    use std::collections::BTreeMap;
    let mut by_pred: BTreeMap<&str, (usize, BTreeSet<&str>)> = BTreeMap::new();
    let mut by_gold: BTreeMap<&str, (usize, BTreeSet<&str>)> = BTreeMap::new();
    let mut total = 0usize;
    for c in clusters.iter().filter(|c| c.fixability == Fixability::Fixable) {
        let (pred, gold) = (&c.characteristics.confusion.0, &c.characteristics.confusion.1);
        let p = by_pred.entry(pred).or_default();
        p.0 += c.size;
        p.1.insert(gold);
        let g = by_gold.entry(gold).or_default();
        g.0 += c.size;
        g.1.insert(pred);
        total += c.size;
    }
    if total == 0 {
        return ErrorProfile::Balanced;
    }
    let dom_pred = by_pred.values().map(|(n, golds)| (*n, golds.len())).max();
    let dom_gold = by_gold.values().map(|(n, preds)| (*n, preds.len())).max();
    match (dom_pred, dom_gold) {
        (Some((np, fanout)), _) if np * 2 > total && fanout >= 2 => ErrorProfile::PrecisionHeavy,
        (_, Some((ng, fanin))) if ng * 2 > total && fanin >= 2 => ErrorProfile::RecallHeavy,
        _ => ErrorProfile::Balanced,
    }
}

/// Production improvement run: diagnose, probe, filter, compose a targeted
/// curriculum, search under the regression constraint, and deploy or roll
/// back through the gate.
pub fn run_production(
    traces: Vec<InferenceTrace>,
    cfg: &ProductionConfig,
) -> Result<RunArtifacts, HarnessError> {
    let task = &cfg.task;
    let (store, rejects) = TraceStore::from_traces(traces);
    let (fail, pass) = partition(&store);

    let mut events = vec![RunEvent::Header {
        mode: "production".to_string(),
        seed: cfg.seed,
        config_digest: format!(
            "model={} traces={} rejects={} budget={} tau={} epsilon={}",
            cfg.model_id,
            store.len(),
            rejects.len(),
            cfg.budget.max_evaluations,
            cfg.gate.tau,
            cfg.gate.epsilon
        ),
    }];

    // Deployed model: retrained from the parent dataset, or the same clean
    // base checkpoint the log generator served.
    let deployed_dataset = match &cfg.parent_dataset {
        Some(d) => d.clone(),
        None => {
            let mut pool_rng = seeds::rng(cfg.seed, "logs/clean-pool");
            let pool = generate_examples(task, 120, &mut pool_rng).expect("nonzero");
            DatasetSpec::from_examples(pool, 1, None, Vec::new())
        }
    };
    let deployed = task::train(&deployed_dataset, &HyperConfig::default())?;

    let detector = BuiltinDetector::for_task(task);
    let taxonomy = match build_taxonomy(&fail, &ConfusionClusterer { poison: Some(&detector) }) {
        Ok(t) => t,
        Err(_) => {
            events.push(RunEvent::Final {
                verdict: "no failures to diagnose".to_string(),
                best_score: None,
                version: Some(deployed_dataset.version),
                converged: true,
            });
            return Ok(RunArtifacts::from_events(events, String::new(), ExitStatus::Ok));
        }
    };
    events.push(RunEvent::Taxonomy { clusters: taxonomy.iter().map(cluster_summary).collect() });

    let fixable: Vec<&FailureCluster> =
        taxonomy.iter().filter(|c| c.fixability == Fixability::Fixable).collect();
    if fixable.is_empty() {
        events.push(RunEvent::Final {
            verdict: "no fixable failure clusters".to_string(),
            best_score: None,
            version: Some(deployed_dataset.version),
            converged: false,
        });
        return Ok(RunArtifacts::from_events(events, String::new(), ExitStatus::NoFixableFailures));
    }

    // Confirmation probes on the largest fixable clusters; failing probes
    // join the curriculum.
    let probe_gen = BoundaryProbeGenerator { task };
    let mut probe_rng = seeds::rng(cfg.seed, "prod/probes");
    let mut probe_rates: Vec<(String, f64)> = Vec::new();
    let mut probe_failures: Vec<Example> = Vec::new();
    for cluster in fixable.iter().take(3) {
        if let Ok(out) = crate::trace::probe(&deployed, cluster, &probe_gen, cfg.probe_count, &mut probe_rng)
        {
            probe_rates.push((cluster.id.clone(), out.failure_rate));
            probe_failures.extend(out.failing);
        }
    }

    // Reviewed failures in fixable clusters, minus detected poison.
    let fixable_ids: BTreeSet<&str> = fixable
        .iter()
        .flat_map(|c| c.member_ids.iter().map(String::as_str))
        .collect();
    let reviewed: Vec<&InferenceTrace> = fail
        .iter()
        .copied()
        .filter(|t| t.corrected.is_some() && fixable_ids.contains(t.id.as_str()))
        .collect();
    let filtered = curation::filter_poison(&reviewed, &detector);
    events.push(RunEvent::FilterSummary {
        kept: filtered.report.kept,
        excluded: filtered.report.excluded,
        reasons: filtered.report.reasons.clone(),
    });

    let mut gold_pool: Vec<Example> = filtered
        .kept
        .iter()
        .map(|t| {
            Example::new(
                t.input.clone(),
                t.corrected.clone().expect("reviewed"),
                Slice::Gold,
                Provenance::CorrectedFailure,
            )
        })
        .collect();
    gold_pool.extend(probe_failures);

    if gold_pool.is_empty() {
        events.push(RunEvent::Final {
            verdict: "all fixable failures were filtered as poison".to_string(),
            best_score: None,
            version: Some(deployed_dataset.version),
            converged: false,
        });
        return Ok(RunArtifacts::from_events(events, String::new(), ExitStatus::NoFixableFailures));
    }

    let gen = ToyCounterGenerator { task };
    let mut hard_rng = seeds::rng(cfg.seed, "prod/hard");
    let mut hard_pool = Vec::new();
    for e in &gold_pool {
        if task.confusable_of(&e.target).is_some() {
            if let Ok((_, h)) = curation::two_for_one(e, &gen, &mut hard_rng) {
                hard_pool.push(h);
            }
        }
    }

    // Improvement objective: the curated-verifiable failures (poisonous
    // corrections are excluded from the objective exactly as they are
    // excluded from training).
    let eval_set: Vec<Example> = gold_pool.clone();

    // Small correction pools cannot satisfy the composition bands next to a
    // replay slice; synthesize additional cluster-targeted examples until
    // the curriculum reaches a workable size.
    let target_gold = 60usize.max(gold_pool.len());
    let mut pad_rng = seeds::rng(cfg.seed, "prod/targeted-pad");
    let mut round = 0usize;
    while gold_pool.len() < target_gold && round < 64 {
        let cluster = fixable[round % fixable.len().min(3)];
        match probe_gen.generate(cluster, 4, &mut pad_rng) {
            Ok(extra) => gold_pool.extend(extra),
            Err(_) => break,
        }
        round += 1;
    }

    let profile = classify_error_profile(&taxonomy);
    let curation_cfg = CurationConfig {
        reference_lengths: eval_set.iter().map(|e| e.length).collect(),
        ..CurationConfig::production().with_profile(profile)
    };

    let replay_parent = cfg.parent_dataset.clone();
    let mut compose_rng = seeds::rng(cfg.seed, "prod/compose");
    let root_dataset = curation::compose_dataset(
        &gold_pool,
        &hard_pool,
        replay_parent.as_ref(),
        &curation_cfg,
        &mut compose_rng,
    )?;
    push_dataset_event(&mut events, &root_dataset);

    let mut reg_rng = seeds::rng(cfg.seed, "prod/regression-set");
    let regression_set = build_regression_set(
        &pass,
        cfg.regression_fraction.clamp(0.3, 1.0),
        fail.len().max(1),
        &|t| t.prediction.clone(),
        &mut reg_rng,
    )
    .unwrap_or_default();

    let root = Pipeline {
        dataset: root_dataset,
        hyper: HyperConfig::default(),
        strategy: StrategySpec::default(),
        mode: Mode::Production,
    };
    let evaluator = ToyEvaluator {
        task: task.clone(),
        eval_set: eval_set.clone(),
        regression_set: regression_set.clone(),
    };
    let proposer = RuleProposer {
        task: task.clone(),
        curation: curation_cfg,
        replay_parent,
        seed: seeds::derive(cfg.seed, "prod/proposer"),
    };
    let budget = Budget { tau: cfg.gate.tau, epsilon: cfg.gate.epsilon, ..cfg.budget.clone() };
    let outcome = run_search(root, &evaluator, &proposer, &budget, Mode::Production);
    push_iteration_events(&mut events, &outcome);

    let Some(best_id) = outcome.best else {
        events.push(RunEvent::Final {
            verdict: "search produced no feasible candidate".to_string(),
            best_score: None,
            version: Some(deployed_dataset.version),
            converged: false,
        });
        return Ok(RunArtifacts::from_events(events, outcome.trajectory_jsonl(), ExitStatus::Error));
    };
    let best = &outcome.graph.nodes[best_id];
    push_dataset_event(&mut events, &best.pipeline.dataset);

    // Deploy-or-rollback through the full gate, including the previous
    // checkpoint's eval set when available.
    let deployed_score = task::score(&deployed, &eval_set).unwrap_or(0.0);
    let candidate = evaluator_train(&cfg.task, &best.pipeline)?;
    let gate_result = gates::gate(
        &candidate,
        Some(&DeployedCheckpoint { version: deployed_dataset.version, eval_score: deployed_score }),
        &eval_set,
        &regression_set,
        cfg.prev_checkpoint_pass_set.as_deref(),
        &cfg.gate,
    )
    .unwrap_or(gates::GateResult {
        eval_score: best.score,
        regression_count: best.regressions.unwrap_or(0),
        prev_checkpoint_regressions: None,
        decision: GateDecision::RejectRollback,
        rollback_target: Some(deployed_dataset.version),
    });
    events.push(RunEvent::GateOutcome {
        version: best.pipeline.dataset.version,
        eval_score: gate_result.eval_score,
        regressions: gate_result.regression_count,
        prev_regressions: gate_result.prev_checkpoint_regressions,
        decision: match gate_result.decision {
            GateDecision::Accept => "accept".to_string(),
            GateDecision::RejectRollback => "reject_rollback".to_string(),
        },
        rollback_target: gate_result.rollback_target,
    });

    // Ledger bookkeeping and post-deployment probe rerun.
    let accepted = gate_result.decision == GateDecision::Accept;
    let final_model = if accepted { &candidate } else { &deployed };
    let mut ledger = RollbackLedger::default();
    ledger.record(LedgerEntry {
        version: deployed_dataset.version,
        dataset: deployed_dataset.clone(),
        hyper: HyperConfig::default(),
        model_snapshot: deployed.snapshot_json(),
        gate: gates::GateResult {
            eval_score: deployed_score,
            regression_count: 0,
            prev_checkpoint_regressions: None,
            decision: GateDecision::Accept,
            rollback_target: None,
        },
    });
    if accepted {
        ledger.record(LedgerEntry {
            version: best.pipeline.dataset.version,
            dataset: best.pipeline.dataset.clone(),
            hyper: best.pipeline.hyper.clone(),
            model_snapshot: candidate.snapshot_json(),
            gate: gate_result.clone(),
        });
    }

    let mut probe_rng2 = seeds::rng(cfg.seed, "prod/probes-after");
    for (cluster_id, before) in &probe_rates {
        let after = taxonomy
            .iter()
            .find(|c| &c.id == cluster_id)
            .and_then(|c| {
                crate::trace::probe(final_model, c, &probe_gen, cfg.probe_count, &mut probe_rng2).ok()
            })
            .map(|o| o.failure_rate);
        events.push(RunEvent::ProbeOutcome {
            cluster_id: cluster_id.clone(),
            rate_before: *before,
            rate_after: after,
        });
    }

    events.push(RunEvent::Final {
        verdict: if accepted { "accepted".to_string() } else { "rolled back".to_string() },
        best_score: Some(gate_result.eval_score),
        version: Some(ledger.latest().expect("ledger nonempty").version),
        converged: outcome.converged,
    });
    let exit = if accepted { ExitStatus::Ok } else { ExitStatus::Error };
    Ok(RunArtifacts::from_events(events, outcome.trajectory_jsonl(), exit))
}

fn evaluator_train(task: &ToyTaskSpec, p: &Pipeline) -> Result<ToyModel, HarnessError> {
    let dataset = match p.strategy.supervision_format {
        crate::pipeline::SupervisionFormat::Direct => p.dataset.clone(),
        crate::pipeline::SupervisionFormat::ChainOfThought => {
            let teacher = curation::ToyTeacher { task };
            DatasetSpec::from_examples(
                curation::annotate_chain_of_thought(&p.dataset.examples, &teacher),
                p.dataset.version,
                p.dataset.parent_version,
                p.dataset.curation_log.clone(),
            )
        }
    };
    Ok(task::train(&dataset, &p.hyper)?)
}

// ─── Stage protocol ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    pub poison_rate: f64,
    pub log_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    pub stages: Vec<StageSpec>,
    pub split: (f64, f64),
    pub iterations_per_stage: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            stages: vec![
                StageSpec { poison_rate: 0.15, log_count: 500 },
                StageSpec { poison_rate: 0.25, log_count: 500 },
                StageSpec { poison_rate: 0.40, log_count: 500 },
            ],
            split: (0.7, 0.3),
            iterations_per_stage: 2,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.stages.is_empty() {
            return Err(HarnessError::InvalidStageConfig("at least one stage required".to_string()));
        }
        for w in self.stages.windows(2) {
            if w[1].poison_rate <= w[0].poison_rate {
                return Err(HarnessError::InvalidStageConfig(
                    "poison rates must strictly increase".to_string(),
                ));
            }
        }
        if (self.split.0 + self.split.1 - 1.0).abs() > 1e-9 {
            return Err(HarnessError::InvalidStageConfig("split fractions must sum to 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub checkpoint: String,
    pub poison_rate: f64,
    pub adaptive_score: f64,
    pub naive_score: f64,
    pub adaptive_accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrajectory {
    pub seed: u64,
    pub checkpoints: Vec<CheckpointRecord>,
}

impl StageTrajectory {
    pub fn adaptive_non_decreasing(&self) -> bool {
        self.checkpoints.windows(2).all(|w| w[1].adaptive_score >= w[0].adaptive_score)
    }

    pub fn final_gap(&self) -> f64 {
        self.checkpoints
            .last()
            .map(|c| c.adaptive_score - c.naive_score)
            .unwrap_or(0.0)
    }
}

/// One generated stage: identical across arms by construction.
struct StageLogs {
    train: Vec<StageSample>,
    test: Vec<StageSample>,
}

#[derive(Clone)]
struct StageSample {
    id: String,
    noisy_input: String,
    /// Target as recorded by the serving stack (label flips applied).
    recorded_target: String,
    /// Benchmark ground truth, used only for eval scoring and the
    /// simulated annotator.
    true_target: String,
    toxicity: SampleToxicity,
}

fn generate_stage(
    task: &ToyTaskSpec,
    stage_idx: usize,
    spec: &StageSpec,
    split: (f64, f64),
    seed: u64,
) -> StageLogs {
    let mut input_rng = seeds::rng(seed, &format!("stage{stage_idx}/inputs"));
    let inputs = generate_examples(task, spec.log_count, &mut input_rng).expect("nonzero");
    let rates = perturb::rates_with_poison_rate(&perturb::default_rates(), spec.poison_rate);
    let cfg = PerturbConfig {
        rates,
        median_length: median_length(&inputs),
        lexicon: Some(ConfusionLexicon::from_task(task)),
    };
    let mut samples = Vec::with_capacity(inputs.len());
    for (i, e) in inputs.iter().enumerate() {
        let mut rng = seeds::rng(seed, &format!("stage{stage_idx}/perturb/{i}"));
        let p = perturb::perturb_sample(e, &cfg, &mut rng);
        samples.push(StageSample {
            id: format!("s{stage_idx}-{i:04}"),
            noisy_input: p.noisy_input,
            recorded_target: p.recorded_target,
            true_target: e.target.clone(),
            toxicity: p.toxicity,
        });
    }
    let train_n = (split.0 * samples.len() as f64).round() as usize;
    let test = samples.split_off(train_n.min(samples.len()));
    StageLogs { train: samples, test }
}

/// Serve a model over stage samples and judge against recorded targets.
fn serve(model: &ToyModel, model_id: &str, samples: &[StageSample]) -> Vec<InferenceTrace> {
    samples
        .iter()
        .map(|s| {
            let (prediction, _) = model.predict(&s.noisy_input);
            let (verdict, reasoning) = judge(&prediction, &s.recorded_target);
            let corrected = if verdict == Verdict::Fail {
                Some(s.recorded_target.clone())
            } else {
                None
            };
            InferenceTrace::new(
                s.id.clone(),
                s.noisy_input.clone(),
                prediction,
                corrected,
                verdict,
                reasoning,
                JudgeMeta::exact_match(),
                model_id,
            )
        })
        .collect()
}

/// The realistic correction model for the naive arm: a single categorical
/// draw per poisonous failure (0.30 unreviewed / 0.50 wrong / 0.20 right),
/// 30% unreviewed for fixable-noise failures, clean failures always
/// corrected. Unreviewed failures train on the model's own wrong output.
/// This simulation legitimately reads the generator's toxicity labels; the
/// adaptive arm never does.
fn naive_correction(
    sample: &StageSample,
    trace: &InferenceTrace,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> String {
    if trace.verdict == Verdict::Pass {
        return trace.prediction.clone();
    }
    match sample.toxicity {
        SampleToxicity::Clean => sample.true_target.clone(),
        SampleToxicity::Fixable => {
            if rng.random::<f64>() < 0.30 {
                trace.prediction.clone()
            } else {
                sample.true_target.clone()
            }
        }
        SampleToxicity::Poisonous => {
            let u = rng.random::<f64>();
            if u < 0.30 {
                trace.prediction.clone()
            } else if u < 0.80 {
                // The annotator answers the corrupted input as recorded.
                if sample.recorded_target != sample.true_target {
                    sample.recorded_target.clone()
                } else if trace.prediction != sample.true_target {
                    trace.prediction.clone()
                } else {
                    sample.recorded_target.clone()
                }
            } else {
                sample.true_target.clone()
            }
        }
    }
}

/// Counts of the naive annotator's draw outcomes, for rate audits.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NaiveDrawTally {
    pub unreviewed: usize,
    pub wrong: usize,
    pub right: usize,
}

/// Everything one seed's stage run produced, including the curated
/// datasets for downstream invariant checks.
#[derive(Debug)]
pub struct StageRunOutput {
    pub trajectory: StageTrajectory,
    pub events: Vec<RunEvent>,
    /// Every dataset the adaptive arm composed, deployed or not.
    pub datasets: Vec<DatasetSpec>,
    /// The fixed eval set (union of stage test splits).
    pub eval_set: Vec<Example>,
}

/// Run the stage-based protocol for one seed: an adaptive arm with poison
/// filtering, contrastive pairs, replay, and rollback, against a naive arm
/// that retrains on everything. Both arms consume identical stage logs and
/// are scored on the same fixed eval set (the union of stage test splits).
pub fn run_stages_single(
    stage_cfg: &StageConfig,
    task: &ToyTaskSpec,
    seed: u64,
) -> Result<StageRunOutput, HarnessError> {
    stage_cfg.validate()?;
    let model_id = "toy-count-base";

    // All stage logs and the eval union are fixed before checkpoint 1.
    let stages: Vec<StageLogs> = stage_cfg
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| generate_stage(task, i, s, stage_cfg.split, seed))
        .collect();
    let eval_set: Vec<Example> = stages
        .iter()
        .flat_map(|s| s.test.iter())
        .map(|s| {
            Example::new(s.noisy_input.clone(), s.true_target.clone(), Slice::Gold, Provenance::Benchmark)
        })
        .collect();

    let mut events = vec![RunEvent::Header {
        mode: "stages".to_string(),
        seed,
        config_digest: format!(
            "stages={} split={}/{} iters={} eval={}",
            stage_cfg.stages.len(),
            stage_cfg.split.0,
            stage_cfg.split.1,
            stage_cfg.iterations_per_stage,
            eval_set.len()
        ),
    }];

    // C1: both arms start from the same clean pool; the adaptive arm
    // curates it (hard negatives and balance), the naive arm trains raw.
    let mut pool_rng = seeds::rng(seed, "stages/clean-pool");
    let clean_pool = generate_examples(task, 60, &mut pool_rng).expect("nonzero");
    let detector = BuiltinDetector::for_task(task);
    let gen = ToyCounterGenerator { task };

    let mut hard_rng = seeds::rng(seed, "stages/c1-hard");
    let mut hard_pool = Vec::new();
    for e in &clean_pool {
        if task.confusable_of(&e.target).is_some() {
            if let Ok((_, h)) = curation::two_for_one(e, &gen, &mut hard_rng) {
                hard_pool.push(h);
            }
        }
    }
    let cold_cfg = CurationConfig {
        reference_lengths: eval_set.iter().map(|e| e.length).collect(),
        ..CurationConfig::cold_start()
    };
    let mut compose_rng = seeds::rng(seed, "stages/c1-compose");
    let mut adaptive_dataset =
        curation::compose_dataset(&clean_pool, &hard_pool, None, &cold_cfg, &mut compose_rng)?;
    let mut datasets = vec![adaptive_dataset.clone()];
    push_dataset_event(&mut events, &adaptive_dataset);
    // Both arms start from the same stock recipe; only the adaptive arm's
    // second iteration may halve epochs when a retrain regresses.
    let hyper = HyperConfig { epochs: 4, learning_rate: 0.02, ..HyperConfig::default() };
    let mut adaptive_model = task::train(&adaptive_dataset, &hyper)?;
    let mut adaptive_score = task::score(&adaptive_model, &eval_set).unwrap_or(0.0);

    // Naive arm: single-shot retrain per stage on the clean base plus the
    // latest stage's incoming logs, no filtering, no rollback.
    let naive_dataset = DatasetSpec::from_examples(clean_pool.clone(), 1, None, Vec::new());
    let mut naive_model = task::train(&naive_dataset, &hyper)?;
    let mut naive_score = task::score(&naive_model, &eval_set).unwrap_or(0.0);

    let mut trajectory = StageTrajectory { seed, checkpoints: Vec::new() };
    trajectory.checkpoints.push(CheckpointRecord {
        checkpoint: "C1".to_string(),
        poison_rate: 0.0,
        adaptive_score,
        naive_score,
        adaptive_accepted: true,
    });
    events.push(RunEvent::StageCheckpoint {
        checkpoint: "C1".to_string(),
        poison_rate: 0.0,
        adaptive_score,
        naive_score,
        adaptive_accepted: true,
    });

    // Accumulated curated pools for the adaptive arm.
    let mut adaptive_gold: Vec<Example> = clean_pool.clone();
    let mut adaptive_hard: Vec<Example> = hard_pool;

    for (i, stage) in stages.iter().enumerate() {
        let spec = &stage_cfg.stages[i];

        // ── adaptive arm ──
        let adaptive_traces = serve(&adaptive_model, model_id, &stage.train);
        let fail_refs: Vec<&InferenceTrace> =
            adaptive_traces.iter().filter(|t| t.verdict == Verdict::Fail).collect();
        let filtered = curation::filter_poison(&fail_refs, &detector);
        events.push(RunEvent::FilterSummary {
            kept: filtered.report.kept,
            excluded: filtered.report.excluded,
            reasons: filtered.report.reasons.clone(),
        });

        let mut stage_hard_rng = seeds::rng(seed, &format!("stages/{i}/hard"));
        for t in &filtered.kept {
            let corrected = Example::new(
                t.input.clone(),
                t.corrected.clone().expect("kept failures are reviewed"),
                Slice::Gold,
                Provenance::CorrectedFailure,
            );
            if task.confusable_of(&corrected.target).is_some() {
                if let Ok((g, h)) = curation::two_for_one(&corrected, &gen, &mut stage_hard_rng) {
                    adaptive_gold.push(g);
                    adaptive_hard.push(h);
                    continue;
                }
            }
            adaptive_gold.push(corrected);
        }

        let prod_cfg = CurationConfig {
            reference_lengths: eval_set.iter().map(|e| e.length).collect(),
            ..CurationConfig::production()
        };
        let mut accepted = false;
        for iter in 0..stage_cfg.iterations_per_stage {
            let mut rng = seeds::rng(seed, &format!("stages/{i}/compose/{iter}"));
            let candidate_dataset = match curation::compose_dataset(
                &adaptive_gold,
                &adaptive_hard,
                Some(&adaptive_dataset),
                &prod_cfg,
                &mut rng,
            ) {
                Ok(d) => {
                    datasets.push(d.clone());
                    d
                }
                Err(_) => break,
            };
            // Second iteration halves epochs: noise amplifies with weight.
            let iter_hyper = if iter == 0 {
                hyper.clone()
            } else {
                HyperConfig { epochs: (hyper.epochs / 2).max(1), ..hyper.clone() }
            };
            let candidate = task::train(&candidate_dataset, &iter_hyper)?;
            let score = task::score(&candidate, &eval_set).unwrap_or(0.0);
            if score > adaptive_score {
                adaptive_model = candidate;
                adaptive_score = score;
                adaptive_dataset = candidate_dataset;
                push_dataset_event(&mut events, &adaptive_dataset);
                accepted = true;
                break;
            }
        }

        // ── naive arm ──
        // Single-shot retrain on the latest stage's incoming logs with the
        // stock recipe: no filtering, no iteration, no rollback. The
        // deployed checkpoint is whatever the newest data produced.
        let naive_traces = serve(&naive_model, model_id, &stage.train);
        let mut draw_rng = seeds::rng(seed, &format!("stages/{i}/naive-corrections"));
        let naive_pairs: Vec<Example> = stage
            .train
            .iter()
            .zip(&naive_traces)
            .map(|(sample, trace)| {
                let target = naive_correction(sample, trace, &mut draw_rng);
                Example::new(
                    sample.noisy_input.clone(),
                    target,
                    Slice::Gold,
                    Provenance::CorrectedFailure,
                )
            })
            .collect();
        let nd = DatasetSpec::from_examples(naive_pairs, (i + 2) as u32, None, Vec::new());
        naive_model = task::train(&nd, &hyper)?;
        naive_score = task::score(&naive_model, &eval_set).unwrap_or(0.0);

        let checkpoint = format!("C{}", i + 2);
        trajectory.checkpoints.push(CheckpointRecord {
            checkpoint: checkpoint.clone(),
            poison_rate: spec.poison_rate,
            adaptive_score,
            naive_score,
            adaptive_accepted: accepted,
        });
        events.push(RunEvent::StageCheckpoint {
            checkpoint,
            poison_rate: spec.poison_rate,
            adaptive_score,
            naive_score,
            adaptive_accepted: accepted,
        });
    }

    events.push(RunEvent::Final {
        verdict: format!("final gap {:+.4}", trajectory.final_gap()),
        best_score: Some(adaptive_score),
        version: Some(adaptive_dataset.version),
        converged: trajectory.adaptive_non_decreasing(),
    });
    Ok(StageRunOutput { trajectory, events, datasets, eval_set })
}

/// Stage protocol across seeds; arms and seeds are independent streams.
pub fn run_stages(
    stage_cfg: &StageConfig,
    task: &ToyTaskSpec,
    seeds_list: &[u64],
) -> Result<(Vec<StageTrajectory>, RunArtifacts), HarnessError> {
    let mut trajectories = Vec::new();
    let mut events = Vec::new();
    for &seed in seeds_list {
        let mut out = run_stages_single(stage_cfg, task, seed)?;
        events.append(&mut out.events);
        trajectories.push(out.trajectory);
    }
    let all_monotone = trajectories.iter().all(|t| t.adaptive_non_decreasing());
    let exit = if all_monotone { ExitStatus::Ok } else { ExitStatus::Error };
    let trajectory_jsonl = {
        let mut s = String::new();
        for t in &trajectories {
            s.push_str(&serde_json::to_string(t).expect("serializes"));
            s.push('\n');
        }
        s
    };
    Ok((trajectories, RunArtifacts::from_events(events, trajectory_jsonl, exit)))
}
