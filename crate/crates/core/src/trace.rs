//! Judged inference traces: ingestion, partitioning, querying, failure
//! taxonomy, regression sets, confirmation probes, and model lineage.
//!
//! The store supports concurrent reads; ingestion is single-writer. Hidden
//! ground-truth labels ride along on synthetic traces but are opaque here —
//! see [`crate::audit`]. Nothing in this module reads them.

use crate::audit::HiddenLabels;
use crate::pipeline::{DatasetSpec, Example, Provenance, Slice};
use crate::task::{ToyModel, ToyTaskSpec, Verdict};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use thiserror::Error;

/// Judge configuration recorded with every verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeMeta {
    pub judge_id: String,
    pub criteria: String,
    pub template_id: String,
}

impl JudgeMeta {
    pub fn exact_match() -> Self {
        JudgeMeta {
            judge_id: "exact-match-v1".to_string(),
            criteria: "label equality".to_string(),
            template_id: "deterministic".to_string(),
        }
    }

    /// Marker for failures that never received review (timeouts, skipped
    /// annotation). A fail verdict without a correction must carry this.
    pub fn unreviewed(reason: &str) -> Self {
        JudgeMeta {
            judge_id: "none".to_string(),
            criteria: "unreviewed".to_string(),
            template_id: reason.to_string(),
        }
    }
}

/// One judged production inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub id: String,
    pub input: String,
    pub prediction: String,
    pub corrected: Option<String>,
    pub verdict: Verdict,
    pub judge_reasoning: String,
    pub judge_meta: JudgeMeta,
    pub model_id: String,
    pub ts: u64,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden: Option<HiddenLabels>,
}

impl InferenceTrace {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        input: impl Into<String>,
        prediction: impl Into<String>,
        corrected: Option<String>,
        verdict: Verdict,
        judge_reasoning: impl Into<String>,
        judge_meta: JudgeMeta,
        model_id: impl Into<String>,
    ) -> Self {
        InferenceTrace {
            id: id.into(),
            input: input.into(),
            prediction: prediction.into(),
            corrected,
            verdict,
            judge_reasoning: judge_reasoning.into(),
            judge_meta,
            model_id: model_id.into(),
            ts: 0,
            latency_ms: 0,
            hidden: None,
        }
    }

    /// Attach ground-truth perturbation labels (synthetic generation only).
    pub fn with_hidden(mut self, hidden: HiddenLabels) -> Self {
        self.hidden = Some(hidden);
        self
    }

    /// Strip the hidden labels, e.g. before exporting a diagnosis view.
    pub fn without_hidden(mut self) -> Self {
        self.hidden = None;
        self
    }

    pub(crate) fn hidden_opaque(&self) -> Option<&HiddenLabels> {
        self.hidden.as_ref()
    }

    /// Failure that never received a correction.
    pub fn is_unreviewed(&self) -> bool {
        self.verdict == Verdict::Fail
            && self.corrected.is_none()
            && self.judge_meta.criteria == "unreviewed"
    }
}

/// A rejected ingest line with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestReject {
    pub line: usize,
    pub reason: String,
}

/// In-memory trace store indexed by id.
#[derive(Debug, Clone, Default)]
pub struct TraceStore {
    traces: Vec<InferenceTrace>,
    by_id: BTreeMap<String, usize>,
}

impl TraceStore {
    /// Ingest a JSONL stream. Malformed records, duplicate ids, and fail
    /// verdicts without a correction or unreviewed marker are rejected with
    /// their line number; ingestion continues past them.
    pub fn ingest<R: BufRead>(reader: R) -> std::io::Result<(TraceStore, Vec<IngestReject>)> {
        let mut store = TraceStore::default();
        let mut rejects = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<InferenceTrace>(&line) {
                Ok(t) => {
                    if let Err(reason) = store.insert(t) {
                        rejects.push(IngestReject { line: lineno, reason });
                    }
                }
                Err(e) => rejects.push(IngestReject { line: lineno, reason: format!("malformed: {e}") }),
            }
        }
        Ok((store, rejects))
    }

    /// Build a store from already-constructed traces, applying the same
    /// validation as [`TraceStore::ingest`].
    pub fn from_traces(traces: Vec<InferenceTrace>) -> (TraceStore, Vec<IngestReject>) {
        let mut store = TraceStore::default();
        let mut rejects = Vec::new();
        for (i, t) in traces.into_iter().enumerate() {
            if let Err(reason) = store.insert(t) {
                rejects.push(IngestReject { line: i + 1, reason });
            }
        }
        (store, rejects)
    }

    fn insert(&mut self, t: InferenceTrace) -> Result<(), String> {
        if self.by_id.contains_key(&t.id) {
            return Err(format!("DuplicateId: {}", t.id));
        }
        if t.verdict == Verdict::Fail && t.corrected.is_none() && !t.is_unreviewed() {
            return Err(format!("fail verdict without correction or unreviewed marker: {}", t.id));
        }
        self.by_id.insert(t.id.clone(), self.traces.len());
        self.traces.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&InferenceTrace> {
        self.by_id.get(id).map(|&i| &self.traces[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &InferenceTrace> {
        self.traces.iter()
    }

    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for t in &self.traces {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Split the store by verdict into a disjoint cover (failures, passes).
pub fn partition(store: &TraceStore) -> (Vec<&InferenceTrace>, Vec<&InferenceTrace>) {
    let mut fail = Vec::new();
    let mut pass = Vec::new();
    for t in store.iter() {
        match t.verdict {
            Verdict::Fail => fail.push(t),
            Verdict::Pass => pass.push(t),
        }
    }
    (fail, pass)
}

// ─── Query ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Id,
    Input,
    Prediction,
    Corrected,
    Verdict,
    ModelId,
    JudgeId,
}

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("unknown field: {0}")]
    UnknownField(String),
}

impl Field {
    pub fn parse(s: &str) -> Result<Field, QueryError> {
        match s {
            "id" => Ok(Field::Id),
            "input" => Ok(Field::Input),
            "prediction" => Ok(Field::Prediction),
            "corrected" => Ok(Field::Corrected),
            "verdict" => Ok(Field::Verdict),
            "model_id" => Ok(Field::ModelId),
            "judge_id" => Ok(Field::JudgeId),
            other => Err(QueryError::UnknownField(other.to_string())),
        }
    }

    fn value<'a>(&self, t: &'a InferenceTrace) -> &'a str {
        match self {
            Field::Id => &t.id,
            Field::Input => &t.input,
            Field::Prediction => &t.prediction,
            Field::Corrected => t.corrected.as_deref().unwrap_or(""),
            Field::Verdict => match t.verdict {
                Verdict::Pass => "pass",
                Verdict::Fail => "fail",
            },
            Field::ModelId => &t.model_id,
            Field::JudgeId => &t.judge_meta.judge_id,
        }
    }
}

/// Grouping key for aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    Field(Field),
    /// `prediction->corrected` pair, the shape of a confusion taxonomy.
    ConfusionPair,
}

/// In-process filter/aggregate over trace fields. Pure read.
#[derive(Debug, Clone, Default)]
pub struct TraceQuery {
    pub filters: Vec<(Field, String)>,
    pub group_by: Option<GroupKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryOutput {
    /// Matching trace ids in store order.
    pub ids: Vec<String>,
    /// Group counts, descending by count then ascending by key.
    pub groups: Option<Vec<(String, usize)>>,
}

pub fn query(store: &TraceStore, q: &TraceQuery) -> QueryOutput {
    let rows: Vec<&InferenceTrace> = store
        .iter()
        .filter(|t| q.filters.iter().all(|(f, want)| f.value(t) == want))
        .collect();
    let groups = q.group_by.map(|key| {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in &rows {
            let k = match key {
                GroupKey::Field(f) => f.value(t).to_string(),
                GroupKey::ConfusionPair => {
                    format!("{}->{}", t.prediction, t.corrected.as_deref().unwrap_or("?"))
                }
            };
            *counts.entry(k).or_insert(0) += 1;
        }
        let mut v: Vec<(String, usize)> = counts.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    });
    QueryOutput { ids: rows.iter().map(|t| t.id.clone()).collect(), groups }
}

// ─── Failure taxonomy ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fixability {
    Fixable,
    External,
}

/// Summary statistics of a failure cluster's inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub length_min: usize,
    pub length_mean: f64,
    pub length_max: usize,
    /// Dominant (predicted, expected) pair.
    pub confusion: (String, String),
    pub top_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCluster {
    pub id: String,
    pub member_ids: Vec<String>,
    pub size: usize,
    pub characteristics: ClusterStats,
    pub fixability: Fixability,
}

/// Poison check used to mark clusters external. Implemented by the curation
/// module's detector; kept as a trait so the taxonomy stays decoupled.
pub trait PoisonPredicate {
    fn is_poison(&self, t: &InferenceTrace) -> bool;
}

pub trait Clusterer {
    fn cluster(&self, failures: &[&InferenceTrace]) -> Vec<FailureCluster>;
}

#[derive(Debug, Error, PartialEq)]
pub enum TaxonomyError {
    #[error("empty failure set")]
    EmptyFailureSet,
}

/// Partition failures into clusters. The result is disjoint and covers the
/// input; cluster sizes always sum to the failure count.
pub fn build_taxonomy(
    failures: &[&InferenceTrace],
    clusterer: &dyn Clusterer,
) -> Result<Vec<FailureCluster>, TaxonomyError> {
    if failures.is_empty() {
        return Err(TaxonomyError::EmptyFailureSet);
    }
    Ok(clusterer.cluster(failures))
}

/// Groups classification failures by (predicted, expected) pair. A cluster
/// is external when its corrections are absent or when more than half its
/// members match the poison predicates.
pub struct ConfusionClusterer<'a> {
    pub poison: Option<&'a dyn PoisonPredicate>,
}

impl Clusterer for ConfusionClusterer<'_> {
    fn cluster(&self, failures: &[&InferenceTrace]) -> Vec<FailureCluster> {
        let mut groups: BTreeMap<(String, String), Vec<&InferenceTrace>> = BTreeMap::new();
        for t in failures {
            let key = match &t.corrected {
                Some(c) => (t.prediction.clone(), c.clone()),
                None => ("?".to_string(), "?".to_string()),
            };
            groups.entry(key).or_default().push(t);
        }
        let mut clusters: Vec<FailureCluster> = groups
            .into_iter()
            .map(|((pred, gold), members)| {
                let unreviewed = pred == "?";
                let poisoned = self
                    .poison
                    .map(|p| members.iter().filter(|t| p.is_poison(t)).count())
                    .unwrap_or(0);
                let fixability = if unreviewed || poisoned * 2 > members.len() {
                    Fixability::External
                } else {
                    Fixability::Fixable
                };
                let lengths: Vec<usize> =
                    members.iter().map(|t| t.input.split_whitespace().count()).collect();
                let mut token_counts: BTreeMap<&str, usize> = BTreeMap::new();
                for t in &members {
                    for tok in t.input.split_whitespace() {
                        *token_counts.entry(tok).or_insert(0) += 1;
                    }
                }
                let mut ranked: Vec<(&str, usize)> = token_counts.into_iter().collect();
                ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
                let top_tokens = ranked.into_iter().take(5).map(|(t, _)| t.to_string()).collect();
                FailureCluster {
                    id: if unreviewed {
                        "unreviewed".to_string()
                    } else {
                        format!("confusion:{pred}->{gold}")
                    },
                    member_ids: members.iter().map(|t| t.id.clone()).collect(),
                    size: members.len(),
                    characteristics: ClusterStats {
                        length_min: lengths.iter().copied().min().unwrap_or(0),
                        length_mean: lengths.iter().sum::<usize>() as f64 / lengths.len().max(1) as f64,
                        length_max: lengths.iter().copied().max().unwrap_or(0),
                        confusion: (pred, gold),
                        top_tokens,
                    },
                    fixability,
                }
            })
            .collect();
        clusters.sort_by(|a, b| b.size.cmp(&a.size).then(a.id.cmp(&b.id)));
        clusters
    }
}

// ─── Regression set ─────────────────────────────────────────────────────

#[derive(Debug, Error, PartialEq)]
pub enum RegressionSetError {
    #[error("empty passing set")]
    EmptyPassingSet,
    #[error("fraction {0} outside [0.3, 1.0]")]
    BadFraction(f64),
}

/// Stratified sample of passing traces sized `fraction * fail_count`.
/// Every stratum with at least one passing trace is represented.
pub fn build_regression_set(
    passing: &[&InferenceTrace],
    fraction: f64,
    fail_count: usize,
    stratify: &dyn Fn(&InferenceTrace) -> String,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<InferenceTrace>, RegressionSetError> {
    if !(0.3..=1.0).contains(&fraction) {
        return Err(RegressionSetError::BadFraction(fraction));
    }
    if passing.is_empty() {
        return Err(RegressionSetError::EmptyPassingSet);
    }
    let target = ((fraction * fail_count as f64).round() as usize).max(1);

    let mut strata: BTreeMap<String, Vec<&InferenceTrace>> = BTreeMap::new();
    for t in passing {
        strata.entry(stratify(t)).or_default().push(t);
    }

    // Proportional allocation by largest remainder, minimum one per stratum.
    let total = passing.len() as f64;
    let mut alloc: Vec<(String, usize, f64)> = strata
        .iter()
        .map(|(k, v)| {
            let exact = target as f64 * v.len() as f64 / total;
            (k.clone(), (exact.floor() as usize).max(1).min(v.len()), exact - exact.floor())
        })
        .collect();
    let mut used: usize = alloc.iter().map(|(_, n, _)| *n).sum();
    alloc.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let mut i = 0;
    while used < target && i < alloc.len() {
        let cap = strata[&alloc[i].0].len();
        if alloc[i].1 < cap {
            alloc[i].1 += 1;
            used += 1;
        }
        i += 1;
        if i == alloc.len() {
            // another round if capacity remains
            if alloc.iter().all(|(k, n, _)| *n >= strata[k].len()) {
                break;
            }
            i = 0;
        }
    }

    let mut out = Vec::new();
    alloc.sort_by(|a, b| a.0.cmp(&b.0));
    for (key, n, _) in alloc {
        let mut members: Vec<&InferenceTrace> = strata[&key].clone();
        members.shuffle(rng);
        out.extend(members.into_iter().take(n).cloned());
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

// ─── Confirmation probes ────────────────────────────────────────────────

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("cluster is not fixable")]
    NotFixable,
    #[error("n must be >= 1")]
    ZeroCount,
    #[error("no probe generator for cluster characteristic: {0}")]
    UnsupportedProbe(String),
}

pub trait ProbeGenerator {
    fn generate(
        &self,
        cluster: &FailureCluster,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Example>, ProbeError>;
}

/// Boundary-input generator: mixes the confusable labels' vocabularies,
/// leaning toward the expected label so the gold answer stays well defined.
pub struct BoundaryProbeGenerator<'a> {
    pub task: &'a ToyTaskSpec,
}

impl ProbeGenerator for BoundaryProbeGenerator<'_> {
    fn generate(
        &self,
        cluster: &FailureCluster,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Example>, ProbeError> {
        let (pred, gold) = &cluster.characteristics.confusion;
        if !self.task.vocab.contains_key(gold) {
            return Err(ProbeError::UnsupportedProbe(format!("unknown label {gold}")));
        }
        let other = if self.task.vocab.contains_key(pred) && pred != gold {
            pred.clone()
        } else {
            self.task
                .confusable_of(gold)
                .map(str::to_string)
                .ok_or_else(|| ProbeError::UnsupportedProbe(format!("no counterpart for {gold}")))?
        };
        let gold_vocab = &self.task.vocab[gold];
        let other_vocab = &self.task.vocab[&other];
        let (lo, hi) = self.task.input_length_range;
        let mut out = Vec::with_capacity(n);
        use rand::seq::IndexedRandom;
        use rand::Rng;
        for _ in 0..n {
            let len = rng.random_range(lo..=hi).max(3);
            let n_other = (len * 2) / 5; // 40% from the confused label
            let mut tokens = Vec::with_capacity(len);
            for i in 0..len {
                let v = if i < n_other { other_vocab } else { gold_vocab };
                tokens.push(v.choose(rng).unwrap().as_str());
            }
            tokens.shuffle(rng);
            out.push(Example::new(tokens.join(" "), gold.as_str(), Slice::Gold, Provenance::Probe));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub probes: Vec<Example>,
    pub failing: Vec<Example>,
    pub failure_rate: f64,
}

/// Generate `n` targeted probes for a fixable cluster and measure the
/// model's failure rate on them. Failing probes feed the curriculum.
pub fn probe(
    model: &ToyModel,
    cluster: &FailureCluster,
    generator: &dyn ProbeGenerator,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeOutcome, ProbeError> {
    if cluster.fixability != Fixability::Fixable {
        return Err(ProbeError::NotFixable);
    }
    if n == 0 {
        return Err(ProbeError::ZeroCount);
    }
    let probes = generator.generate(cluster, n, rng)?;
    let failing: Vec<Example> = probes
        .iter()
        .filter(|e| model.predict(&e.input).0 != e.target)
        .cloned()
        .collect();
    let failure_rate = failing.len() as f64 / probes.len() as f64;
    Ok(ProbeOutcome { probes, failing, failure_rate })
}

// ─── Model lineage ──────────────────────────────────────────────────────

#[derive(Debug, Error, PartialEq)]
pub enum LineageError {
    #[error("unknown model id: {0}")]
    UnknownModel(String),
}

/// Maps deployed model ids to the dataset of their most recent training
/// run. Base checkpoints have no parent dataset.
#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    base_ids: BTreeSet<String>,
    runs: BTreeMap<String, DatasetSpec>,
}

impl ModelRegistry {
    pub fn register_base(&mut self, model_id: impl Into<String>) {
        self.base_ids.insert(model_id.into());
    }

    /// Record (or overwrite with) the most recent run for a model id.
    pub fn register_run(&mut self, model_id: impl Into<String>, dataset: DatasetSpec) {
        self.runs.insert(model_id.into(), dataset);
    }

    /// Parent dataset of a deployed model: empty for base checkpoints, the
    /// most recent run's dataset for fine-tuned ids.
    pub fn parent_lineage(&self, model_id: &str) -> Result<Option<&DatasetSpec>, LineageError> {
        if let Some(d) = self.runs.get(model_id) {
            return Ok(Some(d));
        }
        if self.base_ids.contains(model_id) {
            return Ok(None);
        }
        Err(LineageError::UnknownModel(model_id.to_string()))
    }
}
