//! Acceptance machinery: score and regression gates, the cross-checkpoint
//! check, convergence tests, confidence calibration, correction propagation,
//! and the rollback ledger.
//!
//! The regression budget is an absolute count, never a rate: doubling the
//! regression set does not move the accept boundary. Deployment under these
//! gates ratchets — the deployed score sequence never decreases.

use crate::pipeline::{DatasetSpec, Example, HyperConfig};
use crate::task::{self, ToyModel, Verdict};
use crate::trace::InferenceTrace;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GateError {
    #[error("empty regression set")]
    EmptyRegressionSet,
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("unknown version: {0}")]
    UnknownVersion(u32),
    #[error("restored snapshot differs from ledger for version {0}")]
    SnapshotMismatch(u32),
    #[error("empty eval set")]
    EmptyEvalSet,
}

/// Exact count of previously correct examples the model now answers
/// incorrectly. The expected answer of a passing trace is its recorded
/// prediction.
pub fn regression_count(model: &ToyModel, regression_set: &[InferenceTrace]) -> Result<u64, GateError> {
    if regression_set.is_empty() {
        return Err(GateError::EmptyRegressionSet);
    }
    let mut count = 0u64;
    for t in regression_set {
        let (pred, _) = model.predict(&t.input);
        if task::judge(&pred, &t.prediction).0 == Verdict::Fail {
            count += 1;
        }
    }
    Ok(count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Accept,
    RejectRollback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub eval_score: f64,
    pub regression_count: u64,
    pub prev_checkpoint_regressions: Option<u64>,
    pub decision: GateDecision,
    pub rollback_target: Option<u32>,
}

/// Gate thresholds. Lowering tau below the default requires an explicit
/// override carrying a justification; plateau recognition is a judgment
/// call, never automated here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateConfig {
    pub tau: f64,
    pub epsilon: u64,
    pub override_justification: Option<String>,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { tau: 0.96, epsilon: 2, override_justification: None }
    }
}

impl GateConfig {
    /// Lower the score threshold; refuses silently weakened gates.
    pub fn with_lowered_tau(mut self, tau: f64, justification: impl Into<String>) -> Self {
        self.tau = tau;
        self.override_justification = Some(justification.into());
        self
    }
}

/// The deployed checkpoint a candidate must beat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployedCheckpoint {
    pub version: u32,
    pub eval_score: f64,
}

/// Full acceptance gate: score threshold, ratchet against the current
/// best, regression budget, and the cross-checkpoint budget on the
/// immediately preceding checkpoint's passing set.
pub fn gate(
    candidate: &ToyModel,
    current_best: Option<&DeployedCheckpoint>,
    eval_set: &[Example],
    regression_set: &[InferenceTrace],
    prev_checkpoint_pass_set: Option<&[InferenceTrace]>,
    cfg: &GateConfig,
) -> Result<GateResult, GateError> {
    if eval_set.is_empty() {
        return Err(GateError::EmptyEvalSet);
    }
    let eval_score = task::score(candidate, eval_set).map_err(|_| GateError::EmptyEvalSet)?;
    let regressions = regression_count(candidate, regression_set)?;
    let prev = prev_checkpoint_pass_set
        .map(|set| regression_count(candidate, set))
        .transpose()?;

    let meets_tau = eval_score >= cfg.tau;
    let beats_best = current_best.map(|b| eval_score >= b.eval_score).unwrap_or(true);
    let within_budget = regressions <= cfg.epsilon;
    let prev_ok = prev.map(|r| r <= cfg.epsilon).unwrap_or(true);

    let accept = meets_tau && beats_best && within_budget && prev_ok;
    Ok(GateResult {
        eval_score,
        regression_count: regressions,
        prev_checkpoint_regressions: prev,
        decision: if accept { GateDecision::Accept } else { GateDecision::RejectRollback },
        rollback_target: if accept { None } else { current_best.map(|b| b.version) },
    })
}

/// Convergence test: cold start needs only the score threshold; production
/// additionally needs the regression budget.
pub fn converged(a: f64, r: Option<u64>, tau: f64, epsilon: u64, mode: crate::pipeline::Mode) -> bool {
    match mode {
        crate::pipeline::Mode::ColdStart => a >= tau,
        crate::pipeline::Mode::Production => a >= tau && r.map(|r| r <= epsilon).unwrap_or(false),
    }
}

/// calibrated = weight * actual_accuracy + (1 - weight) * raw_confidence
pub fn calibrate_confidence(raw: f64, label_accuracy: f64, weight: f64) -> Result<f64, GateError> {
    for v in [raw, label_accuracy, weight] {
        if !(0.0..=1.0).contains(&v) {
            return Err(GateError::BadProbability(v));
        }
    }
    Ok(weight * label_accuracy + (1.0 - weight) * raw)
}

// ─── Correction propagation ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropagatedCorrection {
    pub trace_id: String,
    pub similarity: f64,
    pub correction: String,
}

fn tf_vector(text: &str) -> BTreeMap<String, f64> {
    let mut v = BTreeMap::new();
    for tok in text.split_whitespace() {
        *v.entry(tok.to_lowercase()).or_insert(0.0) += 1.0;
    }
    v
}

fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    for (term, w) in a {
        na += w * w;
        if let Some(wb) = b.get(term) {
            dot += w * wb;
        }
    }
    let nb: f64 = b.values().map(|w| w * w).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// TF-IDF vectors over the pool plus the corrected trace.
/// idf = ln((1 + N) / (1 + df)) + 1.
fn tfidf_vectors(docs: &[&str]) -> Vec<BTreeMap<String, f64>> {
    let tfs: Vec<BTreeMap<String, f64>> = docs.iter().map(|d| tf_vector(d)).collect();
    let n = docs.len() as f64;
    let mut df: BTreeMap<&str, f64> = BTreeMap::new();
    for tf in &tfs {
        for term in tf.keys() {
            *df.entry(term.as_str()).or_insert(0.0) += 1.0;
        }
    }
    tfs.iter()
        .map(|tf| {
            tf.iter()
                .map(|(term, w)| {
                    let idf = ((1.0 + n) / (1.0 + df[term.as_str()])).ln() + 1.0;
                    (term.clone(), w * idf)
                })
                .collect()
        })
        .collect()
}

/// Find unlabeled traces similar to a corrected one and tag them with the
/// propagated correction, so the same incorrect pattern does not recur.
pub fn propagate_correction(
    corrected: &InferenceTrace,
    pool: &[InferenceTrace],
    threshold: f64,
) -> Vec<PropagatedCorrection> {
    if pool.is_empty() {
        return Vec::new();
    }
    let correction = match &corrected.corrected {
        Some(c) => c.clone(),
        None => return Vec::new(),
    };
    let docs: Vec<&str> =
        pool.iter().map(|t| t.input.as_str()).chain([corrected.input.as_str()]).collect();
    let vecs = tfidf_vectors(&docs);
    let target = &vecs[vecs.len() - 1];
    let mut out: Vec<PropagatedCorrection> = pool
        .iter()
        .zip(&vecs[..vecs.len() - 1])
        .filter_map(|(t, v)| {
            let sim = cosine(target, v);
            (sim >= threshold).then(|| PropagatedCorrection {
                trace_id: t.id.clone(),
                similarity: sim,
                correction: correction.clone(),
            })
        })
        .collect();
    out.sort_by(|a, b| b.similarity.partial_cmp(&a.similarity).unwrap().then(a.trace_id.cmp(&b.trace_id)));
    out
}

/// Pairwise TF-IDF cosine similarity of two texts within a pool context;
/// exposed for symmetry checks.
pub fn tfidf_cosine(a: &str, b: &str, pool: &[&str]) -> f64 {
    let docs: Vec<&str> = pool.iter().copied().chain([a, b]).collect();
    let vecs = tfidf_vectors(&docs);
    cosine(&vecs[vecs.len() - 2], &vecs[vecs.len() - 1])
}

// ─── Rollback ledger ────────────────────────────────────────────────────

/// One deployed checkpoint: the dataset that produced it, the model
/// snapshot bytes, and the gate outcome that admitted it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub version: u32,
    pub dataset: DatasetSpec,
    pub hyper: HyperConfig,
    pub model_snapshot: String,
    pub gate: GateResult,
}

/// Append-only record of deployed checkpoints. Rollback retrains from the
/// base model on the target's dataset; a restored model must be byte-equal
/// to the stored snapshot.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RollbackLedger {
    entries: Vec<LedgerEntry>,
}

impl RollbackLedger {
    pub fn record(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn get(&self, version: u32) -> Option<&LedgerEntry> {
        self.entries.iter().rev().find(|e| e.version == version)
    }

    pub fn latest(&self) -> Option<&LedgerEntry> {
        self.entries.last()
    }

    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Dataset, model, and gate context restored by a rollback.
#[derive(Debug, Clone)]
pub struct Restored {
    pub version: u32,
    pub dataset: DatasetSpec,
    pub model: ToyModel,
    pub gate: GateResult,
}

/// Retrain from the base model on the target version's dataset and verify
/// the result is byte-identical to the stored snapshot. Training never
/// resumes from a later checkpoint, so restoring a dataset restores the
/// model behavior exactly.
pub fn rollback(ledger: &RollbackLedger, target_version: u32) -> Result<Restored, GateError> {
    let entry = ledger.get(target_version).ok_or(GateError::UnknownVersion(target_version))?;
    let model = task::train(&entry.dataset, &entry.hyper)
        .map_err(|_| GateError::UnknownVersion(target_version))?;
    if model.snapshot_json() != entry.model_snapshot {
        return Err(GateError::SnapshotMismatch(target_version));
    }
    Ok(Restored {
        version: entry.version,
        dataset: entry.dataset.clone(),
        model,
        gate: entry.gate.clone(),
    })
}
