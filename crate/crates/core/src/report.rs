//! Structured run log: a JSONL event stream plus a markdown rendering.
//!
//! The markdown is a pure function of the event list, so regenerating the
//! report from the JSONL mirror reproduces it byte for byte.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub id: String,
    pub size: usize,
    pub fixability: String,
    pub predicted: String,
    pub expected: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    Header {
        mode: String,
        seed: u64,
        config_digest: String,
    },
    DatasetVersion {
        version: u32,
        parent_version: Option<u32>,
        size: usize,
        gold_frac: f64,
        hard_frac: f64,
        replay_frac: f64,
        curation_log: Vec<String>,
    },
    Taxonomy {
        clusters: Vec<ClusterSummary>,
    },
    FilterSummary {
        kept: usize,
        excluded: usize,
        reasons: BTreeMap<String, usize>,
    },
    ProbeOutcome {
        cluster_id: String,
        rate_before: f64,
        rate_after: Option<f64>,
    },
    Iteration {
        index: usize,
        node_id: usize,
        kind: String,
        move_desc: String,
        score: f64,
        regressions: Option<u64>,
        accepted: bool,
        rolled_back: bool,
    },
    GateOutcome {
        version: u32,
        eval_score: f64,
        regressions: u64,
        prev_regressions: Option<u64>,
        decision: String,
        rollback_target: Option<u32>,
    },
    StageCheckpoint {
        checkpoint: String,
        poison_rate: f64,
        adaptive_score: f64,
        naive_score: f64,
        adaptive_accepted: bool,
    },
    Final {
        verdict: String,
        best_score: Option<f64>,
        version: Option<u32>,
        converged: bool,
    },
}

pub fn write_jsonl(events: &[RunEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    out
}

pub fn read_jsonl(text: &str) -> Result<Vec<RunEvent>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// Render the event stream as a markdown report. Pure and byte-stable.
pub fn render_markdown(events: &[RunEvent]) -> String {
    let mut md = String::from("# Run Report\n");

    let mut datasets = Vec::new();
    let mut iterations = Vec::new();
    let mut checkpoints = Vec::new();
    let mut probes = Vec::new();
    let mut finals = Vec::new();

    for e in events {
        match e {
            RunEvent::Header { mode, seed, config_digest } => {
                let _ = write!(
                    md,
                    "\n- mode: {mode}\n- seed: {seed}\n- config: {config_digest}\n"
                );
            }
            RunEvent::DatasetVersion { .. } => datasets.push(e),
            RunEvent::Iteration { .. } => iterations.push(e),
            RunEvent::StageCheckpoint { .. } => checkpoints.push(e),
            RunEvent::ProbeOutcome { .. } => probes.push(e),
            RunEvent::Taxonomy { clusters } => {
                md.push_str("\n## Failure Taxonomy\n\n| cluster | size | fixability | confusion |\n|---|---:|---|---|\n");
                for c in clusters {
                    let _ = writeln!(
                        md,
                        "| {} | {} | {} | {} -> {} |",
                        c.id, c.size, c.fixability, c.predicted, c.expected
                    );
                }
            }
            RunEvent::FilterSummary { kept, excluded, reasons } => {
                let _ = write!(md, "\n## Poison Filter\n\n- kept: {kept}\n- excluded: {excluded}\n");
                for (reason, n) in reasons {
                    let _ = writeln!(md, "  - {reason}: {n}");
                }
            }
            RunEvent::GateOutcome {
                version,
                eval_score,
                regressions,
                prev_regressions,
                decision,
                rollback_target,
            } => {
                let _ = write!(
                    md,
                    "\n## Gate v{version}\n\n- eval score: {}\n- regressions: {regressions}\n",
                    fmt4(*eval_score)
                );
                if let Some(p) = prev_regressions {
                    let _ = writeln!(md, "- previous-checkpoint regressions: {p}");
                }
                let _ = writeln!(md, "- decision: {decision}");
                if let Some(t) = rollback_target {
                    let _ = writeln!(md, "- rollback target: v{t}");
                }
            }
            RunEvent::Final { .. } => finals.push(e),
        }
    }

    if !datasets.is_empty() {
        md.push_str("\n## Dataset Versions\n\n| version | parent | size | gold | hard | replay |\n|---:|---:|---:|---:|---:|---:|\n");
        for e in &datasets {
            if let RunEvent::DatasetVersion {
                version,
                parent_version,
                size,
                gold_frac,
                hard_frac,
                replay_frac,
                ..
            } = e
            {
                let parent =
                    parent_version.map(|p| format!("v{p}")).unwrap_or_else(|| "-".to_string());
                let _ = writeln!(
                    md,
                    "| v{version} | {parent} | {size} | {} | {} | {} |",
                    fmt4(*gold_frac),
                    fmt4(*hard_frac),
                    fmt4(*replay_frac)
                );
            }
        }
        for e in &datasets {
            if let RunEvent::DatasetVersion { version, curation_log, .. } = e {
                if !curation_log.is_empty() {
                    let _ = writeln!(md, "\n### Curation v{version}");
                    for line in curation_log {
                        let _ = writeln!(md, "- {line}");
                    }
                }
            }
        }
    }

    if !probes.is_empty() {
        md.push_str("\n## Probes\n\n| cluster | before | after |\n|---|---:|---:|\n");
        for e in &probes {
            if let RunEvent::ProbeOutcome { cluster_id, rate_before, rate_after } = e {
                let after = rate_after.map(fmt4).unwrap_or_else(|| "-".to_string());
                let _ = writeln!(md, "| {cluster_id} | {} | {after} |", fmt4(*rate_before));
            }
        }
    }

    if !iterations.is_empty() {
        md.push_str("\n## Iterations\n\n| # | node | kind | move | score | regressions | outcome |\n|---:|---:|---|---|---:|---:|---|\n");
        for e in &iterations {
            if let RunEvent::Iteration {
                index,
                node_id,
                kind,
                move_desc,
                score,
                regressions,
                accepted,
                rolled_back,
            } = e
            {
                let r = regressions.map(|r| r.to_string()).unwrap_or_else(|| "-".to_string());
                let outcome = if *accepted {
                    "accepted"
                } else if *rolled_back {
                    "rolled back"
                } else {
                    "kept prior"
                };
                let _ = writeln!(
                    md,
                    "| {index} | {node_id} | {kind} | {move_desc} | {} | {r} | {outcome} |",
                    fmt4(*score)
                );
            }
        }
    }

    if !checkpoints.is_empty() {
        md.push_str("\n## Stage Trajectory\n\n| checkpoint | poison | adaptive | naive | decision |\n|---|---:|---:|---:|---|\n");
        for e in &checkpoints {
            if let RunEvent::StageCheckpoint {
                checkpoint,
                poison_rate,
                adaptive_score,
                naive_score,
                adaptive_accepted,
            } = e
            {
                let _ = writeln!(
                    md,
                    "| {checkpoint} | {} | {} | {} | {} |",
                    fmt4(*poison_rate),
                    fmt4(*adaptive_score),
                    fmt4(*naive_score),
                    if *adaptive_accepted { "deployed" } else { "kept prior" }
                );
            }
        }
    }

    for e in &finals {
        if let RunEvent::Final { verdict, best_score, version, converged } = e {
            let _ = write!(md, "\n## Final\n\n- verdict: {verdict}\n- converged: {converged}\n");
            if let Some(s) = best_score {
                let _ = writeln!(md, "- best score: {}", fmt4(*s));
            }
            if let Some(v) = version {
                let _ = writeln!(md, "- deployed version: v{v}");
            }
        }
    }

    md
}
