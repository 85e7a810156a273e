//! The training-pipeline configuration space: datasets, hyperparameters,
//! and learning strategies, plus the validity rules every other module
//! relies on.
//!
//! All types here are immutable values after construction and safe to share
//! across concurrent evaluators.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

/// Which dataset slice an example belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slice {
    Gold,
    HardNegative,
    Replay,
}

/// Where an example came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Benchmark,
    Synthesized,
    CorrectedFailure,
    Probe,
}

/// Count of maximal whitespace-separated runs. The canonical token count
/// used everywhere lengths are compared.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// One training example. `length` is always recomputed from `input`,
/// never trusted from external data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: String,
    pub target: String,
    pub slice: Slice,
    pub length: usize,
    pub entity_values: Option<Vec<String>>,
    pub provenance: Provenance,
}

impl Example {
    pub fn new(input: impl Into<String>, target: impl Into<String>, slice: Slice, provenance: Provenance) -> Self {
        let input = input.into();
        let length = token_count(&input);
        Example {
            input,
            target: target.into(),
            slice,
            length,
            entity_values: None,
            provenance,
        }
    }

    pub fn with_entities(mut self, entities: Vec<String>) -> Self {
        self.entity_values = Some(entities);
        self
    }

    /// Same example re-tagged with a different slice.
    pub fn retag(mut self, slice: Slice) -> Self {
        self.slice = slice;
        self
    }
}

/// Realized slice fractions of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub gold_frac: f64,
    pub hard_frac: f64,
    pub replay_frac: f64,
}

impl Composition {
    pub fn sum(&self) -> f64 {
        self.gold_frac + self.hard_frac + self.replay_frac
    }
}

/// A versioned training dataset with slice composition and curation history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub examples: Vec<Example>,
    pub composition: Composition,
    pub version: u32,
    pub parent_version: Option<u32>,
    pub curation_log: Vec<String>,
}

impl DatasetSpec {
    /// Build a dataset from examples, computing the realized composition.
    pub fn from_examples(
        examples: Vec<Example>,
        version: u32,
        parent_version: Option<u32>,
        curation_log: Vec<String>,
    ) -> Self {
        let composition = slice_fractions(&examples);
        DatasetSpec {
            examples,
            composition,
            version,
            parent_version,
            curation_log,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn slice_count(&self, slice: Slice) -> usize {
        self.examples.iter().filter(|e| e.slice == slice).count()
    }
}

fn slice_fractions(examples: &[Example]) -> Composition {
    let n = examples.len();
    if n == 0 {
        return Composition { gold_frac: 0.0, hard_frac: 0.0, replay_frac: 0.0 };
    }
    let count = |s: Slice| examples.iter().filter(|e| e.slice == s).count() as f64;
    Composition {
        gold_frac: count(Slice::Gold) / n as f64,
        hard_frac: count(Slice::HardNegative) / n as f64,
        replay_frac: count(Slice::Replay) / n as f64,
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("empty dataset")]
    EmptyDataset,
}

/// Fractions computed from slice tags. Sum is 1.0 within 1e-9 for any
/// non-empty dataset.
pub fn composition_ratios(d: &DatasetSpec) -> Result<Composition, DatasetError> {
    if d.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    Ok(slice_fractions(&d.examples))
}

/// Hyperparameter configuration. The toy learner maps `learning_rate` to
/// its smoothing constant and counts `system_prompt` tokens into every
/// example; `lora_rank` and `model_id` are recorded and searchable but
/// do not change the toy learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub model_id: String,
    pub lora_rank: u32,
    pub learning_rate: f64,
    pub batch_size: u32,
    pub epochs: u32,
    pub system_prompt: String,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            model_id: "toy-count-base".to_string(),
            lora_rank: 8,
            learning_rate: 0.1,
            batch_size: 8,
            epochs: 2,
            system_prompt: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionFormat {
    Direct,
    ChainOfThought,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    ExactMatch,
    F1,
    JudgeScore,
}

/// Learning strategy: supervision format, optional teacher, eval method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub supervision_format: SupervisionFormat,
    pub teacher_id: Option<String>,
    pub eval_method: EvalMethod,
}

impl Default for StrategySpec {
    fn default() -> Self {
        StrategySpec {
            supervision_format: SupervisionFormat::Direct,
            teacher_id: None,
            eval_method: EvalMethod::ExactMatch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ColdStart,
    Production,
}

/// A complete training configuration: the unit of search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub dataset: DatasetSpec,
    pub hyper: HyperConfig,
    pub strategy: StrategySpec,
    pub mode: Mode,
}

/// One invariant violation found by validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: String,
    pub message: String,
}

impl Violation {
    fn new(code: &str, message: impl Into<String>) -> Self {
        Violation { code: code.to_string(), message: message.into() }
    }
}

pub type ValidationReport = Vec<Violation>;

/// Collect every invariant violation across the pipeline's embedded types.
/// Violations are data, not errors; an empty report means valid. Pure and
/// idempotent.
pub fn validate_pipeline(p: &Pipeline) -> ValidationReport {
    let mut out = Vec::new();

    for (i, e) in p.dataset.examples.iter().enumerate() {
        if e.input.trim().is_empty() && e.provenance != Provenance::Probe {
            out.push(Violation::new(
                "empty_input",
                format!("example {i}: empty input outside probe provenance"),
            ));
        }
        let actual = token_count(&e.input);
        if e.length != actual {
            out.push(Violation::new(
                "length_mismatch",
                format!("example {i}: recorded length {} != recomputed {}", e.length, actual),
            ));
        }
    }

    if !p.dataset.is_empty() {
        let realized = slice_fractions(&p.dataset.examples);
        if (p.dataset.composition.sum() - 1.0).abs() > 1e-9 {
            out.push(Violation::new(
                "composition_sum",
                format!("composition fractions sum to {}", p.dataset.composition.sum()),
            ));
        }
        let stored = p.dataset.composition;
        if (stored.gold_frac - realized.gold_frac).abs() > 1e-9
            || (stored.hard_frac - realized.hard_frac).abs() > 1e-9
            || (stored.replay_frac - realized.replay_frac).abs() > 1e-9
        {
            out.push(Violation::new(
                "composition_mismatch",
                "stored composition differs from recomputed slice fractions",
            ));
        }
    }

    if let Some(parent) = p.dataset.parent_version {
        if p.dataset.version <= parent {
            out.push(Violation::new(
                "version_order",
                format!("version {} must exceed parent {}", p.dataset.version, parent),
            ));
        }
    }

    if p.hyper.epochs < 1 {
        out.push(Violation::new("epochs", "epochs >= 1 required"));
    }
    if p.hyper.learning_rate <= 0.0 {
        out.push(Violation::new("learning_rate", "learning_rate > 0 required"));
    }
    if p.hyper.batch_size < 1 {
        out.push(Violation::new("batch_size", "batch_size >= 1 required"));
    }
    if p.hyper.lora_rank < 1 {
        out.push(Violation::new("lora_rank", "lora_rank >= 1 required"));
    }

    if p.strategy.supervision_format == SupervisionFormat::ChainOfThought
        && p.strategy.teacher_id.is_none()
    {
        out.push(Violation::new(
            "teacher_required",
            "chain_of_thought supervision requires a teacher_id",
        ));
    }

    let replay = p.dataset.slice_count(Slice::Replay);
    match p.mode {
        Mode::ColdStart => {
            if replay > 0 {
                out.push(Violation::new("replay_in_cold_start", "cold_start must carry an empty replay slice"));
            }
        }
        Mode::Production => {
            if p.dataset.parent_version.is_some() && replay == 0 && !p.dataset.is_empty() {
                out.push(Violation::new(
                    "replay_missing",
                    "production mode with a parent dataset must carry a non-empty replay slice",
                ));
            }
        }
    }

    out
}

// ─── JSONL serialization ────────────────────────────────────────────────

/// Header record written before the example records of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    parent_version: Option<u32>,
    composition: Composition,
    curation_log: Vec<String>,
}

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("missing dataset header record")]
    MissingHeader,
}

/// Write a dataset as one header record followed by one record per example.
pub fn write_dataset_jsonl<W: Write>(d: &DatasetSpec, mut w: W) -> Result<(), JsonlError> {
    let header = DatasetHeader {
        version: d.version,
        parent_version: d.parent_version,
        composition: d.composition,
        curation_log: d.curation_log.clone(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|source| JsonlError::Parse { line: 1, source })?;
    w.write_all(b"\n")?;
    for (i, e) in d.examples.iter().enumerate() {
        serde_json::to_writer(&mut w, e).map_err(|source| JsonlError::Parse { line: i + 2, source })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a dataset back. Example lengths are recomputed from the input text,
/// not trusted from the file.
pub fn read_dataset_jsonl<R: BufRead>(r: R) -> Result<DatasetSpec, JsonlError> {
    let mut lines = r.lines();
    let header_line = lines.next().ok_or(JsonlError::MissingHeader)??;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|source| JsonlError::Parse { line: 1, source })?;
    let mut examples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut e: Example =
            serde_json::from_str(&line).map_err(|source| JsonlError::Parse { line: i + 2, source })?;
        e.length = token_count(&e.input);
        examples.push(e);
    }
    Ok(DatasetSpec {
        examples,
        composition: header.composition,
        version: header.version,
        parent_version: header.parent_version,
        curation_log: header.curation_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(gold: usize, hard: usize, replay: usize) -> DatasetSpec {
        let mut examples = Vec::new();
        for i in 0..gold {
            examples.push(Example::new(format!("g {i}"), "a", Slice::Gold, Provenance::Benchmark));
        }
        for i in 0..hard {
            examples.push(Example::new(format!("h {i}"), "b", Slice::HardNegative, Provenance::Synthesized));
        }
        for i in 0..replay {
            examples.push(Example::new(format!("r {i}"), "a", Slice::Replay, Provenance::Benchmark));
        }
        DatasetSpec::from_examples(examples, 1, None, Vec::new())
    }

    fn pipeline(mode: Mode, d: DatasetSpec) -> Pipeline {
        Pipeline { dataset: d, hyper: HyperConfig::default(), strategy: StrategySpec::default(), mode }
    }

    #[test]
    fn cold_start_without_replay_is_valid() {
        let p = pipeline(Mode::ColdStart, dataset(65, 35, 0));
        assert!(validate_pipeline(&p).is_empty());
    }

    #[test]
    fn cold_start_with_replay_is_violation() {
        let p = pipeline(Mode::ColdStart, dataset(60, 30, 10));
        let report = validate_pipeline(&p);
        assert!(report.iter().any(|v| v.code == "replay_in_cold_start"));
    }

    #[test]
    fn zero_epochs_is_violation() {
        let mut p = pipeline(Mode::Production, dataset(50, 30, 20));
        p.hyper.epochs = 0;
        let report = validate_pipeline(&p);
        assert!(report.iter().any(|v| v.code == "epochs"));
    }

    #[test]
    fn production_with_parent_needs_replay() {
        let mut d = dataset(50, 30, 0);
        d.parent_version = Some(1);
        d.version = 2;
        let p = pipeline(Mode::Production, d);
        assert!(validate_pipeline(&p).iter().any(|v| v.code == "replay_missing"));
    }

    #[test]
    fn validate_is_idempotent() {
        let mut p = pipeline(Mode::ColdStart, dataset(3, 2, 1));
        p.hyper.epochs = 0;
        let a = validate_pipeline(&p);
        let b = validate_pipeline(&p);
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn composition_50_30_20() {
        let c = composition_ratios(&dataset(50, 30, 20)).unwrap();
        assert_eq!(c.gold_frac, 0.50);
        assert_eq!(c.hard_frac, 0.30);
        assert_eq!(c.replay_frac, 0.20);
        assert!((c.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn composition_65_35_0() {
        let c = composition_ratios(&dataset(65, 35, 0)).unwrap();
        assert_eq!(c.gold_frac, 0.65);
        assert_eq!(c.hard_frac, 0.35);
        assert_eq!(c.replay_frac, 0.0);
    }

    #[test]
    fn composition_single_gold() {
        let c = composition_ratios(&dataset(1, 0, 0)).unwrap();
        assert_eq!(c.gold_frac, 1.0);
        assert_eq!(c.hard_frac, 0.0);
        assert_eq!(c.replay_frac, 0.0);
    }

    #[test]
    fn composition_empty_errors() {
        assert_eq!(composition_ratios(&dataset(0, 0, 0)), Err(DatasetError::EmptyDataset));
    }

    #[test]
    fn length_is_recomputed_on_read() {
        let mut d = dataset(2, 1, 0);
        d.examples[0].length = 99;
        let mut buf = Vec::new();
        write_dataset_jsonl(&d, &mut buf).unwrap();
        let back = read_dataset_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.examples[0].length, 2);
    }

    #[test]
    fn example_jsonl_field_names() {
        let e = Example::new("hi there", "greet", Slice::Gold, Provenance::CorrectedFailure);
        let json = serde_json::to_string(&e).unwrap();
        for field in ["input", "target", "slice", "length", "entity_values", "provenance"] {
            assert!(json.contains(&format!("\"{field}\"")), "missing {field} in {json}");
        }
        assert!(json.contains("\"corrected_failure\""));
    }

    #[test]
    fn dataset_jsonl_roundtrip() {
        let d = dataset(5, 3, 2);
        let mut buf = Vec::new();
        write_dataset_jsonl(&d, &mut buf).unwrap();
        let back = read_dataset_jsonl(buf.as_slice()).unwrap();
        assert_eq!(d, back);
    }
}
