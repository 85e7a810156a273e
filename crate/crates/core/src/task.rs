//! A synthetic classification task plus a trainable count-based learner and
//! an exact-match judge.
//!
//! Inputs are bags of pseudo-word tokens drawn from per-label vocabularies.
//! Confusable label pairs share part of their vocabulary, so the task has a
//! real decision boundary: hard negatives, label balance, epochs, smoothing,
//! and the system prompt all move measurable accuracy. Training is additive
//! counting, fully deterministic, and fast enough to evaluate hundreds of
//! pipelines per second.

use crate::pipeline::{token_count, DatasetSpec, Example, HyperConfig, Provenance, Slice};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Task definition: labels, per-label vocabularies, and confusion structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub labels: Vec<String>,
    /// Per-label token lists. Confusable pairs share a configured block of
    /// tokens; all other pairs are disjoint.
    pub vocab: BTreeMap<String, Vec<String>>,
    pub confusable_pairs: Vec<(String, String)>,
    /// Label for inputs that should not trigger any content label.
    pub negative_label: Option<String>,
    pub input_length_range: (usize, usize),
    pub seed: u64,
}

const CONSONANTS: [&str; 12] = ["b", "d", "k", "l", "m", "n", "r", "s", "t", "v", "z", "g"];
const VOWELS: [&str; 4] = ["a", "e", "o", "u"];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(CONSONANTS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
    }
    w
}

fn fresh_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl ToyTaskSpec {
    /// The standard four-label demo task: one confusable pair sharing part
    /// of its vocabulary, one separable label, and a catch-all negative
    /// label over filler tokens.
    pub fn demo(seed: u64) -> Self {
        let mut rng = crate::seeds::rng(seed, "task-vocab");
        let mut taken = BTreeSet::new();

        let shared = fresh_words(&mut rng, 12, &mut taken);
        let refund_own = fresh_words(&mut rng, 20, &mut taken);
        let reorder_own = fresh_words(&mut rng, 20, &mut taken);
        let pricing_own = fresh_words(&mut rng, 24, &mut taken);
        let other_own = fresh_words(&mut rng, 24, &mut taken);

        let mut vocab = BTreeMap::new();
        let mut refund: Vec<String> = refund_own;
        refund.extend(shared.iter().cloned());
        let mut reorder: Vec<String> = reorder_own;
        reorder.extend(shared.iter().cloned());
        vocab.insert("refund".to_string(), refund);
        vocab.insert("reorder".to_string(), reorder);
        vocab.insert("pricing".to_string(), pricing_own);
        vocab.insert("other".to_string(), other_own);

        ToyTaskSpec {
            labels: vec![
                "refund".to_string(),
                "reorder".to_string(),
                "pricing".to_string(),
                "other".to_string(),
            ],
            vocab,
            confusable_pairs: vec![("refund".to_string(), "reorder".to_string())],
            negative_label: Some("other".to_string()),
            input_length_range: (6, 12),
            seed,
        }
    }

    /// Jaccard overlap of two labels' vocabularies.
    pub fn vocab_overlap(&self, a: &str, b: &str) -> f64 {
        let va: BTreeSet<_> = self.vocab[a].iter().collect();
        let vb: BTreeSet<_> = self.vocab[b].iter().collect();
        let inter = va.intersection(&vb).count() as f64;
        let union = va.union(&vb).count() as f64;
        if union == 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Violations of the overlap structure: confusable pairs must share at
    /// least 20% of vocabulary, all other pairs less than 5%.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (a, b) in &self.confusable_pairs {
            if self.vocab_overlap(a, b) < 0.20 {
                out.push(format!("confusable pair ({a}, {b}) shares < 20% vocabulary"));
            }
        }
        for (i, a) in self.labels.iter().enumerate() {
            for b in self.labels.iter().skip(i + 1) {
                let confusable = self
                    .confusable_pairs
                    .iter()
                    .any(|(x, y)| (x == a && y == b) || (x == b && y == a));
                if !confusable && self.vocab_overlap(a, b) >= 0.05 {
                    out.push(format!("non-confusable pair ({a}, {b}) shares >= 5% vocabulary"));
                }
            }
        }
        out
    }

    /// Tokens that appear only in `label`'s vocabulary.
    pub fn exclusive_vocab(&self, label: &str) -> Vec<String> {
        let mut others = BTreeSet::new();
        for (l, v) in &self.vocab {
            if l != label {
                others.extend(v.iter().cloned());
            }
        }
        self.vocab[label]
            .iter()
            .filter(|t| !others.contains(*t))
            .cloned()
            .collect()
    }

    /// Tokens shared between the two labels of a confusable pair.
    pub fn shared_vocab(&self, a: &str, b: &str) -> Vec<String> {
        let vb: BTreeSet<_> = self.vocab[b].iter().collect();
        self.vocab[a].iter().filter(|t| vb.contains(*t)).cloned().collect()
    }

    /// The confusable counterpart of `label`, if any.
    pub fn confusable_of(&self, label: &str) -> Option<&str> {
        for (a, b) in &self.confusable_pairs {
            if a == label {
                return Some(b);
            }
            if b == label {
                return Some(a);
            }
        }
        None
    }

    /// Union of all labels' vocabularies.
    pub fn all_tokens(&self) -> BTreeSet<String> {
        self.vocab.values().flatten().cloned().collect()
    }

    /// Per-label vocabularies as token sets, for overlap checks.
    pub fn vocab_sets(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.vocab
            .iter()
            .map(|(l, v)| (l.clone(), v.iter().cloned().collect()))
            .collect()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GenerateError {
    #[error("n must be >= 1")]
    ZeroCount,
}

/// Generate `n` gold examples, cycling labels so counts stay balanced.
/// Each input is a bag of tokens drawn from its gold label's vocabulary.
pub fn generate_examples(
    spec: &ToyTaskSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Example>, GenerateError> {
    if n == 0 {
        return Err(GenerateError::ZeroCount);
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = &spec.labels[i % spec.labels.len()];
        out.push(generate_example_for(spec, label, rng));
    }
    Ok(out)
}

/// One gold example for a specific label.
pub fn generate_example_for(spec: &ToyTaskSpec, label: &str, rng: &mut ChaCha8Rng) -> Example {
    let (lo, hi) = spec.input_length_range;
    let len = rng.random_range(lo..=hi);
    let vocab = &spec.vocab[label];
    let tokens: Vec<&str> = (0..len).map(|_| vocab.choose(rng).unwrap().as_str()).collect();
    Example::new(tokens.join(" "), label, Slice::Gold, Provenance::Synthesized)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

/// Count-based classifier. Immutable after training; predict and score are
/// pure functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    counts: BTreeMap<String, BTreeMap<String, f64>>,
    totals: BTreeMap<String, f64>,
    alpha: f64,
    prompt_tokens: Vec<String>,
    vocab_size: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
}

/// Per-example training weight. Capped at 4 so that piling on epochs stops
/// helping and starts amplifying noise.
fn epoch_weight(epochs: u32) -> f64 {
    epochs.min(4) as f64
}

fn smoothing(learning_rate: f64) -> f64 {
    (learning_rate * 10.0).clamp(0.01, 10.0)
}

/// Additive-count training. Each example contributes `min(epochs, 4)` to its
/// label's token counts; system prompt tokens are appended to every input
/// before counting, so prompt choice shifts the learned distribution.
pub fn train(dataset: &DatasetSpec, hyper: &HyperConfig) -> Result<ToyModel, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let w = epoch_weight(hyper.epochs);
    let prompt_tokens: Vec<String> =
        hyper.system_prompt.split_whitespace().map(str::to_string).collect();

    let mut counts: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut totals: BTreeMap<String, f64> = BTreeMap::new();
    for e in &dataset.examples {
        let row = counts.entry(e.target.clone()).or_default();
        let total = totals.entry(e.target.clone()).or_insert(0.0);
        for tok in e.input.split_whitespace().chain(prompt_tokens.iter().map(String::as_str)) {
            *row.entry(tok.to_string()).or_insert(0.0) += w;
            *total += w;
        }
    }
    let vocab: BTreeSet<&String> = counts.values().flat_map(|row| row.keys()).collect();
    let vocab_size = vocab.len();

    Ok(ToyModel { counts, totals, alpha: smoothing(hyper.learning_rate), prompt_tokens, vocab_size })
}

impl ToyModel {
    /// Labels the model can predict, in lexical order.
    pub fn labels(&self) -> Vec<&str> {
        self.counts.keys().map(String::as_str).collect()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Log-likelihood of one token under one label, with additive smoothing.
    fn token_log_prob(&self, label: &str, token: &str) -> f64 {
        let c = self.counts[label].get(token).copied().unwrap_or(0.0);
        let t = self.totals[label];
        ((c + self.alpha) / (t + self.alpha * self.vocab_size as f64)).ln()
    }

    /// Predicted label and its posterior under a uniform prior. Tokens the
    /// model has never seen are ignored; an input with no known tokens gets
    /// the uniform posterior and the lexically first label.
    pub fn predict(&self, input: &str) -> (String, f64) {
        let known: BTreeSet<&String> = self.counts.values().flat_map(|r| r.keys()).collect();
        let tokens: Vec<&str> = input
            .split_whitespace()
            .chain(self.prompt_tokens.iter().map(String::as_str))
            .filter(|t| known.contains(&t.to_string()))
            .collect();

        let n_labels = self.counts.len().max(1);
        if tokens.is_empty() {
            let first = self.counts.keys().next().cloned().unwrap_or_default();
            return (first, 1.0 / n_labels as f64);
        }

        let mut scores: Vec<(&str, f64)> = Vec::with_capacity(n_labels);
        for label in self.counts.keys() {
            let s: f64 = tokens.iter().map(|t| self.token_log_prob(label, t)).sum();
            scores.push((label, s));
        }
        // Lexical order of the BTreeMap plus strict > gives the lexically
        // first label on ties.
        let mut best = scores[0];
        for &(l, s) in &scores[1..] {
            if s > best.1 {
                best = (l, s);
            }
        }
        let max = best.1;
        let denom: f64 = scores.iter().map(|(_, s)| (s - max).exp()).sum();
        (best.0.to_string(), 1.0 / denom)
    }

    /// Canonical JSON snapshot, byte-stable for identical models.
    pub fn snapshot_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    #[cfg(test)]
    pub(crate) fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }
}

/// Exact-match verdict with a reasoning string naming both labels.
pub fn judge(prediction: &str, gold: &str) -> (Verdict, String) {
    if prediction == gold {
        (Verdict::Pass, format!("predicted '{prediction}' matches gold '{gold}'"))
    } else {
        (Verdict::Fail, format!("predicted '{prediction}' but gold is '{gold}'"))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("empty eval set")]
    EmptyEvalSet,
}

/// Mean pass rate of the model over an eval set. This is the search's
/// objective function.
pub fn score(model: &ToyModel, eval_set: &[Example]) -> Result<f64, ScoreError> {
    if eval_set.is_empty() {
        return Err(ScoreError::EmptyEvalSet);
    }
    let passes = eval_set
        .iter()
        .filter(|e| judge(&model.predict(&e.input).0, &e.target).0 == Verdict::Pass)
        .count();
    Ok(passes as f64 / eval_set.len() as f64)
}

/// Failure detail for one eval item, used by the proposer to target moves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCase {
    pub input: String,
    pub predicted: String,
    pub expected: String,
}

/// Score plus the failing cases, for diagnosis-driven expansion.
pub fn score_with_failures(
    model: &ToyModel,
    eval_set: &[Example],
) -> Result<(f64, Vec<FailureCase>), ScoreError> {
    if eval_set.is_empty() {
        return Err(ScoreError::EmptyEvalSet);
    }
    let mut failures = Vec::new();
    let mut passes = 0usize;
    for e in eval_set {
        let (pred, _) = model.predict(&e.input);
        if judge(&pred, &e.target).0 == Verdict::Pass {
            passes += 1;
        } else {
            failures.push(FailureCase {
                input: e.input.clone(),
                predicted: pred,
                expected: e.target.clone(),
            });
        }
    }
    Ok((passes as f64 / eval_set.len() as f64, failures))
}

/// Fraction of the dataset's examples whose recorded length disagrees with
/// a recount; used as a cheap self-check in tests.
pub fn length_drift(d: &DatasetSpec) -> f64 {
    if d.is_empty() {
        return 0.0;
    }
    let bad = d.examples.iter().filter(|e| e.length != token_count(&e.input)).count();
    bad as f64 / d.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    fn two_token_model(epochs: u32) -> ToyModel {
        let d = DatasetSpec::from_examples(
            vec![
                Example::new("a a", "L1", Slice::Gold, Provenance::Benchmark),
                Example::new("b b", "L2", Slice::Gold, Provenance::Benchmark),
            ],
            1,
            None,
            Vec::new(),
        );
        let hyper = HyperConfig { epochs, ..HyperConfig::default() };
        train(&d, &hyper).unwrap()
    }

    #[test]
    fn generate_zero_errors() {
        let spec = ToyTaskSpec::demo(1);
        let mut rng = seeds::rng(1, "t");
        assert_eq!(generate_examples(&spec, 0, &mut rng), Err(GenerateError::ZeroCount));
    }

    #[test]
    fn demo_spec_overlap_structure_holds() {
        let spec = ToyTaskSpec::demo(3);
        assert!(spec.validate().is_empty(), "{:?}", spec.validate());
        assert!(spec.vocab_overlap("refund", "reorder") >= 0.20);
        assert!(spec.vocab_overlap("refund", "pricing") < 0.05);
    }

    #[test]
    fn separable_task_perfectly_learnable() {
        // Two labels with disjoint vocabularies: a trained model reaches 1.0.
        let mut spec = ToyTaskSpec::demo(5);
        spec.labels = vec!["pricing".to_string(), "other".to_string()];
        spec.confusable_pairs.clear();
        spec.vocab.retain(|k, _| k == "pricing" || k == "other");
        let mut rng = seeds::rng(5, "gen");
        let train_ex = generate_examples(&spec, 80, &mut rng).unwrap();
        let eval_ex = generate_examples(&spec, 40, &mut rng).unwrap();
        let d = DatasetSpec::from_examples(train_ex, 1, None, Vec::new());
        let model = train(&d, &HyperConfig::default()).unwrap();
        assert_eq!(score(&model, &eval_ex).unwrap(), 1.0);
    }

    #[test]
    fn overlap_only_inputs_are_irreducible() {
        // Brute-force posterior over the generator's token distribution: an
        // input made only of shared tokens has equal likelihood under both
        // confusable labels, so no classifier beats 0.5 on that slice.
        let spec = ToyTaskSpec::demo(7);
        let shared = spec.shared_vocab("refund", "reorder");
        assert!(!shared.is_empty());
        let p_refund = 1.0 / spec.vocab["refund"].len() as f64;
        let p_reorder = 1.0 / spec.vocab["reorder"].len() as f64;
        // Same vocabulary size by construction, so per-token likelihoods tie.
        assert!((p_refund - p_reorder).abs() < 1e-15);
        for t in &shared {
            assert!(spec.vocab["refund"].contains(t) && spec.vocab["reorder"].contains(t));
        }
    }

    #[test]
    fn train_accumulates_weighted_counts() {
        let m = two_token_model(1);
        assert_eq!(m.counts["L1"]["a"], 2.0);
        assert_eq!(m.counts["L2"]["b"], 2.0);
        assert_eq!(m.totals["L1"], 2.0);
        let m4 = two_token_model(8); // weight capped at 4
        assert_eq!(m4.counts["L1"]["a"], 8.0);
    }

    #[test]
    fn train_empty_errors() {
        let d = DatasetSpec::from_examples(Vec::new(), 1, None, Vec::new());
        assert_eq!(train(&d, &HyperConfig::default()), Err(TrainError::EmptyDataset));
    }

    #[test]
    fn label_flip_degrades_separation() {
        // Recompute posteriors by hand on the 2-token vocabulary: adding a
        // flipped ("a a", L2) example pulls P(a|L2) from 0.25 up to 0.5.
        let clean = two_token_model(1);
        let d = DatasetSpec::from_examples(
            vec![
                Example::new("a a", "L1", Slice::Gold, Provenance::Benchmark),
                Example::new("b b", "L2", Slice::Gold, Provenance::Benchmark),
                Example::new("a a", "L2", Slice::Gold, Provenance::Benchmark),
            ],
            1,
            None,
            Vec::new(),
        );
        let poisoned = train(&d, &HyperConfig { epochs: 1, ..HyperConfig::default() }).unwrap();
        let (_, conf_clean) = clean.predict("a");
        let (label, conf_poisoned) = poisoned.predict("a");
        assert_eq!(label, "L1");
        // Hand oracle: clean P = 0.75; poisoned P(a|L1)=(2+1)/(2+2)=0.75,
        // P(a|L2)=(2+1)/(4+2)=0.5 -> posterior 0.75/1.25 = 0.6.
        assert!((conf_clean - 0.75).abs() < 1e-12);
        assert!((conf_poisoned - 0.6).abs() < 1e-12);
        assert!(conf_poisoned < conf_clean);
    }

    /// Independent count-table oracle used to freeze the epoch-sensitivity
    /// scenario; deliberately reimplements training instead of calling it.
    fn oracle_accuracy(examples: &[(String, String)], w: f64, alpha: f64, eval: &[(String, String)]) -> f64 {
        let mut counts: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
        let mut totals: BTreeMap<&str, f64> = BTreeMap::new();
        for (input, label) in examples {
            for tok in input.split_whitespace() {
                *counts.entry(label).or_default().entry(tok).or_insert(0.0) += w;
                *totals.entry(label).or_insert(0.0) += w;
            }
        }
        let vocab: BTreeSet<&str> = counts.values().flat_map(|r| r.keys().copied()).collect();
        let v = vocab.len() as f64;
        let mut hits = 0usize;
        for (input, gold) in eval {
            let mut best: Option<(&str, f64)> = None;
            for (label, row) in &counts {
                let s: f64 = input
                    .split_whitespace()
                    .filter(|t| vocab.contains(t))
                    .map(|t| {
                        let c = row.get(t).copied().unwrap_or(0.0);
                        ((c + alpha) / (totals[label] + alpha * v)).ln()
                    })
                    .sum();
                match best {
                    Some((_, bs)) if s <= bs => {}
                    _ => best = Some((label, s)),
                }
            }
            if best.map(|(l, _)| l == gold.as_str()).unwrap_or(false) {
                hits += 1;
            }
        }
        hits as f64 / eval.len() as f64
    }

    #[test]
    fn fewer_epochs_win_on_flipped_data() {
        // 40%-flipped training set, fixed 50-example clean eval: the 2-epoch
        // model beats the 8-epoch model. Expected values frozen from the
        // independent oracle above.
        let spec = ToyTaskSpec::demo(0);
        let mut rng = seeds::rng(0, "flip-scenario");
        let mut train_ex = generate_examples(&spec, 30, &mut rng).unwrap();
        for (i, e) in train_ex.iter_mut().enumerate() {
            if i % 5 < 2 {
                // flip 40% of labels to the lexically next label
                let idx = spec.labels.iter().position(|l| *l == e.target).unwrap();
                e.target = spec.labels[(idx + 1) % spec.labels.len()].clone();
            }
        }
        let eval_ex = generate_examples(&spec, 50, &mut rng).unwrap();

        let pairs: Vec<(String, String)> =
            train_ex.iter().map(|e| (e.input.clone(), e.target.clone())).collect();
        let eval_pairs: Vec<(String, String)> =
            eval_ex.iter().map(|e| (e.input.clone(), e.target.clone())).collect();
        let oracle_2 = oracle_accuracy(&pairs, 2.0, 1.0, &eval_pairs);
        let oracle_8 = oracle_accuracy(&pairs, 4.0, 1.0, &eval_pairs);
        assert!(oracle_2 > oracle_8, "oracle: w2={oracle_2} w8={oracle_8}");

        let d = DatasetSpec::from_examples(train_ex, 1, None, Vec::new());
        let m2 = train(&d, &HyperConfig { epochs: 2, ..HyperConfig::default() }).unwrap();
        let m8 = train(&d, &HyperConfig { epochs: 8, ..HyperConfig::default() }).unwrap();
        let s2 = score(&m2, &eval_ex).unwrap();
        let s8 = score(&m8, &eval_ex).unwrap();
        assert_eq!(s2, oracle_2);
        assert_eq!(s8, oracle_8);
        assert!(s2 > s8, "epochs 2 ({s2}) should beat epochs 8 ({s8})");
        assert_eq!((s2, s8), (0.78, 0.72), "frozen scenario values drifted");
    }

    #[test]
    fn predict_hand_computed_posterior() {
        let m = two_token_model(1);
        let (label, conf) = m.predict("a");
        assert_eq!(label, "L1");
        assert!((conf - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_input_uniform_first_label() {
        let m = two_token_model(1);
        let (label, conf) = m.predict("");
        assert_eq!(label, "L1");
        assert!((conf - 0.5).abs() < 1e-12);
    }

    #[test]
    fn oov_only_input_same_as_empty() {
        let m = two_token_model(1);
        assert_eq!(m.predict("zzz qqq"), m.predict(""));
    }

    #[test]
    fn judge_cases() {
        assert_eq!(judge("A", "A").0, Verdict::Pass);
        assert_eq!(judge("A", "B").0, Verdict::Fail);
        let (v1, r1) = judge("A", "B");
        let (v2, r2) = judge("B", "A");
        assert_eq!(v1, v2);
        assert_ne!(r1, r2);
        assert!(r1.contains('A') && r1.contains('B'));
    }

    #[test]
    fn score_all_correct_and_empty() {
        let m = two_token_model(1);
        let eval = vec![
            Example::new("a", "L1", Slice::Gold, Provenance::Benchmark),
            Example::new("b", "L2", Slice::Gold, Provenance::Benchmark),
        ];
        assert_eq!(score(&m, &eval).unwrap(), 1.0);
        assert_eq!(score(&m, &[]), Err(ScoreError::EmptyEvalSet));
    }

    #[test]
    fn score_golden_value_stable() {
        // Frozen on first run of this scenario; guards byte-level drift in
        // generation or training.
        let spec = ToyTaskSpec::demo(13);
        let mut rng = seeds::rng(13, "golden");
        let train_ex = generate_examples(&spec, 32, &mut rng).unwrap();
        let eval_ex = generate_examples(&spec, 40, &mut rng).unwrap();
        let d = DatasetSpec::from_examples(train_ex, 1, None, Vec::new());
        let m = train(&d, &HyperConfig::default()).unwrap();
        let s = score(&m, &eval_ex).unwrap();
        assert_eq!(s, 0.95, "golden score drifted: {s}");
    }

    #[test]
    fn poison_sensitivity_across_seeds() {
        // Flipping >= 30% of labels strictly lowers clean-eval accuracy,
        // checked across 10 seeds.
        let mut degraded = 0;
        for seed in 0..10u64 {
            let spec = ToyTaskSpec::demo(seed);
            let mut rng = seeds::rng(seed, "poison-inv");
            let clean_ex = generate_examples(&spec, 60, &mut rng).unwrap();
            let eval_ex = generate_examples(&spec, 60, &mut rng).unwrap();
            let mut flipped = clean_ex.clone();
            for (i, e) in flipped.iter_mut().enumerate() {
                if i % 10 < 3 {
                    let idx = spec.labels.iter().position(|l| *l == e.target).unwrap();
                    e.target = spec.labels[(idx + 1) % spec.labels.len()].clone();
                }
            }
            let m_clean = train(
                &DatasetSpec::from_examples(clean_ex, 1, None, Vec::new()),
                &HyperConfig::default(),
            )
            .unwrap();
            let m_flip = train(
                &DatasetSpec::from_examples(flipped, 1, None, Vec::new()),
                &HyperConfig::default(),
            )
            .unwrap();
            let s_clean = score(&m_clean, &eval_ex).unwrap();
            let s_flip = score(&m_flip, &eval_ex).unwrap();
            if s_flip < s_clean {
                degraded += 1;
            }
        }
        assert!(degraded >= 9, "flip degraded accuracy in only {degraded}/10 seeds");
    }

    #[test]
    fn alpha_limit_converges_to_tiebreak() {
        let m = two_token_model(1).with_alpha(1e18);
        for input in ["a", "b", "a b", ""] {
            assert_eq!(m.predict(input).0, "L1");
        }
    }

    #[test]
    fn lr_maps_to_clamped_alpha() {
        assert_eq!(smoothing(0.1), 1.0);
        assert_eq!(smoothing(100.0), 10.0);
        assert_eq!(smoothing(1e-9), 0.01);
    }
}
