//! Noise injection: turns clean task examples into realistic noisy
//! inference inputs with ground-truth perturbation labels.
//!
//! Every perturbation kind rolls independently against its configured rate,
//! in fixed table order, so multiple kinds can co-occur on one input. All
//! transforms are pure functions of (text, seeded rng); the same example,
//! config, and seed always produce byte-identical output.
//!
//! Phrase material (openers, injections, fillers, ...) ships as data files
//! compiled into the binary so tests can be bit-exact.

use crate::task::ToyTaskSpec;
use crate::trace::InferenceTrace;
use crate::Example;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;
use thiserror::Error;

// ─── Phrasebooks ────────────────────────────────────────────────────────

macro_rules! phrasebook {
    ($name:ident, $file:literal) => {
        pub static $name: LazyLock<Vec<&'static str>> = LazyLock::new(|| {
            include_str!(concat!("../data/", $file))
                .lines()
                .filter(|l| !l.trim().is_empty())
                .collect()
        });
    };
}

phrasebook!(PREAMBLES, "preambles.txt");
phrasebook!(INSTRUCTIONS, "instructions.txt");
phrasebook!(INJECTIONS, "injections.txt");
phrasebook!(JAILBREAKS, "jailbreaks.txt");
phrasebook!(OFF_DOMAIN, "offdomain.txt");
phrasebook!(META_QUESTIONS, "meta_questions.txt");
phrasebook!(CROSS_BENCHMARK, "cross_benchmark.txt");
phrasebook!(CONTEXT_ASSUMPTION, "context_assumption.txt");
phrasebook!(FILLERS, "fillers.txt");
phrasebook!(SLANG, "slang.txt");
phrasebook!(CODE_SWITCH, "code_switch.txt");
phrasebook!(MISSING_MODALITY, "missing_modality.txt");
phrasebook!(HTML_REMNANTS, "html_remnants.txt");
phrasebook!(METADATA_LEAKS, "metadata_leaks.txt");
phrasebook!(NEGATIONS, "negations.txt");

// ─── Kinds ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Typo,
    PhoneticMisspelling,
    SyntacticError,
    GrammaticalError,
    PunctuationAbuse,
    CasingError,
    AbbreviationSlang,
    CodeSwitching,
    PreambleInjection,
    InstructionFollowing,
    Truncation,
    HtmlRemnant,
    MissingModality,
    IntraDuplication,
    VeryLong,
    OcrArtifact,
    EmptyInput,
    Utf8Anomaly,
    MetadataLeakage,
    LabelFlipAdversarial,
    BoundaryProbe,
    FalsePremise,
    PromptInjection,
    CrossBenchmark,
    Jailbreak,
    OffDomain,
    MetaQuestion,
    ContextAssumption,
    VerbatimRecall,
    Gibberish,
    RetryStorm,
    NearDuplicate,
    ExactDuplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Linguistic,
    Structural,
    Adversarial,
    OffTask,
    Repetition,
}

/// Whether training on the raw (noisy input, original target) pair stays
/// valid. Partial kinds are treated as fixable for filtering but flagged so
/// curation can down-weight them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toxicity {
    Fixable,
    Partial,
    Poisonous,
}

use PerturbationKind::*;

impl PerturbationKind {
    /// All kinds in fixed table order; also the application order.
    pub const ALL: [PerturbationKind; 33] = [
        Typo,
        PhoneticMisspelling,
        SyntacticError,
        GrammaticalError,
        PunctuationAbuse,
        CasingError,
        AbbreviationSlang,
        CodeSwitching,
        PreambleInjection,
        InstructionFollowing,
        Truncation,
        HtmlRemnant,
        MissingModality,
        IntraDuplication,
        VeryLong,
        OcrArtifact,
        EmptyInput,
        Utf8Anomaly,
        MetadataLeakage,
        LabelFlipAdversarial,
        BoundaryProbe,
        FalsePremise,
        PromptInjection,
        CrossBenchmark,
        Jailbreak,
        OffDomain,
        MetaQuestion,
        ContextAssumption,
        VerbatimRecall,
        Gibberish,
        RetryStorm,
        NearDuplicate,
        ExactDuplicate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Typo => "typo",
            PhoneticMisspelling => "phonetic_misspelling",
            SyntacticError => "syntactic_error",
            GrammaticalError => "grammatical_error",
            PunctuationAbuse => "punctuation_abuse",
            CasingError => "casing_error",
            AbbreviationSlang => "abbreviation_slang",
            CodeSwitching => "code_switching",
            PreambleInjection => "preamble_injection",
            InstructionFollowing => "instruction_following",
            Truncation => "truncation",
            HtmlRemnant => "html_remnant",
            MissingModality => "missing_modality",
            IntraDuplication => "intra_duplication",
            VeryLong => "very_long",
            OcrArtifact => "ocr_artifact",
            EmptyInput => "empty_input",
            Utf8Anomaly => "utf8_anomaly",
            MetadataLeakage => "metadata_leakage",
            LabelFlipAdversarial => "label_flip_adversarial",
            BoundaryProbe => "boundary_probe",
            FalsePremise => "false_premise",
            PromptInjection => "prompt_injection",
            CrossBenchmark => "cross_benchmark",
            Jailbreak => "jailbreak",
            OffDomain => "off_domain",
            MetaQuestion => "meta_question",
            ContextAssumption => "context_assumption",
            VerbatimRecall => "verbatim_recall",
            Gibberish => "gibberish",
            RetryStorm => "retry_storm",
            NearDuplicate => "near_duplicate",
            ExactDuplicate => "exact_duplicate",
        }
    }

    pub fn parse(name: &str) -> Option<PerturbationKind> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub fn category(&self) -> Category {
        match self {
            Typo | PhoneticMisspelling | SyntacticError | GrammaticalError | PunctuationAbuse
            | CasingError | AbbreviationSlang | CodeSwitching => Category::Linguistic,
            PreambleInjection | InstructionFollowing | Truncation | HtmlRemnant
            | MissingModality | IntraDuplication | VeryLong | OcrArtifact | EmptyInput
            | Utf8Anomaly | MetadataLeakage => Category::Structural,
            LabelFlipAdversarial | BoundaryProbe | FalsePremise | PromptInjection
            | CrossBenchmark | Jailbreak => Category::Adversarial,
            OffDomain | MetaQuestion | ContextAssumption | VerbatimRecall | Gibberish
            | RetryStorm => Category::OffTask,
            NearDuplicate | ExactDuplicate => Category::Repetition,
        }
    }

    /// Default injection rate from the noise table.
    pub fn default_rate(&self) -> f64 {
        match self {
            Typo => 0.10,
            PhoneticMisspelling => 0.07,
            SyntacticError => 0.06,
            GrammaticalError => 0.05,
            PunctuationAbuse => 0.05,
            CasingError => 0.04,
            AbbreviationSlang => 0.03,
            CodeSwitching => 0.02,
            PreambleInjection => 0.07,
            InstructionFollowing => 0.04,
            Truncation => 0.03,
            HtmlRemnant => 0.02,
            MissingModality => 0.02,
            IntraDuplication => 0.015,
            VeryLong => 0.015,
            OcrArtifact => 0.015,
            EmptyInput => 0.007,
            Utf8Anomaly => 0.007,
            MetadataLeakage => 0.007,
            LabelFlipAdversarial => 0.03,
            BoundaryProbe => 0.03,
            FalsePremise => 0.03,
            PromptInjection => 0.02,
            CrossBenchmark => 0.015,
            Jailbreak => 0.01,
            OffDomain => 0.03,
            MetaQuestion => 0.02,
            ContextAssumption => 0.015,
            VerbatimRecall => 0.01,
            Gibberish => 0.007,
            RetryStorm => 0.007,
            NearDuplicate => 0.05,
            ExactDuplicate => 0.03,
        }
    }

    pub fn toxicity(&self) -> Toxicity {
        match self {
            // Corruption under which the original intent and answer stay
            // valid: the curated pair keeps the gold target.
            Typo | PhoneticMisspelling | SyntacticError | GrammaticalError | PunctuationAbuse
            | CasingError | AbbreviationSlang | CodeSwitching | BoundaryProbe
            | InstructionFollowing | HtmlRemnant | MissingModality | IntraDuplication
            | VeryLong | OcrArtifact | Utf8Anomaly | MetadataLeakage | ContextAssumption
            | VerbatimRecall | RetryStorm | NearDuplicate | ExactDuplicate => Toxicity::Fixable,
            PreambleInjection | Truncation => Toxicity::Partial,
            // Training on the raw pair teaches wrong behavior.
            FalsePremise | LabelFlipAdversarial | OffDomain | PromptInjection | Jailbreak
            | Gibberish | EmptyInput | CrossBenchmark | MetaQuestion => Toxicity::Poisonous,
        }
    }

    /// Kinds that operate on log sequences rather than single texts.
    pub fn is_sequence_level(&self) -> bool {
        matches!(self, RetryStorm | NearDuplicate | ExactDuplicate)
    }
}

/// Rate table: kind -> probability. Serializable as a config file object
/// keyed by kind name.
pub type RateTable = BTreeMap<PerturbationKind, f64>;

/// The default rate table from the noise-kind descriptors.
pub fn default_rates() -> RateTable {
    PerturbationKind::ALL.iter().map(|k| (*k, k.default_rate())).collect()
}

/// Scale poisonous kinds' rates by a common factor until the probability
/// that at least one poisonous kind fires equals `target`. Relative mix
/// between poisonous kinds is preserved; fixable rates are untouched.
pub fn rates_with_poison_rate(base: &RateTable, target: f64) -> RateTable {
    let poison_kinds: Vec<PerturbationKind> = PerturbationKind::ALL
        .iter()
        .copied()
        .filter(|k| k.toxicity() == Toxicity::Poisonous)
        .collect();
    let prob_at = |s: f64| -> f64 {
        1.0 - poison_kinds
            .iter()
            .map(|k| 1.0 - (base.get(k).copied().unwrap_or(0.0) * s).min(0.95))
            .product::<f64>()
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while prob_at(hi) < target && hi < 1024.0 {
        hi *= 2.0;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if prob_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    let mut out = base.clone();
    for k in poison_kinds {
        let r = out.entry(k).or_insert(0.0);
        *r = (*r * s).min(0.95);
    }
    out
}

/// Probability that a sample drawn under `rates` gets at least one
/// poisonous kind.
pub fn poison_probability(rates: &RateTable) -> f64 {
    1.0 - PerturbationKind::ALL
        .iter()
        .filter(|k| k.toxicity() == Toxicity::Poisonous)
        .map(|k| 1.0 - rates.get(k).copied().unwrap_or(0.0))
        .product::<f64>()
}

// ─── Config ─────────────────────────────────────────────────────────────

/// Vocabulary knowledge for the adversarial sub-modes that need it: premise
/// swaps toward the confusable label, boundary distractors, and label flips.
#[derive(Debug, Clone)]
pub struct ConfusionLexicon {
    pub exclusive: BTreeMap<String, Vec<String>>,
    pub confusable: BTreeMap<String, String>,
}

impl ConfusionLexicon {
    pub fn from_task(spec: &ToyTaskSpec) -> Self {
        let mut exclusive = BTreeMap::new();
        let mut confusable = BTreeMap::new();
        for label in &spec.labels {
            exclusive.insert(label.clone(), spec.exclusive_vocab(label));
            if let Some(c) = spec.confusable_of(label) {
                confusable.insert(label.clone(), c.to_string());
            }
        }
        // Labels without a configured confusable fall back to the lexically
        // next label so flips stay well defined.
        for (i, label) in spec.labels.iter().enumerate() {
            confusable
                .entry(label.clone())
                .or_insert_with(|| spec.labels[(i + 1) % spec.labels.len()].clone());
        }
        ConfusionLexicon { exclusive, confusable }
    }
}

#[derive(Debug, Clone)]
pub struct PerturbConfig {
    pub rates: RateTable,
    /// Median token length of the clean pool; very_long pads past 2x this.
    pub median_length: usize,
    pub lexicon: Option<ConfusionLexicon>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig { rates: default_rates(), median_length: 9, lexicon: None }
    }
}

// ─── Perturbed sample ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleToxicity {
    Clean,
    Fixable,
    Poisonous,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbedSample {
    pub original: Example,
    pub noisy_input: String,
    pub applied: Vec<PerturbationKind>,
    pub toxicity: SampleToxicity,
    /// Target as it would be recorded by the serving stack. Differs from
    /// the original only under label_flip_adversarial.
    pub recorded_target: String,
}

/// Roll every kind independently at its configured rate, applying hits in
/// table order. Sequence-level kinds are recorded but leave the text alone;
/// the log generator expands them later.
pub fn perturb_sample(
    e: &Example,
    config: &PerturbConfig,
    rng: &mut ChaCha8Rng,
) -> PerturbedSample {
    let mut text = e.input.clone();
    let mut applied = Vec::new();
    let mut recorded_target = e.target.clone();

    for kind in PerturbationKind::ALL {
        let rate = config.rates.get(&kind).copied().unwrap_or(0.0);
        if rate <= 0.0 {
            continue;
        }
        if rng.random::<f64>() >= rate {
            continue;
        }
        applied.push(kind);
        if kind.is_sequence_level() {
            continue;
        }
        match (kind, &config.lexicon) {
            (LabelFlipAdversarial, Some(lex)) => {
                if let Some(flipped) = lex.confusable.get(&recorded_target) {
                    recorded_target = flipped.clone();
                }
                text = flip_numeric_token(&text, rng);
            }
            (FalsePremise, Some(lex)) => {
                text = swap_premise(&text, &e.target, lex, rng);
            }
            (BoundaryProbe, Some(lex)) => {
                text = insert_confusable_distractor(&text, &e.target, lex, rng);
            }
            _ => {
                text = transform(kind, &text, rng, config.median_length);
            }
        }
    }

    let toxicity = if applied.is_empty() {
        SampleToxicity::Clean
    } else if applied.iter().any(|k| k.toxicity() == Toxicity::Poisonous) {
        SampleToxicity::Poisonous
    } else {
        SampleToxicity::Fixable
    };

    PerturbedSample { original: e.clone(), noisy_input: text, applied, toxicity, recorded_target }
}

#[derive(Debug, Error, PartialEq)]
pub enum PerturbError {
    #[error("kind {0} operates on log sequences, not single texts")]
    UnsupportedKind(&'static str),
    #[error("input too short: need >= {need} tokens, got {got}")]
    TooShort { need: usize, got: usize },
}

/// Apply one kind to a single text. Sequence-level kinds are rejected.
/// This is the lexicon-free surface: false_premise inserts a negation
/// marker, boundary_probe and label_flip use numeric sub-modes.
pub fn apply_kind(
    kind: PerturbationKind,
    text: &str,
    rng: &mut ChaCha8Rng,
) -> Result<String, PerturbError> {
    if kind.is_sequence_level() {
        return Err(PerturbError::UnsupportedKind(kind.name()));
    }
    Ok(transform(kind, text, rng, 9))
}

// ─── Per-kind transforms ────────────────────────────────────────────────

fn tokens_of(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

fn pick<'a>(book: &'a [&'static str], rng: &mut ChaCha8Rng) -> &'a str {
    book.choose(rng).copied().unwrap_or("")
}

fn transform(kind: PerturbationKind, text: &str, rng: &mut ChaCha8Rng, median: usize) -> String {
    match kind {
        Typo => apply_typo(text, rng),
        PhoneticMisspelling => apply_phonetic(text, rng),
        SyntacticError => apply_syntactic(text, rng),
        GrammaticalError => apply_grammatical(text, rng),
        PunctuationAbuse => apply_punctuation(text, rng),
        CasingError => {
            let mode = rng.random_range(0..3u8);
            apply_casing(text, mode, rng)
        }
        AbbreviationSlang => apply_slang(text, rng),
        CodeSwitching => apply_code_switch(text, rng),
        PreambleInjection => format!("{} {}", pick(&PREAMBLES, rng), text),
        InstructionFollowing => format!("{} {}", text, pick(&INSTRUCTIONS, rng)),
        Truncation => apply_truncation(text, rng),
        HtmlRemnant => insert_token(text, pick(&HTML_REMNANTS, rng), rng),
        MissingModality => format!("{} {}", pick(&MISSING_MODALITY, rng), text),
        IntraDuplication => apply_intra_duplication(text, rng),
        VeryLong => apply_very_long(text, rng, median),
        OcrArtifact => apply_ocr(text, rng),
        EmptyInput => ["", " ", "  ", "\t"].choose(rng).unwrap().to_string(),
        Utf8Anomaly => apply_utf8_anomaly(text, rng),
        MetadataLeakage => format!("{} {}", text, pick(&METADATA_LEAKS, rng)),
        LabelFlipAdversarial => flip_numeric_token(text, rng),
        BoundaryProbe => insert_token(text, &format!("{}", rng.random_range(10..100)), rng),
        FalsePremise => insert_negation(text, rng),
        PromptInjection => format!("{} {}", text, pick(&INJECTIONS, rng)),
        CrossBenchmark => pick(&CROSS_BENCHMARK, rng).to_string(),
        Jailbreak => format!("{} {}", text, pick(&JAILBREAKS, rng)),
        OffDomain => pick(&OFF_DOMAIN, rng).to_string(),
        MetaQuestion => pick(&META_QUESTIONS, rng).to_string(),
        ContextAssumption => format!("{} {}", pick(&CONTEXT_ASSUMPTION, rng), text),
        VerbatimRecall => format!("\"{text}\""),
        Gibberish => apply_gibberish(text, rng),
        RetryStorm | NearDuplicate | ExactDuplicate => text.to_string(),
    }
}

/// One transposition, insertion, or deletion per 20 characters, minimum one.
fn apply_typo(text: &str, rng: &mut ChaCha8Rng) -> String {
    let mut chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return text.to_string();
    }
    let edits = (chars.len() / 20).max(1);
    for _ in 0..edits {
        if chars.is_empty() {
            break;
        }
        let i = rng.random_range(0..chars.len());
        match rng.random_range(0..3u8) {
            0 if i + 1 < chars.len() => chars.swap(i, i + 1),
            1 => chars.insert(i, chars[i]),
            _ => {
                chars.remove(i);
            }
        }
    }
    chars.into_iter().collect()
}

const PHONETIC_SUBS: [(&str, &str); 8] = [
    ("ph", "f"),
    ("ck", "k"),
    ("qu", "kw"),
    ("oo", "u"),
    ("ee", "i"),
    ("ou", "ow"),
    ("ka", "ca"),
    ("se", "ze"),
];

fn apply_phonetic(text: &str, rng: &mut ChaCha8Rng) -> String {
    for (from, to) in PHONETIC_SUBS {
        if text.contains(from) {
            return text.replacen(from, to, 1);
        }
    }
    // Fallback: swap one vowel for another.
    let vowels = ['a', 'e', 'i', 'o', 'u'];
    let mut chars: Vec<char> = text.chars().collect();
    let spots: Vec<usize> =
        chars.iter().enumerate().filter(|(_, c)| vowels.contains(c)).map(|(i, _)| i).collect();
    if let Some(&i) = spots.as_slice().choose(rng) {
        let mut v = *vowels.as_slice().choose(rng).unwrap();
        if v == chars[i] {
            v = if v == 'a' { 'e' } else { 'a' };
        }
        chars[i] = v;
    }
    chars.into_iter().collect()
}

/// Drop a token and leave a dangling fragment.
fn apply_syntactic(text: &str, rng: &mut ChaCha8Rng) -> String {
    let mut toks = tokens_of(text);
    if toks.len() >= 2 {
        let i = rng.random_range(0..toks.len());
        toks.remove(i);
    }
    let fragment = ["the", "and of", "which"].choose(rng).unwrap();
    toks.push((*fragment).to_string());
    toks.join(" ")
}

fn apply_grammatical(text: &str, rng: &mut ChaCha8Rng) -> String {
    let mut toks = tokens_of(text);
    if toks.is_empty() {
        return text.to_string();
    }
    if rng.random::<bool>() {
        let filler = ["a", "the", "is", "was", "been"].choose(rng).unwrap();
        let i = rng.random_range(0..=toks.len());
        toks.insert(i, (*filler).to_string());
    } else {
        let i = rng.random_range(0..toks.len());
        toks[i] = format!("{}s", toks[i]);
    }
    toks.join(" ")
}

fn apply_punctuation(text: &str, rng: &mut ChaCha8Rng) -> String {
    if rng.random::<bool>() {
        text.chars().filter(|c| !matches!(c, '.' | ',' | '!' | '?' | ';' | ':')).collect()
    } else {
        let mut toks = tokens_of(text);
        if toks.is_empty() {
            return "!!!".to_string();
        }
        let marks = ["!!!", "??", ",,", "..."];
        for _ in 0..2 {
            let i = rng.random_range(0..toks.len());
            toks[i] = format!("{}{}", toks[i], marks.choose(rng).unwrap());
        }
        toks.join(" ")
    }
}

/// mode 0 = all-lower, 1 = all-upper, 2 = per-character random.
pub fn apply_casing(text: &str, mode: u8, rng: &mut ChaCha8Rng) -> String {
    match mode {
        0 => text.to_lowercase(),
        1 => text.to_uppercase(),
        _ => text
            .chars()
            .map(|c| {
                if rng.random::<bool>() {
                    c.to_uppercase().next().unwrap_or(c)
                } else {
                    c.to_lowercase().next().unwrap_or(c)
                }
            })
            .collect(),
    }
}

fn apply_slang(text: &str, rng: &mut ChaCha8Rng) -> String {
    let pairs: Vec<(&str, &str)> =
        SLANG.iter().filter_map(|l| l.split_once('=')).collect();
    let mut toks = tokens_of(text);
    let mut replaced = false;
    for t in toks.iter_mut() {
        if let Some((_, to)) = pairs.iter().find(|(from, _)| from == t) {
            *t = (*to).to_string();
            replaced = true;
        }
    }
    if !replaced {
        let i = rng.random_range(0..=toks.len());
        toks.insert(i, "pls".to_string());
    }
    toks.join(" ")
}

fn apply_code_switch(text: &str, rng: &mut ChaCha8Rng) -> String {
    let phrase = pick(&CODE_SWITCH, rng);
    let mut toks = tokens_of(text);
    if toks.is_empty() {
        return phrase.to_string();
    }
    let i = rng.random_range(0..toks.len());
    toks[i] = phrase.to_string();
    toks.join(" ")
}

/// Cut at a uniform point in the back half; mid-token allowed.
fn apply_truncation(text: &str, rng: &mut ChaCha8Rng) -> String {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() < 2 {
        return text.to_string();
    }
    let cut = rng.random_range(chars.len() / 2..chars.len());
    chars[..cut].iter().collect()
}

fn insert_token(text: &str, token: &str, rng: &mut ChaCha8Rng) -> String {
    let mut toks = tokens_of(text);
    let i = rng.random_range(0..=toks.len());
    toks.insert(i, token.to_string());
    toks.join(" ")
}

fn apply_intra_duplication(text: &str, rng: &mut ChaCha8Rng) -> String {
    let toks = tokens_of(text);
    if toks.is_empty() {
        return text.to_string();
    }
    let start = rng.random_range(0..toks.len());
    let len = rng.random_range(1..=(toks.len() - start).min(4));
    let mut out = toks[..start + len].to_vec();
    out.extend_from_slice(&toks[start..start + len]);
    out.extend_from_slice(&toks[start + len..]);
    out.join(" ")
}

fn apply_very_long(text: &str, rng: &mut ChaCha8Rng, median: usize) -> String {
    let mut out = text.to_string();
    let target = 2 * median + 1;
    while crate::pipeline::token_count(&out) <= target {
        out.push(' ');
        out.push_str(pick(&FILLERS, rng));
    }
    out
}

/// l<->1 and O<->0 confusion (lowercase o/i as fallback candidates), at
/// least one position swapped.
fn apply_ocr(text: &str, rng: &mut ChaCha8Rng) -> String {
    let swap = |c: char| -> Option<char> {
        match c {
            'l' => Some('1'),
            '1' => Some('l'),
            'O' => Some('0'),
            '0' => Some('O'),
            'o' => Some('0'),
            'i' => Some('1'),
            _ => None,
        }
    };
    let mut chars: Vec<char> = text.chars().collect();
    let candidates: Vec<usize> =
        chars.iter().enumerate().filter(|(_, c)| swap(**c).is_some()).map(|(i, _)| i).collect();
    if candidates.is_empty() {
        chars.push('0');
        return chars.into_iter().collect();
    }
    let mut any = false;
    for &i in &candidates {
        if rng.random::<bool>() {
            chars[i] = swap(chars[i]).unwrap();
            any = true;
        }
    }
    if !any {
        let i = candidates[0];
        chars[i] = swap(chars[i]).unwrap();
    }
    chars.into_iter().collect()
}

fn apply_utf8_anomaly(text: &str, rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..3u8) {
        0 => format!("\u{feff}{text}"),
        1 => {
            let mut toks = tokens_of(text);
            if toks.is_empty() {
                return format!("\u{201c}{text}\u{201d}");
            }
            let i = rng.random_range(0..toks.len());
            toks[i] = format!("\u{201c}{}\u{201d}", toks[i]);
            toks.join(" ")
        }
        _ => {
            let mut chars: Vec<char> = text.chars().collect();
            let i = rng.random_range(0..=chars.len());
            chars.insert(i, '\u{00a0}');
            chars.into_iter().collect()
        }
    }
}

/// Replace with keyboard-mash of similar character length.
fn apply_gibberish(text: &str, rng: &mut ChaCha8Rng) -> String {
    const ROWS: &[u8] = b"qwertyuiopasdfghjkl;zxcvbnm,./1290";
    let target = text.chars().count().max(24);
    let mut out = String::new();
    while out.chars().count() < target {
        let run = rng.random_range(3..=9);
        for _ in 0..run {
            out.push(ROWS[rng.random_range(0..ROWS.len())] as char);
        }
        out.push(' ');
    }
    out.trim_end().to_string()
}

/// If a numeric token is present, swap it for a different number (the
/// number-swap flavor of label flipping); otherwise leave the text alone
/// and let the recorded target carry the flip.
fn flip_numeric_token(text: &str, rng: &mut ChaCha8Rng) -> String {
    let mut toks = tokens_of(text);
    for t in toks.iter_mut() {
        if t.chars().all(|c| c.is_ascii_digit()) && !t.is_empty() {
            let n: u64 = t.parse().unwrap_or(0);
            *t = format!("{}", n + 1 + rng.random_range(0..9u64));
            return toks.join(" ");
        }
    }
    text.to_string()
}

fn insert_negation(text: &str, rng: &mut ChaCha8Rng) -> String {
    insert_token(text, pick(&NEGATIONS, rng), rng)
}

/// Swap a majority of the gold label's exclusive tokens toward the
/// confusable label so the recorded answer no longer follows.
fn swap_premise(text: &str, gold: &str, lex: &ConfusionLexicon, rng: &mut ChaCha8Rng) -> String {
    let counterpart = match lex.confusable.get(gold) {
        Some(c) => c,
        None => return insert_negation(text, rng),
    };
    let own: BTreeSet<&String> = lex.exclusive.get(gold).map(|v| v.iter().collect()).unwrap_or_default();
    let other = match lex.exclusive.get(counterpart) {
        Some(v) if !v.is_empty() => v,
        _ => return insert_negation(text, rng),
    };
    let mut toks = tokens_of(text);
    let own_positions: Vec<usize> = toks
        .iter()
        .enumerate()
        .filter(|(_, t)| own.contains(t))
        .map(|(i, _)| i)
        .collect();
    if own_positions.is_empty() {
        // No exclusive evidence to invert; plant two counterpart tokens.
        let mut out = toks;
        for _ in 0..2 {
            let i = rng.random_range(0..=out.len());
            out.insert(i, other.choose(rng).unwrap().clone());
        }
        return out.join(" ");
    }
    let k = own_positions.len();
    let m = k / 2 + 1; // strict majority
    let mut positions = own_positions;
    positions.shuffle(rng);
    for &i in positions.iter().take(m) {
        toks[i] = other.choose(rng).unwrap().clone();
    }
    toks.join(" ")
}

/// Insert one or two confusable-label tokens while keeping the gold
/// majority intact; a decision-boundary distractor, not a premise change.
fn insert_confusable_distractor(
    text: &str,
    gold: &str,
    lex: &ConfusionLexicon,
    rng: &mut ChaCha8Rng,
) -> String {
    let counterpart = match lex.confusable.get(gold) {
        Some(c) => c,
        None => return insert_token(text, &format!("{}", rng.random_range(10..100)), rng),
    };
    let other = match lex.exclusive.get(counterpart) {
        Some(v) if !v.is_empty() => v,
        _ => return insert_token(text, &format!("{}", rng.random_range(10..100)), rng),
    };
    let mut toks = tokens_of(text);
    let n = rng.random_range(1..=2usize);
    for _ in 0..n {
        let i = rng.random_range(0..=toks.len());
        toks.insert(i, other.choose(rng).unwrap().clone());
    }
    toks.join(" ")
}

// ─── Similarity ─────────────────────────────────────────────────────────

/// |a ∩ b| / |a ∪ b|; both empty is defined as 1.0.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// A variant of the example whose token-set Jaccard similarity to the
/// original stays at or above 0.8; the target is unchanged.
pub fn make_near_duplicate(e: &Example, rng: &mut ChaCha8Rng) -> Result<Example, PerturbError> {
    let toks = tokens_of(&e.input);
    if toks.len() < 5 {
        return Err(PerturbError::TooShort { need: 5, got: toks.len() });
    }
    let distinct: BTreeSet<&String> = toks.iter().collect();
    let n = distinct.len();

    // (n - s) / (n + s + i) >= 0.8 bounds the edit plan. Substitutions cost
    // double (remove one member, add one); small sets must stick to
    // insertions.
    let s_max = n / 9;
    let subs = if s_max > 0 && rng.random::<bool>() { 1 } else { 0 };
    let i_max = (((n - subs) as f64 / 0.8).floor() as usize).saturating_sub(n + subs);
    let inserts = if subs == 0 { rng.random_range(1..=i_max.max(1).min(2)) } else { 0 };

    let mut out = toks.clone();
    let fresh = |rng: &mut ChaCha8Rng| format!("nd{}", rng.random_range(100..1000));
    for _ in 0..subs {
        let i = rng.random_range(0..out.len());
        out[i] = fresh(rng);
    }
    for _ in 0..inserts {
        let i = rng.random_range(0..=out.len());
        out.insert(i, fresh(rng));
    }
    let mut dup = e.clone();
    dup.input = out.join(" ");
    dup.length = crate::pipeline::token_count(&dup.input);
    Ok(dup)
}

// ─── Log-sequence decoration ────────────────────────────────────────────

/// A trace awaiting temporal decoration, with its sequence-level markers.
#[derive(Debug, Clone)]
pub struct RawLog {
    pub trace: InferenceTrace,
    pub retry_storm: bool,
}

#[derive(Debug, Clone)]
pub struct DecorateConfig {
    /// ln of the median latency in milliseconds.
    pub latency_mu_ln: f64,
    pub latency_sigma: f64,
    pub timeout_rate: f64,
    pub start_ts_ms: u64,
}

impl Default for DecorateConfig {
    fn default() -> Self {
        DecorateConfig {
            latency_mu_ln: (300.0f64).ln(),
            latency_sigma: 0.8,
            timeout_rate: 0.015,
            start_ts_ms: 1_700_000_000_000,
        }
    }
}

/// Assign batched timestamps and log-normal latencies, expand retry storms
/// into 3-8 rapid resubmissions, and turn `timeout_rate` of entries into
/// timeout-retry pairs.
pub fn decorate_log_sequence(
    logs: Vec<RawLog>,
    cfg: &DecorateConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<InferenceTrace> {
    let latency = LogNormal::new(cfg.latency_mu_ln, cfg.latency_sigma).expect("valid lognormal");
    let mut out = Vec::with_capacity(logs.len());
    let mut ts = cfg.start_ts_ms;
    let mut batch_left: usize = 0;

    for raw in logs {
        if batch_left == 0 {
            // Batch effects: bursts of nearby timestamps separated by gaps.
            batch_left = rng.random_range(8..=24);
            ts += rng.random_range(10_000..=120_000);
        }
        batch_left -= 1;
        ts += rng.random_range(5..=50);

        let resubmissions = if raw.retry_storm { rng.random_range(3..=8) } else { 1 };
        let timeout = rng.random::<f64>() < cfg.timeout_rate;

        if timeout {
            let mut t = raw.trace.clone();
            t.id = format!("{}-t0", raw.trace.id);
            t.prediction = String::new();
            t.corrected = None;
            t.verdict = crate::task::Verdict::Fail;
            t.judge_reasoning = "request timed out before completion".to_string();
            t.judge_meta = crate::trace::JudgeMeta::unreviewed("timeout");
            t.ts = ts;
            t.latency_ms = 30_000;
            out.push(t);
            ts += rng.random_range(200..=1500);
        }

        for r in 0..resubmissions {
            let mut t = raw.trace.clone();
            if r > 0 {
                t.id = format!("{}-s{r}", raw.trace.id);
                ts += rng.random_range(100..=900);
            }
            t.ts = ts;
            t.latency_ms = latency.sample(rng).round().max(1.0) as u64;
            out.push(t);
        }
    }
    out
}
