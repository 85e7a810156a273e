//! Monte Carlo graph search over training pipelines: UCT selection over
//! expandable nodes, rule-driven expansion, exact backpropagation of
//! descendant statistics through the DAG, and stagnation recovery by
//! trajectory-aware evolution or cross-branch fusion.
//!
//! Every node holds a complete pipeline and its realized score from a true
//! train-and-evaluate run; there are no surrogate scores. Graph mutation is
//! single-writer and the whole loop is deterministic for a fixed seed, so a
//! rerun reproduces the trajectory log byte for byte.

use crate::curation::{self, CurationConfig};
use crate::gates;
use crate::pipeline::{DatasetSpec, Example, Mode, Pipeline, StrategySpec, SupervisionFormat};
use crate::seeds;
use crate::task::{self, FailureCase, ToyTaskSpec};
use crate::trace::InferenceTrace;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

// ─── Nodes and graph ────────────────────────────────────────────────────

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveComponent {
    Data,
    Hyper,
    Strategy,
}

#[derive(Debug, Clone)]
pub struct SearchNode {
    pub id: NodeId,
    pub pipeline: Pipeline,
    /// Realized evaluation score; set exactly once. Negative infinity for
    /// failed evaluations.
    pub score: f64,
    pub visits: u64,
    /// Sum of descendant contributions (own score included); mean is
    /// sum / visits. Failed nodes contribute zero.
    pub sum: f64,
    pub parents: Vec<NodeId>,
    pub children: Vec<NodeId>,
    pub move_desc: String,
    pub component: Option<MoveComponent>,
    pub regressions: Option<u64>,
    pub feasible: bool,
    pub failed: bool,
    pub expandable: bool,
    pub menu_cursor: usize,
    pub failures: Vec<FailureCase>,
}

impl SearchNode {
    pub fn descendant_mean(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.sum / self.visits as f64
        }
    }

    fn contribution(&self) -> f64 {
        if self.failed {
            0.0
        } else {
            self.score
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SearchGraph {
    pub nodes: Vec<SearchNode>,
    pub evaluations: u64,
    pub best: Option<NodeId>,
    keys: BTreeSet<u64>,
}

impl SearchGraph {
    pub fn node(&self, id: NodeId) -> &SearchNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.map(|id| self.nodes[id].score)
    }

    /// True when an equivalent pipeline (same training content, hyper, and
    /// strategy) has already been evaluated.
    pub fn contains_pipeline(&self, p: &Pipeline) -> bool {
        self.keys.contains(&pipeline_key(p))
    }

    fn add_node(&mut self, mut node: SearchNode, parents: &[NodeId]) -> NodeId {
        let id = self.nodes.len();
        node.id = id;
        node.parents = parents.to_vec();
        self.keys.insert(pipeline_key(&node.pipeline));
        self.nodes.push(node);
        for &p in parents {
            self.nodes[p].children.push(id);
        }
        id
    }

    /// Ancestors of a node, each counted once even via multiple paths.
    fn ancestors(&self, id: NodeId) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<NodeId> = self.nodes[id].parents.clone();
        while let Some(n) = stack.pop() {
            if out.insert(n) {
                stack.extend(self.nodes[n].parents.iter().copied());
            }
        }
        out
    }

    /// Descendants of a node, each counted once, in creation order.
    pub fn descendants(&self, id: NodeId) -> Vec<NodeId> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<NodeId> = self.nodes[id].children.clone();
        while let Some(n) = stack.pop() {
            if seen.insert(n) {
                stack.extend(self.nodes[n].children.iter().copied());
            }
        }
        seen.into_iter().collect()
    }

    /// Verify the graph has no cycles (edges always point to later ids, so
    /// this checks the construction invariant).
    pub fn is_acyclic(&self) -> bool {
        self.nodes.iter().all(|n| n.children.iter().all(|&c| c > n.id))
    }
}

/// Identity of a pipeline for deduplication: training content plus hyper
/// and strategy. Version numbers and curation logs do not affect it.
pub fn pipeline_key(p: &Pipeline) -> u64 {
    let mut repr = String::new();
    for e in &p.dataset.examples {
        repr.push_str(&e.input);
        repr.push('\u{1}');
        repr.push_str(&e.target);
        repr.push('\u{2}');
    }
    repr.push_str(&format!(
        "{}|{}|{}|{}|{}|{:?}|{:?}|{:?}",
        p.hyper.model_id,
        p.hyper.lora_rank,
        p.hyper.learning_rate,
        p.hyper.batch_size,
        p.hyper.epochs.min(4),
        p.hyper.system_prompt,
        p.strategy,
        p.mode,
    ));
    seeds::derive(0x9e37_79b9, &repr)
}

// ─── UCT ────────────────────────────────────────────────────────────────

/// Descendant mean plus the exploration bonus c * sqrt(ln N / n). An
/// unvisited node has infinite priority.
pub fn uct_score(node: &SearchNode, total_evaluations: u64, c: f64) -> f64 {
    if node.visits == 0 {
        return f64::INFINITY;
    }
    node.descendant_mean()
        + c * ((total_evaluations.max(1) as f64).ln() / node.visits as f64).sqrt()
}

/// Linear decay from `c0` at t = 0 to `c_min` at t = budget.
pub fn exploration_schedule(t: u64, budget: u64, c0: f64, c_min: f64) -> f64 {
    if budget == 0 {
        return c_min;
    }
    let frac = (t as f64 / budget as f64).clamp(0.0, 1.0);
    c0 * (1.0 - frac) + c_min * frac
}

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("no expandable leaf remains")]
    SearchExhausted,
}

/// Highest-UCT expandable node; ties break toward earlier creation.
pub fn select_leaf(graph: &SearchGraph, c: f64) -> Result<NodeId, SearchError> {
    let mut best: Option<(NodeId, f64)> = None;
    for n in &graph.nodes {
        if !n.expandable || n.failed {
            continue;
        }
        let u = uct_score(n, graph.evaluations, c);
        let better = match best {
            None => true,
            Some((_, bu)) => u > bu,
        };
        if better {
            best = Some((n.id, u));
        }
    }
    best.map(|(id, _)| id).ok_or(SearchError::SearchExhausted)
}

/// Add one evaluation to every ancestor's statistics; DAG ancestors are
/// updated once even when reachable through multiple paths.
pub fn backprop(graph: &mut SearchGraph, id: NodeId) {
    let contribution = graph.nodes[id].contribution();
    for a in graph.ancestors(id) {
        graph.nodes[a].visits += 1;
        graph.nodes[a].sum += contribution;
    }
}

/// Recompute (visits, sum) for every node from scratch; the incremental
/// statistics must match this exactly.
pub fn recompute_statistics(graph: &SearchGraph) -> Vec<(u64, f64)> {
    graph
        .nodes
        .iter()
        .map(|n| {
            let desc = graph.descendants(n.id);
            let visits = 1 + desc.len() as u64;
            let sum = n.contribution()
                + desc.iter().map(|&d| graph.nodes[d].contribution()).sum::<f64>();
            (visits, sum)
        })
        .collect()
}

/// True when the last `window` expansions under `branch_head` produced no
/// score above the branch's best before them.
pub fn detect_stagnation(graph: &SearchGraph, branch_head: NodeId, window: usize) -> bool {
    let desc = graph.descendants(branch_head);
    if desc.len() < window {
        return false;
    }
    let (earlier, recent) = desc.split_at(desc.len() - window);
    let prior_best = earlier
        .iter()
        .map(|&d| graph.nodes[d].score)
        .fold(graph.nodes[branch_head].score, f64::max);
    recent.iter().all(|&d| graph.nodes[d].score <= prior_best)
}

/// The ancestor of `id` sitting directly under the root (or the root for
/// the root itself).
pub fn branch_head(graph: &SearchGraph, id: NodeId) -> NodeId {
    let mut cur = id;
    loop {
        match graph.nodes[cur].parents.first() {
            None => return cur,
            Some(0) => return cur,
            Some(&p) => cur = p,
        }
    }
}

// ─── Proposers ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Proposal {
    pub pipeline: Pipeline,
    pub description: String,
    pub component: MoveComponent,
    pub next_cursor: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum ProposeError {
    #[error("move menu exhausted")]
    MenuExhausted,
}

pub trait Proposer {
    /// Next child configuration from the parent's move menu, skipping
    /// pipelines already in the graph.
    fn propose(&self, parent: &SearchNode, graph: &SearchGraph) -> Result<Proposal, ProposeError>;

    /// Replace one component with a fresh draw from its move menu; must
    /// differ from the base in that component. None when the space offers
    /// no alternative.
    fn fresh_component(
        &self,
        base: &Pipeline,
        component: MoveComponent,
        salt: u64,
    ) -> Option<(Pipeline, String)>;

    /// Re-run a dataset through composition so curation bands hold after
    /// fusion. None leaves the dataset as-is.
    fn recompose(&self, dataset: &DatasetSpec, salt: u64) -> Option<DatasetSpec> {
        let _ = (dataset, salt);
        None
    }
}

// ─── Rule proposer ──────────────────────────────────────────────────────

/// Score-banded move menus: below 0.80 the dataset gets fundamental rework,
/// between 0.80 and 0.95 hyperparameters move with the dataset frozen,
/// above 0.95 only surgical augmentation of 2-3 examples per remaining
/// failure pattern.
pub struct RuleProposer {
    pub task: ToyTaskSpec,
    pub curation: CurationConfig,
    /// Deployed model's dataset, sampled for replay in production mode.
    pub replay_parent: Option<DatasetSpec>,
    pub seed: u64,
}

const PROMPT_VARIANTS: [&str; 3] =
    ["", "classify the user intent label", "respond with the single best label"];

const DATA_MOVE_VARIANTS: usize = 4;
const SURGICAL_VARIANTS: usize = 4;

enum MoveBand {
    Rework,
    HyperTune,
    Surgical,
}

fn band(score: f64) -> MoveBand {
    if score < 0.80 {
        MoveBand::Rework
    } else if score <= 0.95 {
        MoveBand::HyperTune
    } else {
        MoveBand::Surgical
    }
}

impl RuleProposer {
    fn compose(
        &self,
        gold: &[Example],
        hard: &[Example],
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Option<DatasetSpec> {
        curation::compose_dataset(gold, hard, self.replay_parent.as_ref(), &self.curation, rng).ok()
    }

    /// Most frequent (predicted, expected) pair among the parent's failures.
    fn worst_pattern(failures: &[FailureCase]) -> Option<(String, String)> {
        let mut counts: std::collections::BTreeMap<(&str, &str), usize> =
            std::collections::BTreeMap::new();
        for f in failures {
            *counts.entry((f.predicted.as_str(), f.expected.as_str())).or_insert(0) += 1;
        }
        counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|((p, e), _)| (p.to_string(), e.to_string()))
    }

    fn slice_pool(dataset: &DatasetSpec, slice: crate::pipeline::Slice) -> Vec<Example> {
        dataset.examples.iter().filter(|e| e.slice == slice).cloned().collect()
    }

    fn data_move(
        &self,
        parent: &SearchNode,
        move_idx: usize,
        variant: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Option<(Pipeline, String)> {
        let d = &parent.pipeline.dataset;
        let gold = Self::slice_pool(d, crate::pipeline::Slice::Gold);
        let hard = Self::slice_pool(d, crate::pipeline::Slice::HardNegative);
        let dataset = match move_idx {
            0 => {
                // regenerate the gold slice from the task generator
                let n = gold.len().max(8) + variant * 4;
                let fresh = task::generate_examples(&self.task, n, rng).ok()?;
                self.compose(&fresh, &hard, rng)?
            }
            1 => {
                // hard negatives for the worst failure pattern
                let (pred, expected) = Self::worst_pattern(&parent.failures).or_else(|| {
                    self.task
                        .confusable_pairs
                        .first()
                        .map(|(a, b)| (a.clone(), b.clone()))
                })?;
                let target_label = if self.task.vocab.contains_key(&expected) {
                    expected
                } else {
                    pred
                };
                let gen = curation::ToyCounterGenerator { task: &self.task };
                let mut new_hard = hard.clone();
                let sources: Vec<&Example> =
                    gold.iter().filter(|e| e.target == target_label).collect();
                let want = 6 + 3 * variant;
                let mut added = 0;
                for src in sources.iter().cycle().take(sources.len() * 2) {
                    if added >= want {
                        break;
                    }
                    if let Ok((_, h)) = curation::two_for_one(src, &gen, rng) {
                        new_hard.push(h);
                        added += 1;
                    }
                }
                if added == 0 {
                    return None;
                }
                self.compose(&gold, &new_hard, rng)?
            }
            _ => {
                // rebalance: cap every label at the smallest label count
                let mut counts: std::collections::BTreeMap<&str, usize> =
                    std::collections::BTreeMap::new();
                for e in &gold {
                    *counts.entry(e.target.as_str()).or_insert(0) += 1;
                }
                let cap = counts.values().copied().min()? + variant;
                let mut kept: std::collections::BTreeMap<String, usize> =
                    std::collections::BTreeMap::new();
                let balanced: Vec<Example> = gold
                    .iter()
                    .filter(|e| {
                        let k = kept.entry(e.target.clone()).or_insert(0);
                        *k += 1;
                        *k <= cap
                    })
                    .cloned()
                    .collect();
                self.compose(&balanced, &hard, rng)?
            }
        };
        let name = ["regenerate_gold", "add_hard_negatives", "rebalance_labels"][move_idx];
        let mut p = parent.pipeline.clone();
        p.dataset = dataset;
        Some((p, format!("data:{name} v{variant}")))
    }

    fn hyper_move(&self, parent: &SearchNode, idx: usize) -> Option<(Pipeline, String)> {
        let h = &parent.pipeline.hyper;
        let mut nh = h.clone();
        let desc = match idx {
            0 => {
                if h.epochs <= 1 {
                    return None;
                }
                nh.epochs = h.epochs / 2;
                format!("hyper:epochs {} -> {}", h.epochs, nh.epochs)
            }
            1 => {
                if h.epochs >= 8 {
                    return None;
                }
                nh.epochs = (h.epochs * 2).min(8);
                format!("hyper:epochs {} -> {}", h.epochs, nh.epochs)
            }
            2 => {
                nh.learning_rate = h.learning_rate / 2.0;
                format!("hyper:lr {} -> {}", h.learning_rate, nh.learning_rate)
            }
            3 => {
                nh.learning_rate = h.learning_rate * 2.0;
                format!("hyper:lr {} -> {}", h.learning_rate, nh.learning_rate)
            }
            4 | 5 => {
                let prompt = PROMPT_VARIANTS[idx - 3];
                if h.system_prompt == prompt {
                    return None;
                }
                nh.system_prompt = prompt.to_string();
                format!("hyper:prompt '{prompt}'")
            }
            _ => {
                nh.model_id = if h.model_id == "toy-count-base" {
                    "toy-count-alt".to_string()
                } else {
                    "toy-count-base".to_string()
                };
                format!("hyper:model {} -> {}", h.model_id, nh.model_id)
            }
        };
        let mut p = parent.pipeline.clone();
        p.hyper = nh;
        Some((p, desc))
    }

    /// 2-3 targeted examples per remaining failure pattern, leaning on the
    /// expected label's vocabulary with a minority from the predicted one.
    fn surgical_move(
        &self,
        parent: &SearchNode,
        variant: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Option<(Pipeline, String)> {
        if parent.failures.is_empty() {
            return None;
        }
        let mut patterns: std::collections::BTreeMap<(String, String), usize> =
            std::collections::BTreeMap::new();
        for f in &parent.failures {
            *patterns.entry((f.predicted.clone(), f.expected.clone())).or_insert(0) += 1;
        }
        let per_pattern = 2 + (variant % 2); // 2 or 3
        let d = &parent.pipeline.dataset;
        let mut gold = Self::slice_pool(d, crate::pipeline::Slice::Gold);
        let hard = Self::slice_pool(d, crate::pipeline::Slice::HardNegative);
        use rand::seq::IndexedRandom;
        use rand::Rng;
        let mut added = 0;
        for ((pred, expected), _) in patterns {
            if !self.task.vocab.contains_key(&expected) {
                continue;
            }
            let expected_vocab = &self.task.vocab[&expected];
            let pred_vocab = self.task.vocab.get(&pred);
            for _ in 0..per_pattern {
                let (lo, hi) = self.task.input_length_range;
                let len = rng.random_range(lo..=hi);
                let minority = pred_vocab.map(|_| len / 3).unwrap_or(0);
                let mut toks: Vec<&str> = Vec::with_capacity(len);
                for i in 0..len {
                    let v = if i < minority { pred_vocab.unwrap() } else { expected_vocab };
                    toks.push(v.choose(rng).unwrap().as_str());
                }
                gold.push(Example::new(
                    toks.join(" "),
                    expected.as_str(),
                    crate::pipeline::Slice::Gold,
                    crate::pipeline::Provenance::Synthesized,
                ));
                added += 1;
            }
        }
        if added == 0 {
            return None;
        }
        let dataset = self.compose(&gold, &hard, rng)?;
        let mut p = parent.pipeline.clone();
        p.dataset = dataset;
        Some((p, format!("data:targeted_augment v{variant} (+{added})")))
    }

    fn entry(
        &self,
        parent: &SearchNode,
        cursor: usize,
    ) -> Option<Option<(Pipeline, String, MoveComponent)>> {
        // Outer None = menu exhausted; inner None = entry inapplicable.
        let mut rng = seeds::rng(self.seed, &format!("move/{}/{}", parent.id, cursor));
        match band(parent.score) {
            MoveBand::Rework => {
                if cursor >= 3 * DATA_MOVE_VARIANTS {
                    return None;
                }
                let (variant, move_idx) = (cursor / 3, cursor % 3);
                Some(
                    self.data_move(parent, move_idx, variant, &mut rng)
                        .map(|(p, d)| (p, d, MoveComponent::Data)),
                )
            }
            MoveBand::HyperTune => {
                if cursor >= 7 {
                    return None;
                }
                Some(self.hyper_move(parent, cursor).map(|(p, d)| (p, d, MoveComponent::Hyper)))
            }
            MoveBand::Surgical => {
                if cursor >= SURGICAL_VARIANTS {
                    return None;
                }
                Some(
                    self.surgical_move(parent, cursor, &mut rng)
                        .map(|(p, d)| (p, d, MoveComponent::Data)),
                )
            }
        }
    }
}

impl Proposer for RuleProposer {
    fn propose(&self, parent: &SearchNode, graph: &SearchGraph) -> Result<Proposal, ProposeError> {
        let mut cursor = parent.menu_cursor;
        loop {
            match self.entry(parent, cursor) {
                None => return Err(ProposeError::MenuExhausted),
                Some(None) => cursor += 1,
                Some(Some((pipeline, description, component))) => {
                    cursor += 1;
                    if graph.contains_pipeline(&pipeline) {
                        continue;
                    }
                    return Ok(Proposal { pipeline, description, component, next_cursor: cursor });
                }
            }
        }
    }

    fn fresh_component(
        &self,
        base: &Pipeline,
        component: MoveComponent,
        salt: u64,
    ) -> Option<(Pipeline, String)> {
        let mut rng = seeds::rng(self.seed, &format!("fresh/{salt}"));
        match component {
            MoveComponent::Data => {
                let gold_n = base.dataset.slice_count(crate::pipeline::Slice::Gold).max(12);
                let fresh = task::generate_examples(&self.task, gold_n, &mut rng).ok()?;
                let hard = RuleProposer::slice_pool(&base.dataset, crate::pipeline::Slice::HardNegative);
                let dataset = self.compose(&fresh, &hard, &mut rng)?;
                let mut p = base.clone();
                p.dataset = dataset;
                Some((p, "fresh data draw".to_string()))
            }
            MoveComponent::Hyper => {
                let combos: [(u32, f64, &str); 4] = [
                    (1, 0.1, ""),
                    (2, 0.05, PROMPT_VARIANTS[1]),
                    (4, 0.2, ""),
                    (2, 0.1, PROMPT_VARIANTS[2]),
                ];
                let start = (salt as usize) % combos.len();
                for off in 0..combos.len() {
                    let (epochs, lr, prompt) = combos[(start + off) % combos.len()];
                    if base.hyper.epochs == epochs
                        && base.hyper.learning_rate == lr
                        && base.hyper.system_prompt == prompt
                    {
                        continue;
                    }
                    let mut p = base.clone();
                    p.hyper.epochs = epochs;
                    p.hyper.learning_rate = lr;
                    p.hyper.system_prompt = prompt.to_string();
                    return Some((p, format!("fresh hyper (epochs {epochs}, lr {lr})")));
                }
                None
            }
            MoveComponent::Strategy => {
                let mut p = base.clone();
                match base.strategy.supervision_format {
                    SupervisionFormat::Direct => {
                        p.strategy = StrategySpec {
                            supervision_format: SupervisionFormat::ChainOfThought,
                            teacher_id: Some("toy-teacher".to_string()),
                            eval_method: base.strategy.eval_method,
                        };
                        Some((p, "strategy: chain-of-thought with toy teacher".to_string()))
                    }
                    SupervisionFormat::ChainOfThought => {
                        p.strategy = StrategySpec {
                            supervision_format: SupervisionFormat::Direct,
                            teacher_id: None,
                            eval_method: base.strategy.eval_method,
                        };
                        Some((p, "strategy: direct supervision".to_string()))
                    }
                }
            }
        }
    }

    fn recompose(&self, dataset: &DatasetSpec, salt: u64) -> Option<DatasetSpec> {
        let mut rng = seeds::rng(self.seed, &format!("recompose/{salt}"));
        let gold = Self::slice_pool(dataset, crate::pipeline::Slice::Gold);
        let hard = Self::slice_pool(dataset, crate::pipeline::Slice::HardNegative);
        self.compose(&gold, &hard, &mut rng)
    }
}

// ─── Grid proposer ──────────────────────────────────────────────────────

/// Proposer over an explicit finite configuration grid; children are grid
/// neighbors first (one coordinate step), then any untried point. Used for
/// exhaustively enumerable spaces and oracle comparisons.
pub struct GridProposer {
    pub grid: Vec<Pipeline>,
    pub coords: Vec<(usize, usize, usize)>,
}

impl GridProposer {
    fn coord_of(&self, p: &Pipeline) -> Option<(usize, usize, usize)> {
        let key = pipeline_key(p);
        self.grid
            .iter()
            .position(|g| pipeline_key(g) == key)
            .map(|i| self.coords[i])
    }

    fn menu(&self, parent: &Pipeline) -> Vec<usize> {
        let here = self.coord_of(parent);
        let mut near = Vec::new();
        let mut far = Vec::new();
        for (i, c) in self.coords.iter().enumerate() {
            let is_neighbor = here
                .map(|h| {
                    let d = (c.0 as i64 - h.0 as i64).abs()
                        + (c.1 as i64 - h.1 as i64).abs()
                        + (c.2 as i64 - h.2 as i64).abs();
                    d == 1
                })
                .unwrap_or(false);
            if is_neighbor {
                near.push(i);
            } else {
                far.push(i);
            }
        }
        near.extend(far);
        near
    }
}

impl Proposer for GridProposer {
    fn propose(&self, parent: &SearchNode, graph: &SearchGraph) -> Result<Proposal, ProposeError> {
        let menu = self.menu(&parent.pipeline);
        let mut cursor = parent.menu_cursor;
        while cursor < menu.len() {
            let idx = menu[cursor];
            cursor += 1;
            let candidate = &self.grid[idx];
            if graph.contains_pipeline(candidate) {
                continue;
            }
            let (e, l, d) = self.coords[idx];
            return Ok(Proposal {
                pipeline: candidate.clone(),
                description: format!("grid:({e},{l},{d})"),
                component: if d != self.coord_of(&parent.pipeline).map(|c| c.2).unwrap_or(d) {
                    MoveComponent::Data
                } else {
                    MoveComponent::Hyper
                },
                next_cursor: cursor,
            });
        }
        Err(ProposeError::MenuExhausted)
    }

    fn fresh_component(
        &self,
        base: &Pipeline,
        component: MoveComponent,
        salt: u64,
    ) -> Option<(Pipeline, String)> {
        let here = self.coord_of(base)?;
        let candidates: Vec<usize> = self
            .coords
            .iter()
            .enumerate()
            .filter(|(_, c)| match component {
                MoveComponent::Data => c.2 != here.2 && c.0 == here.0 && c.1 == here.1,
                MoveComponent::Hyper => c.2 == here.2 && (c.0 != here.0 || c.1 != here.1),
                MoveComponent::Strategy => false,
            })
            .map(|(i, _)| i)
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let idx = candidates[(salt as usize) % candidates.len()];
        Some((self.grid[idx].clone(), format!("grid fresh {:?}", self.coords[idx])))
    }
}

// ─── Evaluation ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub score: f64,
    pub regressions: Option<u64>,
    pub failures: Vec<FailureCase>,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalFailure {
    #[error("evaluation infrastructure failure: {0}")]
    Infrastructure(String),
}

pub trait Evaluator {
    fn evaluate(&self, p: &Pipeline) -> Result<EvalOutcome, EvalFailure>;
}

/// Trains the toy learner from the base model on the pipeline's dataset
/// (annotated by the toy teacher under chain-of-thought supervision) and
/// scores it on a fixed eval set, counting regressions when a regression
/// set is present.
pub struct ToyEvaluator {
    pub task: ToyTaskSpec,
    pub eval_set: Vec<Example>,
    pub regression_set: Vec<InferenceTrace>,
}

impl Evaluator for ToyEvaluator {
    fn evaluate(&self, p: &Pipeline) -> Result<EvalOutcome, EvalFailure> {
        let dataset = match p.strategy.supervision_format {
            SupervisionFormat::Direct => p.dataset.clone(),
            SupervisionFormat::ChainOfThought => {
                let teacher = curation::ToyTeacher { task: &self.task };
                let annotated = curation::annotate_chain_of_thought(&p.dataset.examples, &teacher);
                DatasetSpec::from_examples(
                    annotated,
                    p.dataset.version,
                    p.dataset.parent_version,
                    p.dataset.curation_log.clone(),
                )
            }
        };
        let model = task::train(&dataset, &p.hyper)
            .map_err(|e| EvalFailure::Infrastructure(e.to_string()))?;
        let (score, failures) = task::score_with_failures(&model, &self.eval_set)
            .map_err(|e| EvalFailure::Infrastructure(e.to_string()))?;
        let regressions = if self.regression_set.is_empty() {
            None
        } else {
            Some(
                gates::regression_count(&model, &self.regression_set)
                    .map_err(|e| EvalFailure::Infrastructure(e.to_string()))?,
            )
        };
        Ok(EvalOutcome { score, regressions, failures })
    }
}

// ─── Search loop ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Budget {
    pub max_evaluations: u64,
    pub stagnation_window: usize,
    pub top_k: usize,
    pub epsilon: u64,
    pub tau: f64,
    pub c0: f64,
    pub c_min: f64,
}

impl Budget {
    pub fn cold_start() -> Self {
        Budget {
            max_evaluations: 60,
            stagnation_window: 3,
            top_k: 3,
            epsilon: 2,
            tau: 0.96,
            c0: 1.0,
            c_min: 0.1,
        }
    }

    pub fn production() -> Self {
        Budget { max_evaluations: 30, ..Self::cold_start() }
    }

    pub fn with_evaluations(mut self, n: u64) -> Self {
        self.max_evaluations = n;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }
}

/// One line of the trajectory log: a single pipeline evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub node_id: usize,
    pub parent_ids: Vec<usize>,
    pub kind: String,
    pub move_desc: String,
    pub score: f64,
    pub regressions: Option<u64>,
    pub accepted: bool,
    pub rolled_back: bool,
}

#[derive(Debug)]
pub struct SearchOutcome {
    pub best: Option<NodeId>,
    pub graph: SearchGraph,
    pub trajectory: Vec<TrajectoryRecord>,
    pub converged: bool,
}

impl SearchOutcome {
    pub fn best_pipeline(&self) -> Option<&Pipeline> {
        self.best.map(|id| &self.graph.nodes[id].pipeline)
    }

    pub fn trajectory_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.trajectory {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

struct RunState {
    graph: SearchGraph,
    trajectory: Vec<TrajectoryRecord>,
    best: Option<NodeId>,
    mode: Mode,
    epsilon: u64,
}

impl RunState {
    fn evaluate_into_node(
        &mut self,
        pipeline: Pipeline,
        parents: &[NodeId],
        kind: &str,
        move_desc: String,
        component: Option<MoveComponent>,
        evaluator: &dyn Evaluator,
    ) -> NodeId {
        let outcome = evaluator.evaluate(&pipeline);
        let (score, regressions, failures, failed) = match outcome {
            Ok(o) => (o.score, o.regressions, o.failures, false),
            Err(_) => (f64::NEG_INFINITY, None, Vec::new(), true),
        };
        let feasible = !failed
            && match (self.mode, regressions) {
                (Mode::Production, Some(r)) => r <= self.epsilon,
                _ => true,
            };

        let node = SearchNode {
            id: 0,
            pipeline,
            score,
            visits: 1,
            sum: if failed { 0.0 } else { score },
            parents: Vec::new(),
            children: Vec::new(),
            move_desc: move_desc.clone(),
            component,
            regressions,
            feasible,
            failed,
            expandable: !failed,
            menu_cursor: 0,
            failures,
        };
        let id = self.graph.add_node(node, parents);
        self.graph.evaluations += 1;
        backprop(&mut self.graph, id);

        let best_before = self.best.map(|b| self.graph.nodes[b].score);
        let accepted = feasible && best_before.map(|b| score > b).unwrap_or(true);
        if accepted {
            self.best = Some(id);
            self.graph.best = self.best;
        }
        let rolled_back = best_before.map(|b| score < b).unwrap_or(false);
        self.trajectory.push(TrajectoryRecord {
            node_id: id,
            parent_ids: parents.to_vec(),
            kind: kind.to_string(),
            move_desc,
            score: if failed { f64::MIN } else { score },
            regressions,
            accepted,
            rolled_back,
        });
        id
    }

    fn converged(&self, budget: &Budget) -> bool {
        match self.best {
            None => false,
            Some(b) => {
                let n = &self.graph.nodes[b];
                gates::converged(n.score, n.regressions, budget.tau, budget.epsilon, self.mode)
            }
        }
    }
}

/// The full loop: select, expand, evaluate, backpropagate, with
/// stagnation-triggered evolution and fusion. Terminates on convergence,
/// budget exhaustion, or an empty frontier. Regressing evaluations are
/// recorded and never become best; graph history is never deleted.
pub fn run_search(
    root: Pipeline,
    evaluator: &dyn Evaluator,
    proposer: &dyn Proposer,
    budget: &Budget,
    mode: Mode,
) -> SearchOutcome {
    let mut st = RunState {
        graph: SearchGraph::default(),
        trajectory: Vec::new(),
        best: None,
        mode,
        epsilon: budget.epsilon,
    };
    st.evaluate_into_node(root, &[], "root", "baseline".to_string(), None, evaluator);

    let mut stagnation_events: std::collections::BTreeMap<NodeId, u64> =
        std::collections::BTreeMap::new();

    while !st.converged(budget) && st.graph.evaluations < budget.max_evaluations {
        let c = exploration_schedule(
            st.graph.evaluations,
            budget.max_evaluations,
            budget.c0,
            budget.c_min,
        );
        let parent_id = match select_leaf(&st.graph, c) {
            Ok(id) => id,
            Err(SearchError::SearchExhausted) => break,
        };

        let proposal = {
            let parent = &st.graph.nodes[parent_id];
            proposer.propose(parent, &st.graph)
        };
        match proposal {
            Err(ProposeError::MenuExhausted) => {
                st.graph.nodes[parent_id].expandable = false;
                continue;
            }
            Ok(p) => {
                st.graph.nodes[parent_id].menu_cursor = p.next_cursor;
                st.evaluate_into_node(
                    p.pipeline,
                    &[parent_id],
                    "expand",
                    p.description,
                    Some(p.component),
                    evaluator,
                );
            }
        }

        if st.converged(budget) || st.graph.evaluations >= budget.max_evaluations {
            break;
        }

        // Stagnation recovery on the expanded branch.
        let head = branch_head(&st.graph, parent_id);
        if detect_stagnation(&st.graph, head, budget.stagnation_window) {
            let events = stagnation_events.entry(head).or_insert(0);
            *events += 1;
            let prefer_evolve = *events % 2 == 1;
            let salt = st.graph.evaluations * 31 + *events;

            let evolved = if prefer_evolve || st.graph.len() < 2 {
                evolve(&st.graph, parent_id, proposer, salt)
            } else {
                None
            };
            if let Some((pipeline, desc, component)) = evolved {
                if !st.graph.contains_pipeline(&pipeline) {
                    st.evaluate_into_node(
                        pipeline,
                        &[parent_id],
                        "evolve",
                        desc,
                        Some(component),
                        evaluator,
                    );
                    continue;
                }
            }
            if let Some((pipeline, desc, sources)) = fuse(&st.graph, budget.top_k, proposer, salt) {
                if !st.graph.contains_pipeline(&pipeline) {
                    st.evaluate_into_node(
                        pipeline,
                        &sources,
                        "fuse",
                        desc,
                        Some(MoveComponent::Data),
                        evaluator,
                    );
                }
            }
        }
    }

    let converged = st.converged(budget);
    SearchOutcome { best: st.best, graph: st.graph, trajectory: st.trajectory, converged }
}

// ─── Evolution ──────────────────────────────────────────────────────────

/// Lineage of a node through primary parents, root first.
fn lineage(graph: &SearchGraph, id: NodeId) -> Vec<NodeId> {
    let mut path = vec![id];
    let mut cur = id;
    while let Some(&p) = graph.nodes[cur].parents.first() {
        path.push(p);
        cur = p;
    }
    path.reverse();
    path
}

/// Mean score delta along the lineage attributed to each component.
fn component_deltas(graph: &SearchGraph, id: NodeId) -> Vec<(MoveComponent, f64, usize)> {
    let path = lineage(graph, id);
    let mut sums: std::collections::BTreeMap<&'static str, (MoveComponent, f64, usize)> =
        std::collections::BTreeMap::new();
    for w in path.windows(2) {
        let (parent, child) = (&graph.nodes[w[0]], &graph.nodes[w[1]]);
        if let Some(c) = child.component {
            let key = match c {
                MoveComponent::Data => "data",
                MoveComponent::Hyper => "hyper",
                MoveComponent::Strategy => "strategy",
            };
            let e = sums.entry(key).or_insert((c, 0.0, 0));
            e.1 += child.score - parent.score;
            e.2 += 1;
        }
    }
    sums.into_values().map(|(c, sum, n)| (c, sum / n as f64, n)).collect()
}

/// Trajectory-aware mutation: keep the component whose past changes
/// correlate with the branch's improvements and replace another with a
/// fresh draw. Falls back to a uniform component swap on short lineages.
pub fn evolve(
    graph: &SearchGraph,
    node_id: NodeId,
    proposer: &dyn Proposer,
    salt: u64,
) -> Option<(Pipeline, String, MoveComponent)> {
    let base = &graph.nodes[node_id].pipeline;
    let deltas = component_deltas(graph, node_id);
    let order = [MoveComponent::Data, MoveComponent::Hyper, MoveComponent::Strategy];

    let replace = if deltas.len() < 2 {
        // Too short to attribute: uniform swap.
        order[(salt as usize) % order.len()]
    } else {
        let keep = deltas
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(c, _, _)| *c)?;
        // Worst-performing component other than the kept one; components
        // never moved are considered before-last in priority order.
        let mut candidates: Vec<(MoveComponent, f64)> = order
            .iter()
            .filter(|c| **c != keep)
            .map(|c| {
                let measured = deltas.iter().find(|(dc, _, _)| dc == c).map(|(_, m, _)| *m);
                (*c, measured.unwrap_or(0.0))
            })
            .collect();
        candidates.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        candidates.first().map(|(c, _)| *c)?
    };

    for off in 0..order.len() {
        let component = if off == 0 {
            replace
        } else {
            order[(order.iter().position(|c| *c == replace).unwrap() + off) % order.len()]
        };
        if let Some((pipeline, desc)) = proposer.fresh_component(base, component, salt + off as u64)
        {
            return Some((
                pipeline,
                format!("evolve: replace {component:?} ({desc})"),
                component,
            ));
        }
    }
    None
}

// ─── Fusion ─────────────────────────────────────────────────────────────

/// Score gain of the last move of `component` in the node's lineage.
fn last_component_gain(graph: &SearchGraph, id: NodeId, component: MoveComponent) -> Option<f64> {
    let path = lineage(graph, id);
    for w in path.windows(2).rev() {
        let (parent, child) = (&graph.nodes[w[0]], &graph.nodes[w[1]]);
        if child.component == Some(component) {
            return Some(child.score - parent.score);
        }
    }
    None
}

/// Component-wise best-of across the top-K nodes: each component comes from
/// the node whose last move of that component yielded the largest gain,
/// ties broken by higher node score. Fused datasets are recomposed so
/// curation bands still hold. Returns the fused pipeline and its source
/// node ids.
pub fn fuse(
    graph: &SearchGraph,
    k: usize,
    proposer: &dyn Proposer,
    salt: u64,
) -> Option<(Pipeline, String, Vec<NodeId>)> {
    if k < 2 {
        return None;
    }
    let mut ranked: Vec<&SearchNode> = graph.nodes.iter().filter(|n| !n.failed).collect();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.id.cmp(&b.id)));
    let top: Vec<&SearchNode> = ranked.into_iter().take(k).collect();
    if top.len() < 2 {
        return None;
    }

    let pick = |component: MoveComponent| -> NodeId {
        let mut best: Option<(NodeId, f64, f64)> = None; // (id, gain, score)
        for n in &top {
            if let Some(gain) = last_component_gain(graph, n.id, component) {
                let better = match best {
                    None => true,
                    Some((_, bg, bs)) => gain > bg || (gain == bg && n.score > bs),
                };
                if better {
                    best = Some((n.id, gain, n.score));
                }
            }
        }
        best.map(|(id, _, _)| id).unwrap_or(top[0].id)
    };

    let d_src = pick(MoveComponent::Data);
    let h_src = pick(MoveComponent::Hyper);
    let s_src = pick(MoveComponent::Strategy);

    let mut fused = graph.nodes[d_src].pipeline.clone();
    fused.hyper = graph.nodes[h_src].pipeline.hyper.clone();
    fused.strategy = graph.nodes[s_src].pipeline.strategy.clone();
    if let Some(recomposed) = proposer.recompose(&fused.dataset, salt) {
        fused.dataset = recomposed;
    }

    let mut sources: Vec<NodeId> = top.iter().map(|n| n.id).collect();
    sources.sort_unstable();
    sources.dedup();
    Some((
        fused,
        format!("fuse: D from n{d_src}, H from n{h_src}, S from n{s_src}"),
        sources,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{HyperConfig, Provenance, Slice};
    use crate::task::generate_examples;

    fn tiny_pipeline(tag: &str) -> Pipeline {
        let examples = vec![
            Example::new(format!("a a {tag}"), "L1", Slice::Gold, Provenance::Benchmark),
            Example::new(format!("b b {tag}"), "L2", Slice::Gold, Provenance::Benchmark),
        ];
        Pipeline {
            dataset: DatasetSpec::from_examples(examples, 1, None, Vec::new()),
            hyper: HyperConfig::default(),
            strategy: StrategySpec::default(),
            mode: Mode::ColdStart,
        }
    }

    fn bare_node(id: NodeId, score: f64, visits: u64, sum: f64) -> SearchNode {
        SearchNode {
            id,
            pipeline: tiny_pipeline(&format!("n{id}")),
            score,
            visits,
            sum,
            parents: Vec::new(),
            children: Vec::new(),
            move_desc: String::new(),
            component: None,
            regressions: None,
            feasible: true,
            failed: false,
            expandable: true,
            menu_cursor: 0,
            failures: Vec::new(),
        }
    }

    #[test]
    fn uct_direct_values() {
        let node = bare_node(0, 0.6, 2, 1.2);
        assert_eq!(uct_score(&node, 8, 0.0), 0.6);
        let u = uct_score(&node, 8, 1.0);
        assert!((u - 1.61967).abs() < 1e-4, "{u}");
        let unvisited = bare_node(1, 0.0, 0, 0.0);
        assert_eq!(uct_score(&unvisited, 8, 1.0), f64::INFINITY);
    }

    #[test]
    fn uct_prefers_lower_visits_at_equal_mean() {
        let a = bare_node(0, 0.5, 1, 0.5);
        let b = bare_node(1, 0.5, 4, 2.0);
        assert!(uct_score(&a, 10, 1.0) > uct_score(&b, 10, 1.0));
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(exploration_schedule(0, 100, 1.0, 0.1), 1.0);
        assert_eq!(exploration_schedule(100, 100, 1.0, 0.1), 0.1);
        assert!((exploration_schedule(50, 100, 1.0, 0.1) - 0.55).abs() < 1e-12);
    }

    fn manual_graph() -> SearchGraph {
        let mut g = SearchGraph::default();
        let root = g.add_node(bare_node(0, 0.5, 1, 0.5), &[]);
        g.evaluations = 1;
        let a = g.add_node(bare_node(0, 0.6, 1, 0.6), &[root]);
        g.evaluations += 1;
        backprop(&mut g, a);
        let b = g.add_node(bare_node(0, 0.7, 1, 0.7), &[a]);
        g.evaluations += 1;
        backprop(&mut g, b);
        g
    }

    #[test]
    fn select_single_root() {
        let mut g = SearchGraph::default();
        g.add_node(bare_node(0, 0.4, 1, 0.4), &[]);
        g.evaluations = 1;
        assert_eq!(select_leaf(&g, 1.0).unwrap(), 0);
    }

    #[test]
    fn select_prefers_unvisited_then_tiebreaks_by_creation() {
        let mut g = manual_graph();
        let fresh = g.add_node(bare_node(0, 0.0, 0, 0.0), &[0]);
        assert_eq!(select_leaf(&g, 1.0).unwrap(), fresh);

        // all equal stats: earliest id wins
        let mut g2 = SearchGraph::default();
        g2.add_node(bare_node(0, 0.5, 1, 0.5), &[]);
        g2.add_node(bare_node(0, 0.5, 1, 0.5), &[]);
        g2.evaluations = 2;
        assert_eq!(select_leaf(&g2, 1.0).unwrap(), 0);
    }

    #[test]
    fn select_exhausted_errors() {
        let mut g = SearchGraph::default();
        let id = g.add_node(bare_node(0, 0.5, 1, 0.5), &[]);
        g.nodes[id].expandable = false;
        assert_eq!(select_leaf(&g, 1.0), Err(SearchError::SearchExhausted));
    }

    #[test]
    fn backprop_chain_counts_once() {
        let g = manual_graph();
        // root saw its own eval + a + b
        assert_eq!(g.nodes[0].visits, 3);
        assert!((g.nodes[0].sum - 1.8).abs() < 1e-12);
        assert_eq!(g.nodes[1].visits, 2);
        assert!((g.nodes[1].sum - 1.3).abs() < 1e-12);
    }

    #[test]
    fn backprop_diamond_updates_shared_ancestor_once() {
        let mut g = SearchGraph::default();
        let root = g.add_node(bare_node(0, 0.5, 1, 0.5), &[]);
        let a = g.add_node(bare_node(0, 0.6, 1, 0.6), &[root]);
        let b = g.add_node(bare_node(0, 0.4, 1, 0.4), &[root]);
        backprop(&mut g, a);
        backprop(&mut g, b);
        // child with two parents: fusion-style node
        let c = g.add_node(bare_node(0, 0.9, 1, 0.9), &[a, b]);
        backprop(&mut g, c);
        g.evaluations = 4;
        assert_eq!(g.nodes[root].visits, 4, "root updated once per evaluation");
        assert!((g.nodes[root].sum - (0.5 + 0.6 + 0.4 + 0.9)).abs() < 1e-12);
        assert_eq!(g.nodes[c].visits, 1);
    }

    #[test]
    fn incremental_stats_match_recompute() {
        let mut g = manual_graph();
        let c = g.add_node(bare_node(0, 0.65, 1, 0.65), &[1]);
        backprop(&mut g, c);
        let d = g.add_node(bare_node(0, 0.8, 1, 0.8), &[2, 3]);
        backprop(&mut g, d);
        g.evaluations = 5;
        let recomputed = recompute_statistics(&g);
        for (n, (v, s)) in g.nodes.iter().zip(recomputed) {
            assert_eq!(n.visits, v, "node {}", n.id);
            assert!((n.sum - s).abs() < 1e-12, "node {}", n.id);
        }
    }

    #[test]
    fn stagnation_detection() {
        let mut g = SearchGraph::default();
        let root = g.add_node(bare_node(0, 0.5, 1, 0.5), &[]);
        let head = g.add_node(bare_node(0, 0.7, 1, 0.7), &[root]);
        assert!(!detect_stagnation(&g, head, 3), "fewer than S expansions");
        let mut prev = head;
        for s in [0.6, 0.65, 0.6] {
            let n = g.add_node(bare_node(0, s, 1, s), &[prev]);
            backprop(&mut g, n);
            prev = n;
        }
        assert!(detect_stagnation(&g, head, 3));
        let better = g.add_node(bare_node(0, 0.9, 1, 0.9), &[prev]);
        backprop(&mut g, better);
        assert!(!detect_stagnation(&g, head, 3), "improvement in window");
    }

    #[test]
    fn uct_argmax_invariant_under_score_shift() {
        let mut g = manual_graph();
        g.nodes[1].expandable = true;
        let before = select_leaf(&g, 0.7).unwrap();
        for n in g.nodes.iter_mut() {
            n.sum += 10.0 * n.visits as f64;
            n.score += 10.0;
        }
        let after = select_leaf(&g, 0.7).unwrap();
        assert_eq!(before, after);
    }

    // ── rule proposer ──

    fn demo_rule_proposer(seed: u64) -> (RuleProposer, Pipeline) {
        let task = ToyTaskSpec::demo(seed);
        let mut rng = seeds::rng(seed, "proposer-setup");
        let gold = generate_examples(&task, 40, &mut rng).unwrap();
        let gen = curation::ToyCounterGenerator { task: &task };
        let mut hard = Vec::new();
        for e in gold.iter().filter(|e| e.target == "refund" || e.target == "reorder").take(20) {
            if let Ok((_, h)) = curation::two_for_one(e, &gen, &mut rng) {
                hard.push(h);
            }
        }
        let cfg = CurationConfig::cold_start();
        let dataset = curation::compose_dataset(&gold, &hard, None, &cfg, &mut rng).unwrap();
        let pipeline = Pipeline {
            dataset,
            hyper: HyperConfig::default(),
            strategy: StrategySpec::default(),
            mode: Mode::ColdStart,
        };
        (RuleProposer { task, curation: cfg, replay_parent: None, seed }, pipeline)
    }

    fn node_with_score(pipeline: Pipeline, score: f64, failures: Vec<FailureCase>) -> SearchNode {
        let mut n = bare_node(0, score, 1, score);
        n.pipeline = pipeline;
        n.failures = failures;
        n
    }

    #[test]
    fn low_score_proposes_data_rework() {
        let (proposer, pipeline) = demo_rule_proposer(1);
        let graph = SearchGraph::default();
        let parent = node_with_score(pipeline, 0.75, Vec::new());
        let p = proposer.propose(&parent, &graph).unwrap();
        assert_eq!(p.component, MoveComponent::Data);
        assert!(p.description.starts_with("data:"), "{}", p.description);
    }

    #[test]
    fn mid_score_proposes_hyper_with_frozen_dataset() {
        let (proposer, pipeline) = demo_rule_proposer(2);
        let graph = SearchGraph::default();
        let parent = node_with_score(pipeline.clone(), 0.90, Vec::new());
        let p = proposer.propose(&parent, &graph).unwrap();
        assert_eq!(p.component, MoveComponent::Hyper);
        assert_eq!(p.pipeline.dataset, pipeline.dataset, "dataset frozen");
        assert_eq!(p.pipeline.dataset.version, pipeline.dataset.version);
    }

    #[test]
    fn high_score_proposes_surgical_under_three_per_pattern() {
        let (proposer, pipeline) = demo_rule_proposer(3);
        let graph = SearchGraph::default();
        let failures = vec![
            FailureCase {
                input: "x".to_string(),
                predicted: "reorder".to_string(),
                expected: "refund".to_string(),
            },
            FailureCase {
                input: "y".to_string(),
                predicted: "refund".to_string(),
                expected: "reorder".to_string(),
            },
        ];
        let before = pipeline.dataset.len();
        let parent = node_with_score(pipeline, 0.97, failures);
        let p = proposer.propose(&parent, &graph).unwrap();
        assert!(p.description.contains("targeted_augment"), "{}", p.description);
        // 2 patterns, at most 3 each; composition may trim but never adds more
        assert!(p.pipeline.dataset.len() <= before + 6, "{} vs {}", p.pipeline.dataset.len(), before);
    }

    #[test]
    fn menu_cycles_then_exhausts() {
        let (proposer, pipeline) = demo_rule_proposer(4);
        let mut graph = SearchGraph::default();
        let mut parent = node_with_score(pipeline, 0.90, Vec::new());
        let mut seen = Vec::new();
        loop {
            match proposer.propose(&parent, &graph) {
                Ok(p) => {
                    parent.menu_cursor = p.next_cursor;
                    seen.push(p.description.clone());
                    // register so dedupe kicks in
                    graph.add_node(node_with_score(p.pipeline, 0.5, Vec::new()), &[]);
                }
                Err(ProposeError::MenuExhausted) => break,
            }
        }
        assert!(seen.len() >= 4, "hyper menu should offer several moves: {seen:?}");
        assert!(seen.iter().all(|d| d.starts_with("hyper:")));
    }

    // ── evolve / fuse ──

    fn lineage_graph(seed: u64) -> (SearchGraph, RuleProposer) {
        let (proposer, pipeline) = demo_rule_proposer(seed);
        let mut g = SearchGraph::default();
        let root = g.add_node(node_with_score(pipeline.clone(), 0.5, Vec::new()), &[]);
        g.evaluations = 1;
        // data move improved a lot
        let mut p1 = pipeline.clone();
        p1.hyper.system_prompt = "tmp".to_string(); // ensure distinct key
        let mut n1 = node_with_score(p1, 0.8, Vec::new());
        n1.component = Some(MoveComponent::Data);
        let a = g.add_node(n1, &[root]);
        backprop(&mut g, a);
        g.evaluations += 1;
        // hyper move regressed
        let mut p2 = pipeline.clone();
        p2.hyper.epochs = 4;
        let mut n2 = node_with_score(p2, 0.7, Vec::new());
        n2.component = Some(MoveComponent::Hyper);
        let b = g.add_node(n2, &[a]);
        backprop(&mut g, b);
        g.evaluations += 1;
        (g, proposer)
    }

    #[test]
    fn evolve_keeps_productive_component() {
        let (g, proposer) = lineage_graph(5);
        let (pipeline, desc, component) = evolve(&g, 2, &proposer, 7).unwrap();
        // data was productive (+0.3), hyper regressed (-0.1): replace hyper
        assert_eq!(component, MoveComponent::Hyper, "{desc}");
        assert_eq!(
            pipeline.dataset, g.nodes[2].pipeline.dataset,
            "productive data component preserved"
        );
        assert_ne!(pipeline.hyper, g.nodes[2].pipeline.hyper);
    }

    #[test]
    fn evolve_short_lineage_uniform_fallback() {
        let (proposer, pipeline) = demo_rule_proposer(6);
        let mut g = SearchGraph::default();
        g.add_node(node_with_score(pipeline, 0.5, Vec::new()), &[]);
        g.evaluations = 1;
        let out = evolve(&g, 0, &proposer, 3);
        assert!(out.is_some(), "fallback still proposes");
        let (p, _, _) = out.unwrap();
        assert_ne!(pipeline_key(&p), pipeline_key(&g.nodes[0].pipeline));
    }

    #[test]
    fn fuse_combines_components_from_sources() {
        let (mut g, proposer) = lineage_graph(7);
        // second branch: strategy move with the best gain on its lineage
        let mut p3 = g.nodes[0].pipeline.clone();
        p3.strategy = StrategySpec {
            supervision_format: SupervisionFormat::ChainOfThought,
            teacher_id: Some("toy-teacher".to_string()),
            eval_method: crate::pipeline::EvalMethod::ExactMatch,
        };
        let mut n3 = node_with_score(p3.clone(), 0.85, Vec::new());
        n3.component = Some(MoveComponent::Strategy);
        let c = g.add_node(n3, &[0]);
        backprop(&mut g, c);
        g.evaluations += 1;

        let (fused, desc, sources) = fuse(&g, 3, &proposer, 1).unwrap();
        assert!(desc.contains("fuse"));
        assert!(sources.len() >= 2);
        // strategy comes from the CoT branch, data from the data-move branch
        assert_eq!(fused.strategy.supervision_format, SupervisionFormat::ChainOfThought);
        let source_inputs: std::collections::BTreeSet<&str> = g.nodes[1]
            .pipeline
            .dataset
            .examples
            .iter()
            .map(|e| e.input.as_str())
            .collect();
        assert!(fused
            .dataset
            .examples
            .iter()
            .filter(|e| e.slice == Slice::Gold)
            .all(|e| source_inputs.contains(e.input.as_str())));
    }

    #[test]
    fn fuse_requires_two_nodes() {
        let (proposer, pipeline) = demo_rule_proposer(8);
        let mut g = SearchGraph::default();
        g.add_node(node_with_score(pipeline, 0.5, Vec::new()), &[]);
        assert!(fuse(&g, 1, &proposer, 0).is_none(), "k < 2 refused");
        assert!(fuse(&g, 3, &proposer, 0).is_none(), "single node cannot fuse");
    }

    // ── run_search ──

    /// 18-point grid over epochs x lr x dataset variant with a fixed
    /// deterministic evaluator.
    fn grid_fixture(seed: u64) -> (Vec<Pipeline>, Vec<(usize, usize, usize)>, ToyEvaluator) {
        let task = ToyTaskSpec::demo(seed);
        let mut rng = seeds::rng(seed, "grid");
        let clean = generate_examples(&task, 48, &mut rng).unwrap();
        let mut flipped = clean.clone();
        for (i, e) in flipped.iter_mut().enumerate() {
            if i % 3 == 0 {
                let idx = task.labels.iter().position(|l| *l == e.target).unwrap();
                e.target = task.labels[(idx + 1) % task.labels.len()].clone();
            }
        }
        let eval_set = generate_examples(&task, 60, &mut rng).unwrap();
        let datasets = [
            DatasetSpec::from_examples(flipped, 1, None, Vec::new()),
            DatasetSpec::from_examples(clean, 2, None, Vec::new()),
        ];
        let epochs = [1u32, 2, 6];
        let lrs = [0.005f64, 0.1, 2.0];
        let mut grid = Vec::new();
        let mut coords = Vec::new();
        for (ei, &e) in epochs.iter().enumerate() {
            for (li, &l) in lrs.iter().enumerate() {
                for (di, d) in datasets.iter().enumerate() {
                    grid.push(Pipeline {
                        dataset: d.clone(),
                        hyper: HyperConfig {
                            epochs: e,
                            learning_rate: l,
                            ..HyperConfig::default()
                        },
                        strategy: StrategySpec::default(),
                        mode: Mode::ColdStart,
                    });
                    coords.push((ei, li, di));
                }
            }
        }
        let evaluator = ToyEvaluator { task, eval_set, regression_set: Vec::new() };
        (grid, coords, evaluator)
    }

    #[test]
    fn full_budget_grid_search_matches_brute_force() {
        for seed in 0..5u64 {
            let (grid, coords, evaluator) = grid_fixture(seed);
            let brute_best = grid
                .iter()
                .map(|p| evaluator.evaluate(p).unwrap().score)
                .fold(f64::NEG_INFINITY, f64::max);
            let proposer = GridProposer { grid: grid.clone(), coords };
            let budget = Budget::cold_start().with_evaluations(18).with_tau(2.0);
            let out = run_search(grid[0].clone(), &evaluator, &proposer, &budget, Mode::ColdStart);
            assert_eq!(out.graph.len(), 18, "full enumeration under dedupe");
            let got = out.graph.nodes[out.best.unwrap()].score;
            assert_eq!(got, brute_best, "seed {seed}");
            assert!(out.graph.is_acyclic());
        }
    }

    #[test]
    fn constraint_blocks_high_scoring_infeasible_candidate() {
        // Evaluator: score improves with key but regressions grow too.
        struct Rigged;
        impl Evaluator for Rigged {
            fn evaluate(&self, p: &Pipeline) -> Result<EvalOutcome, EvalFailure> {
                let e = p.hyper.epochs;
                // epochs 1 -> (0.90, r=0); 2 -> (0.99, r=3); others worse
                Ok(match e {
                    1 => EvalOutcome { score: 0.90, regressions: Some(0), failures: vec![] },
                    2 => EvalOutcome { score: 0.99, regressions: Some(3), failures: vec![] },
                    _ => EvalOutcome { score: 0.50, regressions: Some(0), failures: vec![] },
                })
            }
        }
        struct EpochProposer;
        impl Proposer for EpochProposer {
            fn propose(
                &self,
                parent: &SearchNode,
                graph: &SearchGraph,
            ) -> Result<Proposal, ProposeError> {
                for step in parent.menu_cursor..8 {
                    let mut p = parent.pipeline.clone();
                    p.hyper.epochs = step as u32 + 2;
                    if !graph.contains_pipeline(&p) {
                        return Ok(Proposal {
                            pipeline: p,
                            description: format!("epochs {}", step + 2),
                            component: MoveComponent::Hyper,
                            next_cursor: step + 1,
                        });
                    }
                }
                Err(ProposeError::MenuExhausted)
            }
            fn fresh_component(
                &self,
                _base: &Pipeline,
                _component: MoveComponent,
                _salt: u64,
            ) -> Option<(Pipeline, String)> {
                None
            }
        }
        let mut root = tiny_pipeline("c");
        root.hyper.epochs = 1;
        root.mode = Mode::Production;
        let budget = Budget::production().with_evaluations(5).with_tau(0.97);
        let out = run_search(root, &Rigged, &EpochProposer, &budget, Mode::Production);
        let best = &out.graph.nodes[out.best.unwrap()];
        assert_eq!(best.score, 0.90, "feasible node stays best");
        assert_eq!(best.regressions, Some(0));
        // the infeasible 0.99 candidate is in the graph, flagged
        assert!(out
            .graph
            .nodes
            .iter()
            .any(|n| n.score == 0.99 && !n.feasible));
        assert!(!out.converged);
    }

    #[test]
    fn budget_one_returns_root() {
        let (grid, coords, evaluator) = grid_fixture(9);
        let proposer = GridProposer { grid: grid.clone(), coords };
        let budget = Budget::cold_start().with_evaluations(1).with_tau(2.0);
        let out = run_search(grid[3].clone(), &evaluator, &proposer, &budget, Mode::ColdStart);
        assert_eq!(out.graph.len(), 1);
        assert_eq!(out.best, Some(0));
        assert_eq!(out.trajectory.len(), 1);
        assert_eq!(out.trajectory[0].kind, "root");
    }

    #[test]
    fn best_score_never_decreases_along_trajectory() {
        let (grid, coords, evaluator) = grid_fixture(10);
        let proposer = GridProposer { grid: grid.clone(), coords };
        let budget = Budget::cold_start().with_evaluations(14).with_tau(2.0);
        let out = run_search(grid[0].clone(), &evaluator, &proposer, &budget, Mode::ColdStart);
        let mut best = f64::NEG_INFINITY;
        for r in &out.trajectory {
            if r.accepted {
                assert!(r.score >= best);
                best = r.score;
            }
        }
        assert!(out.graph.is_acyclic());
        // incremental stats equal recomputation after a full run
        let recomputed = recompute_statistics(&out.graph);
        for (n, (v, s)) in out.graph.nodes.iter().zip(recomputed) {
            assert_eq!(n.visits, v);
            assert!((n.sum - s).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_bytes_deterministic() {
        let run = || {
            let (grid, coords, evaluator) = grid_fixture(11);
            let proposer = GridProposer { grid: grid.clone(), coords };
            let budget = Budget::cold_start().with_evaluations(12).with_tau(2.0);
            run_search(grid[0].clone(), &evaluator, &proposer, &budget, Mode::ColdStart)
                .trajectory_jsonl()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn failed_evaluation_recorded_search_continues() {
        struct FailFirst;
        impl Evaluator for FailFirst {
            fn evaluate(&self, p: &Pipeline) -> Result<EvalOutcome, EvalFailure> {
                if p.hyper.epochs == 3 {
                    Err(EvalFailure::Infrastructure("adapter load failed".to_string()))
                } else {
                    Ok(EvalOutcome {
                        score: 0.5 + p.hyper.epochs as f64 * 0.01,
                        regressions: None,
                        failures: vec![],
                    })
                }
            }
        }
        struct Stepper;
        impl Proposer for Stepper {
            fn propose(
                &self,
                parent: &SearchNode,
                graph: &SearchGraph,
            ) -> Result<Proposal, ProposeError> {
                for step in parent.menu_cursor..6 {
                    let mut p = parent.pipeline.clone();
                    p.hyper.epochs = step as u32 + 2;
                    if !graph.contains_pipeline(&p) {
                        return Ok(Proposal {
                            pipeline: p,
                            description: format!("epochs {}", step + 2),
                            component: MoveComponent::Hyper,
                            next_cursor: step + 1,
                        });
                    }
                }
                Err(ProposeError::MenuExhausted)
            }
            fn fresh_component(
                &self,
                _base: &Pipeline,
                _component: MoveComponent,
                _salt: u64,
            ) -> Option<(Pipeline, String)> {
                None
            }
        }
        let mut root = tiny_pipeline("f");
        root.hyper.epochs = 1;
        let budget = Budget::cold_start().with_evaluations(5).with_tau(2.0);
        let out = run_search(root, &FailFirst, &Stepper, &budget, Mode::ColdStart);
        let failed: Vec<&SearchNode> = out.graph.nodes.iter().filter(|n| n.failed).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].score, f64::NEG_INFINITY);
        assert!(!failed[0].feasible);
        // Search continued past the failure; epochs 5..7 dedupe against the
        // 4-epoch key (training weight caps there), so the menu exhausts.
        assert_eq!(out.graph.len(), 4);
        let best = &out.graph.nodes[out.best.unwrap()];
        assert_eq!(best.score, 0.54);
    }
}
