//! The only surface that can read a trace's hidden perturbation labels.
//!
//! Synthetic traces carry the ground-truth perturbations that produced them.
//! Diagnosis code must never condition on those labels, so the inner data is
//! an opaque newtype whose contents are visible to no module except this
//! one. Generators construct labels via [`HiddenLabels::new`]; measurement
//! harnesses read them via [`hidden_labels`]. A diagnosis module that wanted
//! to cheat would have to import this module by name, which is what the
//! tripwire tests check for.

use crate::trace::InferenceTrace;
use serde::{Deserialize, Serialize};

/// Opaque carrier for ground-truth perturbation names on a synthetic trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HiddenLabels(Vec<String>);

impl HiddenLabels {
    pub fn new(labels: Vec<String>) -> Self {
        HiddenLabels(labels)
    }
}

/// Ground-truth perturbation names of a synthetic trace, if present.
pub fn hidden_labels(t: &InferenceTrace) -> Option<&[String]> {
    t.hidden_opaque().map(|h| h.0.as_slice())
}

/// True when the trace's ground truth marks it poisonous: at least one
/// applied perturbation whose toxicity is poisonous.
pub fn hidden_poisonous(t: &InferenceTrace) -> bool {
    use crate::perturb::{PerturbationKind, Toxicity};
    hidden_labels(t)
        .map(|labels| {
            labels.iter().any(|name| {
                PerturbationKind::parse(name)
                    .map(|k| k.toxicity() == Toxicity::Poisonous)
                    .unwrap_or(false)
            })
        })
        .unwrap_or(false)
}
