//! Intent accuracy and token-level micro-F1 over non-`O` slot tags.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const OUTSIDE: &str = "O";

/// Token-level counts. A token is a positive when its tag is not `O`; a
/// prediction is a true positive when it equals a non-`O` gold tag.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCounts {
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SlotCounts {
    pub fn add_sequence(&mut self, gold: &[impl AsRef<str>], pred: &[impl AsRef<str>]) {
        for (g, p) in gold.iter().zip(pred) {
            let (g, p) = (g.as_ref(), p.as_ref());
            if g != OUTSIDE {
                self.gold += 1;
            }
            if p != OUTSIDE {
                self.predicted += 1;
                if p == g {
                    self.true_positives += 1;
                }
            }
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.true_positives, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_positives, self.gold)
    }

    /// F1 in percentage points.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            // No positives anywhere means nothing to get wrong.
            if self.predicted == 0 && self.gold == 0 {
                100.0
            } else {
                0.0
            }
        } else {
            100.0 * 2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fraction in `[0, 1]`.
    pub intent_accuracy: f64,
    /// Micro-F1 in `[0, 100]`.
    pub slot_f1: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub examples: usize,
    /// Per-epoch training loss, when produced by a fit.
    #[serde(default)]
    pub loss_curve: Vec<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl MetricsReport {
    /// Model-selection score: accuracy plus F1 on the same unit scale.
    pub fn joint_score(&self) -> f64 {
        self.intent_accuracy + self.slot_f1 / 100.0
    }
}

/// Score string predictions against gold annotations.
pub fn score(gold: &[(String, Vec<String>)], predicted: &[(String, Vec<String>)]) -> Result<MetricsReport> {
    if gold.is_empty() {
        return Err(Error::Empty("cannot evaluate on an empty set"));
    }
    if gold.len() != predicted.len() {
        return Err(Error::DimensionMismatch(gold.len(), predicted.len()));
    }
    let mut correct = 0usize;
    let mut counts = SlotCounts::default();
    for ((gi, gs), (pi, ps)) in gold.iter().zip(predicted) {
        if gs.len() != ps.len() {
            return Err(Error::DimensionMismatch(gs.len(), ps.len()));
        }
        if gi == pi {
            correct += 1;
        }
        counts.add_sequence(gs, ps);
    }
    Ok(MetricsReport {
        intent_accuracy: correct as f64 / gold.len() as f64,
        slot_f1: counts.f1(),
        slot_precision: counts.precision(),
        slot_recall: counts.recall(),
        examples: gold.len(),
        loss_curve: Vec::new(),
        seed: None,
    })
}
