//! Entropy-based confidence scoring and query selection over an unlabeled pool.
//!
//! Intent confidence is the negative entropy of the intent posterior; slot
//! confidence is the mean negative entropy over the real tokens, decoded
//! greedily. The joint score normalises each task's entropies by their 99th
//! percentile over the scored pool so the two tasks are on a common scale.
//! Selection takes the `S` least confident examples, ties broken by id.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Encoded, Example, Vocabulary};
use crate::model::{Batch, ModelParams, NluModel, SlotConditioning};
use crate::{Error, Result};

/// Percentile used to normalise pool entropies.
pub const NORMALIZING_PERCENTILE: f64 = 99.0;
/// Lower bound on the normalising percentile.
pub const PERCENTILE_FLOOR: f64 = 1e-8;
/// Tolerance on `Σ p = 1`.
pub const SUM_TOLERANCE: f64 = 1e-6;
const SCORING_BATCH: usize = 64;

/// `H(p) = −Σ p log p` with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if let Some(x) = p.iter().find(|&&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::InvalidDistribution(format!("entry {x} is not a probability")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
    }
    Ok(p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub id: usize,
    /// `−H(p_int)`, in `[−log|I|, 0]`.
    pub conf_int: f64,
    /// Mean over tokens of `−H(p_slot)`, in `[−log|slots|, 0]`.
    pub conf_slot: f64,
    pub conf_joint: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    Random,
    EntropyInt,
    EntropySlot,
    EntropyJoint,
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Random => "random",
            Criterion::EntropyInt => "entropy-int",
            Criterion::EntropySlot => "entropy-slot",
            Criterion::EntropyJoint => "entropy-joint",
        })
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Criterion::Random),
            "entropy-int" => Ok(Criterion::EntropyInt),
            "entropy-slot" => Ok(Criterion::EntropySlot),
            "entropy-joint" => Ok(Criterion::EntropyJoint),
            other => Err(Error::Config(format!("unknown criterion {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub criterion: Criterion,
    pub budget: usize,
    pub seed: u64,
}

/// How the joint confidence combines the two tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JointMode {
    /// `−(H_int / P99(H_int) + H_slot / P99(H_slot))` over the pool's entropies.
    #[default]
    NormalizedEntropy,
    /// `conf_int / P99(conf_int) + conf_slot / P99(conf_slot)` on raw confidences.
    Literal,
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn confidences(post: &crate::model::Posteriors, lengths: &[usize]) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(lengths.len());
    for (b, &len) in lengths.iter().enumerate() {
        let h_int = entropy(post.p_int.row(b).as_slice().expect("contiguous row"))?;
        let mut h_slot = 0.0;
        for t in 0..len {
            let row: Vec<f64> = post.p_slot.slice(ndarray::s![b, t, ..]).to_vec();
            h_slot += entropy(&row)?;
        }
        out.push((-h_int, -h_slot / len as f64));
    }
    Ok(out)
}

/// Score every pool example with greedy decoding and no dropout.
pub fn score_pool(model: &NluModel, params: &ModelParams, vocab: &Vocabulary, pool: &[&Example]) -> Result<Vec<ConfidenceRecord>> {
    if pool.is_empty() {
        return Err(Error::Empty("cannot score an empty pool"));
    }
    let encoded: Vec<Encoded> = pool.iter().map(|e| vocab.encode_unlabeled(e)).collect();
    let mut records = Vec::with_capacity(pool.len());
    for chunk in encoded.chunks(SCORING_BATCH) {
        let batch = Batch::new(chunk)?;
        let post = model.posteriors(params, &batch, None, SlotConditioning::Greedy)?;
        for (e, (conf_int, conf_slot)) in chunk.iter().zip(confidences(&post, &batch.lengths)?) {
            records.push(ConfidenceRecord {
                id: e.id,
                conf_int,
                conf_slot,
                conf_joint: None,
            });
        }
    }
    Ok(records)
}

/// Fill `conf_joint` using the pool's 99th-percentile normalisation.
pub fn joint_confidence(records: &mut [ConfidenceRecord], mode: JointMode) {
    let (a, b): (Vec<f64>, Vec<f64>) = match mode {
        JointMode::NormalizedEntropy => records.iter().map(|r| (-r.conf_int, -r.conf_slot)).unzip(),
        JointMode::Literal => records.iter().map(|r| (r.conf_int, r.conf_slot)).unzip(),
    };
    let p_int = percentile(&a, NORMALIZING_PERCENTILE);
    let p_slot = percentile(&b, NORMALIZING_PERCENTILE);
    match mode {
        JointMode::NormalizedEntropy => {
            let (di, ds) = (p_int.max(PERCENTILE_FLOOR), p_slot.max(PERCENTILE_FLOOR));
            for r in records.iter_mut() {
                r.conf_joint = Some(-(-r.conf_int / di + -r.conf_slot / ds));
            }
        }
        JointMode::Literal => {
            let guard = |p: f64| if p.abs() < PERCENTILE_FLOOR { -PERCENTILE_FLOOR } else { p };
            let (di, ds) = (guard(p_int), guard(p_slot));
            for r in records.iter_mut() {
                r.conf_joint = Some(r.conf_int / di + r.conf_slot / ds);
            }
        }
    }
}

fn key(r: &ConfidenceRecord, criterion: Criterion) -> f64 {
    match criterion {
        Criterion::EntropyInt => r.conf_int,
        Criterion::EntropySlot => r.conf_slot,
        Criterion::EntropyJoint => r.conf_joint.expect("joint confidence computed before selection"),
        Criterion::Random => 0.0,
    }
}

/// Records ordered from least to most confident under `criterion`, ties by id.
pub fn rank(records: &[ConfidenceRecord], criterion: Criterion) -> Vec<ConfidenceRecord> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| key(a, criterion).total_cmp(&key(b, criterion)).then(a.id.cmp(&b.id)));
    sorted
}

/// Choose `spec.budget` distinct ids from the scored pool.
///
/// Entropy criteria take the least confident; `Random` draws uniformly
/// without replacement under `spec.seed`. For `EntropyJoint` the joint score
/// is computed here if the records do not carry it yet.
pub fn select(records: &[ConfidenceRecord], spec: &QuerySpec) -> Result<Vec<usize>> {
    if spec.budget > records.len() {
        return Err(Error::BudgetExceedsPool {
            budget: spec.budget,
            pool: records.len(),
        });
    }
    match spec.criterion {
        Criterion::Random => {
            let mut ids: Vec<usize> = records.iter().map(|r| r.id).collect();
            ids.sort_unstable();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            Ok(index::sample(&mut rng, ids.len(), spec.budget)
                .into_iter()
                .map(|i| ids[i])
                .collect())
        }
        Criterion::EntropyJoint if records.iter().any(|r| r.conf_joint.is_none()) => {
            let mut filled = records.to_vec();
            joint_confidence(&mut filled, JointMode::default());
            select(&filled, spec)
        }
        c => Ok(rank(records, c).into_iter().take(spec.budget).map(|r| r.id).collect()),
    }
}

/// Scored-pool dump row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub id: usize,
    pub conf_int: f64,
    pub conf_slot: f64,
    pub conf_joint: Option<f64>,
    pub rank: usize,
}

/// One JSON record per pool example, ranked under `criterion` (rank 0 = queried first).
pub fn write_scored_pool(path: &Path, records: &[ConfidenceRecord], criterion: Criterion) -> Result<()> {
    let ranked = rank(records, criterion);
    let mut out = String::new();
    for (rank, r) in ranked.iter().enumerate() {
        let row = ScoredRow {
            id: r.id,
            conf_int: r.conf_int,
            conf_slot: r.conf_slot,
            conf_joint: r.conf_joint,
            rank,
        };
        out.push_str(&serde_json::to_string(&row)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

/// Helper for callers that need set semantics on selections.
pub fn as_set(ids: &[usize]) -> HashSet<usize> {
    ids.iter().copied().collect()
}
