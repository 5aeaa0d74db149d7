//! Supervised losses, the combined objective and the training loop.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LossTerm, RunConfig};
use crate::corpus::{EmbeddingMatrix, Encoded, Example, VocabHashes, Vocabulary};
use crate::metrics::{self, MetricsReport};
use crate::model::{Batch, Dropout, ForwardOutput, ModelDims, ModelParams, NluModel, SlotConditioning};
use crate::optim::{self, Adam};
use crate::tape::{Mat, Tape, Var};
use crate::vat;
use crate::{Error, Result};

/// Batch size used for evaluation passes.
const EVAL_BATCH: usize = 64;

/// A loss value together with a flag set when there was nothing to average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub empty: bool,
}

impl LossValue {
    fn empty() -> Self {
        Self { value: 0.0, empty: true }
    }
}

/// `-(1/K) Σ_k log p_int(i_k)` over rows with a gold intent.
pub fn ce_intent_loss(p_int: &Array2<f64>, gold: &[Option<usize>]) -> LossValue {
    let terms: Vec<f64> = gold
        .iter()
        .enumerate()
        .filter_map(|(b, g)| g.map(|g| -p_int[[b, g]].ln()))
        .collect();
    if terms.is_empty() {
        return LossValue::empty();
    }
    LossValue {
        value: terms.iter().sum::<f64>() / terms.len() as f64,
        empty: false,
    }
}

/// Per-utterance mean token NLL, averaged over utterances with gold tags.
/// `p_slot` is `B × T × |slots|`; positions beyond each gold sequence are ignored.
pub fn ce_slot_loss(p_slot: &Array3<f64>, gold: &[Option<Vec<usize>>]) -> LossValue {
    let mut per_utterance = Vec::new();
    for (b, tags) in gold.iter().enumerate() {
        let Some(tags) = tags else { continue };
        if tags.is_empty() {
            continue;
        }
        let nll: f64 = tags.iter().enumerate().map(|(t, &s)| -p_slot[[b, t, s]].ln()).sum();
        per_utterance.push(nll / tags.len() as f64);
    }
    if per_utterance.is_empty() {
        return LossValue::empty();
    }
    LossValue {
        value: per_utterance.iter().sum::<f64>() / per_utterance.len() as f64,
        empty: false,
    }
}

/// Intent NLL node over every row of a fully labeled batch.
pub fn intent_ce_term(tape: &mut Tape, out: &ForwardOutput, batch: &Batch) -> Result<Var> {
    let w = 1.0 / batch.len() as f64;
    let entries = batch
        .intents
        .iter()
        .enumerate()
        .map(|(b, g)| g.map(|g| (b, g, w)).ok_or(Error::Empty("intent term needs gold intents")))
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.nll(out.intent_logp, entries))
}

/// Slot NLL node: per-utterance token mean, averaged over utterances.
pub fn slot_ce_term(tape: &mut Tape, out: &ForwardOutput, batch: &Batch) -> Result<Var> {
    let k = batch.len() as f64;
    let mut entries = Vec::with_capacity(batch.num_tokens());
    for b in 0..batch.len() {
        let tags = batch.slots[b].as_ref().ok_or(Error::Empty("slot term needs gold tags"))?;
        let w = 1.0 / (k * batch.lengths[b] as f64);
        for (t, &s) in tags.iter().enumerate() {
            entries.push((b * out.steps + t, s, w));
        }
    }
    Ok(tape.nll(out.slot_logp, entries))
}

/// Values of the enabled objective terms for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_int: Option<f64>,
    pub ce_slot: Option<f64>,
    pub vat: Option<f64>,
    pub total: f64,
    /// The batch had no labeled member, so the CE terms were skipped.
    pub empty_labeled: bool,
}

/// `L = CE_int + CE_slot + L_vat` for the enabled terms.
///
/// CE terms use the labeled rows, teacher forcing and `dropout`; the VAT term
/// covers every row with its target and perturbation computed under
/// `theta_hat`. `rng` is consumed only by the perturbation's random start.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    model: &NluModel,
    theta: &ModelParams,
    theta_hat: &ModelParams,
    batch: &Batch,
    config: &RunConfig,
    dropout: Option<&mut Dropout>,
    rng: &mut impl Rng,
) -> Result<(LossBreakdown, Vec<Option<Mat>>)> {
    let mut tape = Tape::new(&theta.tensors, true);
    let mut terms: Vec<Var> = Vec::new();
    let mut out = LossBreakdown::default();

    let wants_ce = config.has(LossTerm::CeInt) || config.has(LossTerm::CeSlot);
    let rows = batch.labeled_rows();
    if wants_ce && rows.is_empty() {
        out.empty_labeled = true;
    }
    if wants_ce && !rows.is_empty() {
        let sub = if rows.len() == batch.len() { batch.clone() } else { batch.select(&rows)? };
        let gold: Vec<Vec<usize>> = sub.slots.iter().map(|s| s.clone().unwrap_or_default()).collect();
        let fwd = model.forward(&mut tape, &sub, None, SlotConditioning::TeacherForced(&gold), dropout)?;
        if config.has(LossTerm::CeInt) {
            let v = intent_ce_term(&mut tape, &fwd, &sub)?;
            out.ce_int = Some(tape.scalar(v));
            terms.push(v);
        }
        if config.has(LossTerm::CeSlot) {
            let v = slot_ce_term(&mut tape, &fwd, &sub)?;
            out.ce_slot = Some(tape.scalar(v));
            terms.push(v);
        }
    }
    if let Some(heads) = config.vat_heads() {
        let clean = vat::clean_pass(model, theta_hat, batch)?;
        let r = vat::compute_r_vadv(model, theta_hat, batch, &clean, &config.vat, heads, rng)?;
        let v = vat::vat_term(model, &mut tape, batch, &clean, &r, heads)?;
        out.vat = Some(tape.scalar(v));
        terms.push(v);
    }

    let Some((&first, rest)) = terms.split_first() else {
        return Ok((out, vec![None; theta.tensors.len()]));
    };
    let mut root = first;
    for &t in rest {
        root = tape.add(root, t);
    }
    out.total = tape.scalar(root);
    if !out.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss {:?} on batch of {} (ids {:?})",
            out,
            batch.len(),
            batch.ids
        )));
    }
    Ok((out, tape.backward(root).into_params()))
}

/// Data handed to [`fit`].
#[derive(Debug, Clone)]
pub struct FitInput<'a> {
    pub vocab: &'a Vocabulary,
    /// Pretrained vectors; random ones are drawn when absent.
    pub embeddings: Option<&'a EmbeddingMatrix>,
    pub labeled: Vec<&'a Example>,
    pub unlabeled: Vec<&'a Example>,
    pub validation: Vec<&'a Example>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce_int: Option<f64>,
    pub ce_slot: Option<f64>,
    pub vat: Option<f64>,
    pub val_intent_accuracy: Option<f64>,
    pub val_slot_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: NluModel,
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl FitOutcome {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.train_loss).collect()
    }
}

#[derive(Default)]
struct Running {
    n: usize,
    total: f64,
    ce_int: (f64, usize),
    ce_slot: (f64, usize),
    vat: (f64, usize),
}

impl Running {
    fn push(&mut self, b: &LossBreakdown) {
        self.n += 1;
        self.total += b.total;
        for (acc, v) in [(&mut self.ce_int, b.ce_int), (&mut self.ce_slot, b.ce_slot), (&mut self.vat, b.vat)] {
            if let Some(v) = v {
                acc.0 += v;
                acc.1 += 1;
            }
        }
    }

    fn record(&self, epoch: usize) -> EpochRecord {
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        EpochRecord {
            epoch,
            train_loss: self.total / self.n.max(1) as f64,
            ce_int: mean(self.ce_int),
            ce_slot: mean(self.ce_slot),
            vat: mean(self.vat),
            val_intent_accuracy: None,
            val_slot_f1: None,
        }
    }
}

/// Word vectors used to initialise a fit under `config`.
pub fn initial_embeddings(vocab: &Vocabulary, given: Option<&EmbeddingMatrix>, config: &RunConfig) -> Result<EmbeddingMatrix> {
    let mut emb = match given {
        Some(e) => {
            if e.vectors.nrows() != vocab.num_words() || e.dim() != config.embedding_size {
                return Err(Error::DimensionMismatch(e.dim(), config.embedding_size));
            }
            e.clone()
        }
        None => EmbeddingMatrix::random(vocab, config.embedding_size, config.seed),
    };
    if config.uses_vat() && config.vat.normalize_embeddings && !emb.normalized {
        emb.normalize();
    }
    Ok(emb)
}

/// Train a fresh model.
///
/// Without VAT each epoch is a shuffled pass over the labeled examples; with
/// VAT it is a shuffled pass over labeled and unlabeled examples together.
pub fn fit(input: &FitInput, config: &RunConfig) -> Result<FitOutcome> {
    config.validate()?;
    if input.labeled.is_empty() {
        return Err(Error::Empty("no labeled examples to train on"));
    }
    let vocab = input.vocab;
    let model = NluModel::new(ModelDims::new(vocab, config));
    let emb = initial_embeddings(vocab, input.embeddings, config)?;
    let mut params = model.init_params(Some(&emb), config.seed)?;

    let mut pool: Vec<Encoded> = input.labeled.iter().map(|e| vocab.encode(e)).collect();
    if let Some(bad) = pool.iter().find(|e| e.intent.is_none() || e.slots.is_none()) {
        return Err(Error::Format(format!("labeled example {} has labels outside the vocabulary", bad.id)));
    }
    if config.uses_vat() {
        pool.extend(input.unlabeled.iter().map(|e| vocab.encode_unlabeled(e)));
    }

    let mut adam = Adam::new(&params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0dde_0f0e);
    let mut vat_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a7a_7a7a);
    let mut dropout = Dropout::new(config.seed ^ 0xd0d0, config.effective_embedding_dropout(), config.classifier_dropout);

    let mut history = Vec::with_capacity(config.epochs());
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for epoch in 1..=config.epochs() {
        order.shuffle(&mut order_rng);
        let mut running = Running::default();
        for chunk in order.chunks(config.batch_size()) {
            let batch = Batch::new(chunk.iter().map(|&i| &pool[i]))?;
            let theta_hat = params.snapshot();
            let step = total_loss(&model, &params, &theta_hat, &batch, config, Some(&mut dropout), &mut vat_rng);
            let (breakdown, mut grads) = match step {
                Ok(s) => s,
                Err(e) => {
                    return Err(Error::Diverged {
                        message: format!("epoch {epoch}: {e}"),
                        last_good: Box::new(params),
                    })
                }
            };
            optim::clip_global_norm(&mut grads, config.grad_clip);
            adam.step(&mut params, &grads);
            if !params.is_finite() {
                return Err(Error::Diverged {
                    message: format!("epoch {epoch}: parameters became non-finite"),
                    last_good: Box::new(theta_hat),
                });
            }
            running.push(&breakdown);
        }
        let mut record = running.record(epoch);
        if !input.validation.is_empty() {
            let report = evaluate(&model, &params, vocab, &input.validation)?;
            record.val_intent_accuracy = Some(report.intent_accuracy);
            record.val_slot_f1 = Some(report.slot_f1);
            if config.select_on_validation && best.as_ref().is_none_or(|(s, _, _)| report.joint_score() > *s) {
                best = Some((report.joint_score(), epoch, params.clone()));
            }
        }
        log::debug!("epoch {epoch}: {record:?}");
        history.push(record);
    }
    let (params, best_epoch) = match best {
        Some((_, epoch, p)) => (p, epoch),
        None => (params, config.epochs()),
    };
    Ok(FitOutcome {
        model,
        params,
        history,
        best_epoch,
    })
}

/// Greedy predictions as `(intent, tags)` names, in input order.
pub fn predict_names(model: &NluModel, params: &ModelParams, vocab: &Vocabulary, examples: &[&Example]) -> Result<Vec<(String, Vec<String>)>> {
    let encoded: Vec<Encoded> = examples.iter().map(|e| vocab.encode_unlabeled(e)).collect();
    let mut out = Vec::with_capacity(encoded.len());
    for chunk in encoded.chunks(EVAL_BATCH) {
        let batch = Batch::new(chunk)?;
        for (intent, tags) in model.predict(params, &batch)? {
            out.push((
                vocab.intent_name(intent).to_owned(),
                tags.into_iter().map(|t| vocab.slot_name(t).to_owned()).collect(),
            ));
        }
    }
    Ok(out)
}

/// Intent accuracy and slot micro-F1 on labeled examples.
pub fn evaluate(model: &NluModel, params: &ModelParams, vocab: &Vocabulary, examples: &[&Example]) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::Empty("cannot evaluate on an empty set"));
    }
    let gold = examples
        .iter()
        .map(|e| {
            e.annotation
                .as_ref()
                .map(|a| (a.intent.clone(), a.slots.clone()))
                .ok_or_else(|| Error::Format(format!("evaluation example {} is unlabeled", e.id())))
        })
        .collect::<Result<Vec<_>>>()?;
    let predicted = predict_names(model, params, vocab, examples)?;
    metrics::score(&gold, &predicted)
}

/// Per-epoch history as CSV.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let io = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in history {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Everything needed to trace a reported number back to its run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub code_revision: String,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub labeled_hash: String,
    pub vocab: VocabHashes,
    pub labeled: usize,
    pub unlabeled: usize,
    pub best_epoch: usize,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `git describe`-style revision of the working tree, or the crate version.
pub fn code_revision() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}
