//! Attention-based recurrent model for joint intent detection and slot filling.
//!
//! A bidirectional LSTM encodes the embedded words. The intent head attends
//! over the encoder states with the summary state `h_T` as query; the slot
//! head is a unidirectional LSTM that at step `t` reads the aligned encoder
//! state, an attention context queried by the previous slot embedding, and
//! that embedding itself.
//!
//! Attention is single-head additive scoring: `vᵀ tanh(W_k h_j + W_q q + b)`.
//!
//! An optional perturbation is added to the word embeddings before the
//! encoder; nothing else in the network sees it.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{EmbeddingMatrix, Encoded, Vocabulary, PAD};
use crate::tape::{Mat, Tape, Var};
use crate::{Error, Result};

pub const ATTENTION_FORM: &str = "additive single-head (v^T tanh(W_k h + W_q q + b))";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub slot_embedding_size: usize,
    pub attention_size: usize,
    pub num_intents: usize,
    pub num_slots: usize,
}

impl ModelDims {
    pub fn new(vocab: &Vocabulary, config: &RunConfig) -> Self {
        Self {
            vocab_size: vocab.num_words(),
            embedding_size: config.embedding_size,
            hidden_size: config.hidden_size,
            slot_embedding_size: config.slot_embedding_size,
            attention_size: config.attention_size,
            num_intents: vocab.num_intents(),
            num_slots: vocab.num_slots(),
        }
    }

    pub fn bos_slot(&self) -> usize {
        self.num_slots
    }
}

/// Named parameter tensors. Cloning yields an independent frozen snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
}

impl ModelParams {
    /// Constant copy of the parameters, unaffected by later updates.
    pub fn snapshot(&self) -> ModelParams {
        self.clone()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }
}

#[derive(Debug, Clone, Copy)]
struct Lstm {
    w_x: usize,
    w_h: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    w_key: usize,
    w_query: usize,
    b: usize,
    v: usize,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    word_emb: usize,
    enc_fw: Lstm,
    enc_bw: Lstm,
    int_att: Attention,
    int_out: Linear,
    slot_emb: usize,
    slot_att: Attention,
    dec: Lstm,
    slot_out: Linear,
}

struct Shapes {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

impl Shapes {
    fn add(&mut self, name: &str, shape: (usize, usize)) -> usize {
        self.names.push(name.to_owned());
        self.shapes.push(shape);
        self.names.len() - 1
    }

    fn lstm(&mut self, prefix: &str, input: usize, hidden: usize) -> Lstm {
        Lstm {
            w_x: self.add(&format!("{prefix}.w_x"), (input, 4 * hidden)),
            w_h: self.add(&format!("{prefix}.w_h"), (hidden, 4 * hidden)),
            b: self.add(&format!("{prefix}.b"), (1, 4 * hidden)),
        }
    }

    fn attention(&mut self, prefix: &str, key: usize, query: usize, size: usize) -> Attention {
        Attention {
            w_key: self.add(&format!("{prefix}.w_key"), (key, size)),
            w_query: self.add(&format!("{prefix}.w_query"), (query, size)),
            b: self.add(&format!("{prefix}.b"), (1, size)),
            v: self.add(&format!("{prefix}.v"), (size, 1)),
        }
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) -> Linear {
        Linear {
            w: self.add(&format!("{prefix}.w"), (input, output)),
            b: self.add(&format!("{prefix}.b"), (1, output)),
        }
    }
}

/// How the slot decoder chooses the previous tag `s_{t-1}` it conditions on.
#[derive(Debug, Clone, Copy)]
pub enum SlotConditioning<'a> {
    /// Gold tags of each example (supervised training).
    TeacherForced(&'a [Vec<usize>]),
    /// Externally fixed tags, e.g. the clean-pass predictions during VAT.
    Fixed(&'a [Vec<usize>]),
    /// Argmax of the previous step's own distribution.
    Greedy,
}

/// Dropout masks drawn from a dedicated generator.
#[derive(Debug, Clone)]
pub struct Dropout {
    rng: ChaCha8Rng,
    pub embedding: f64,
    pub classifier: f64,
}

impl Dropout {
    pub fn new(seed: u64, embedding: f64, classifier: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            embedding,
            classifier,
        }
    }

    fn mask(&mut self, shape: (usize, usize), rate: f64) -> Option<Mat> {
        if rate <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - rate);
        Some(Mat::from_shape_fn(shape, |_| {
            if self.rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        }))
    }
}

/// A padded batch. Rows are examples, columns time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub words: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub steps: usize,
    pub intents: Vec<Option<usize>>,
    pub slots: Vec<Option<Vec<usize>>>,
}

impl Batch {
    pub fn new<'a>(examples: impl IntoIterator<Item = &'a Encoded>) -> Result<Self> {
        let examples: Vec<&Encoded> = examples.into_iter().collect();
        if examples.is_empty() {
            return Err(Error::Empty("batch has no examples"));
        }
        let steps = examples.iter().map(|e| e.words.len()).max().unwrap_or(0);
        if steps == 0 || examples.iter().any(|e| e.words.is_empty()) {
            return Err(Error::Empty("batch contains an empty utterance"));
        }
        let mut batch = Batch {
            ids: Vec::with_capacity(examples.len()),
            words: Vec::with_capacity(examples.len()),
            lengths: Vec::with_capacity(examples.len()),
            steps,
            intents: Vec::with_capacity(examples.len()),
            slots: Vec::with_capacity(examples.len()),
        };
        for e in examples {
            let mut w = e.words.clone();
            w.resize(steps, PAD);
            batch.ids.push(e.id);
            batch.words.push(w);
            batch.lengths.push(e.words.len());
            batch.intents.push(e.intent);
            batch.slots.push(e.slots.clone());
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `B × T` matrix with 1 at real tokens, 0 at padding.
    pub fn mask(&self) -> Mat {
        Mat::from_shape_fn((self.len(), self.steps), |(b, t)| if t < self.lengths[b] { 1.0 } else { 0.0 })
    }

    pub fn step_mask(&self, t: usize) -> Vec<f64> {
        self.lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Indices of rows that carry a full annotation.
    pub fn labeled_rows(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&b| self.intents[b].is_some() && self.slots[b].is_some())
            .collect()
    }

    /// Sub-batch of the given rows, re-padded to their own maximum length.
    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        let encoded: Vec<Encoded> = rows
            .iter()
            .map(|&b| Encoded {
                id: self.ids[b],
                words: self.words[b][..self.lengths[b]].to_vec(),
                intent: self.intents[b],
                slots: self.slots[b].clone(),
            })
            .collect();
        Batch::new(&encoded)
    }
}

/// Per-example intent and per-token slot distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    /// `B × |intents|`.
    pub p_int: Array2<f64>,
    /// `B × T × |slots|`; rows at padded positions are zero.
    pub p_slot: Array3<f64>,
    /// `B × T`.
    pub mask: Array2<f64>,
}

/// Graph handles produced by [`NluModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B × |intents|` log-probabilities.
    pub intent_logp: Var,
    /// `(B·T) × |slots|` log-probabilities, row `b*T + t`.
    pub slot_logp: Var,
    /// Greedy argmax tag at every real position.
    pub predicted_slots: Vec<Vec<usize>>,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct NluModel {
    dims: ModelDims,
    layout: Layout,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

impl NluModel {
    pub fn new(dims: ModelDims) -> Self {
        let h = dims.hidden_size;
        let mut s = Shapes {
            names: Vec::new(),
            shapes: Vec::new(),
        };
        let word_emb = s.add("word_emb", (dims.vocab_size, dims.embedding_size));
        let enc_fw = s.lstm("enc_fw", dims.embedding_size, h);
        let enc_bw = s.lstm("enc_bw", dims.embedding_size, h);
        let int_att = s.attention("int_att", 2 * h, 2 * h, dims.attention_size);
        let int_out = s.linear("int_out", 4 * h, dims.num_intents);
        let slot_emb = s.add("slot_emb", (dims.num_slots + 1, dims.slot_embedding_size));
        let slot_att = s.attention("slot_att", 2 * h, dims.slot_embedding_size, dims.attention_size);
        let dec = s.lstm("dec", 4 * h + dims.slot_embedding_size, h);
        let slot_out = s.linear("slot_out", h, dims.num_slots);
        Self {
            dims,
            layout: Layout {
                word_emb,
                enc_fw,
                enc_bw,
                int_att,
                int_out,
                slot_emb,
                slot_att,
                dec,
                slot_out,
            },
            names: s.names,
            shapes: s.shapes,
        }
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Glorot-uniform weights, zero biases (forget gates at 1), Gaussian
    /// slot embeddings. Word vectors are copied from `embeddings` when given.
    pub fn init_params(&self, embeddings: Option<&EmbeddingMatrix>, seed: u64) -> Result<ModelParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let h = self.dims.hidden_size;
        let mut tensors = Vec::with_capacity(self.shapes.len());
        for (name, &(rows, cols)) in self.names.iter().zip(&self.shapes) {
            let t = if name == "word_emb" {
                match embeddings {
                    Some(e) => {
                        if e.vectors.dim() != (rows, cols) {
                            return Err(Error::DimensionMismatch(e.vectors.nrows() * e.vectors.ncols(), rows * cols));
                        }
                        e.vectors.clone()
                    }
                    None => {
                        let mut m = Mat::from_shape_fn((rows, cols), |_| normal.sample(&mut rng));
                        m.row_mut(PAD).fill(0.0);
                        m
                    }
                }
            } else if name == "slot_emb" {
                Mat::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
            } else if name.ends_with(".b") {
                let mut b = Mat::zeros((rows, cols));
                if name.starts_with("enc_") || name.starts_with("dec") {
                    b.slice_mut(ndarray::s![.., h..2 * h]).fill(1.0);
                }
                b
            } else {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                Mat::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
            };
            tensors.push(t);
        }
        Ok(ModelParams {
            names: self.names.clone(),
            tensors,
        })
    }

    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.tensors.len() != self.shapes.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.shapes.len(),
                params.tensors.len()
            )));
        }
        for ((name, &shape), t) in self.names.iter().zip(&self.shapes).zip(&params.tensors) {
            if t.dim() != shape {
                return Err(Error::Checkpoint(format!("{name}: expected {shape:?}, found {:?}", t.dim())));
            }
        }
        Ok(())
    }

    fn embedding_rows(&self, batch: &Batch) -> Result<Vec<Option<usize>>> {
        let mut rows = Vec::with_capacity(batch.len() * batch.steps);
        for (b, words) in batch.words.iter().enumerate() {
            for (t, &id) in words.iter().enumerate() {
                if id >= self.dims.vocab_size {
                    return Err(Error::IdOutOfRange {
                        id,
                        size: self.dims.vocab_size,
                    });
                }
                rows.push(if t < batch.lengths[b] && id != PAD { Some(id) } else { None });
            }
        }
        Ok(rows)
    }

    /// Embedded batch `B × T × E` and its mask. PAD ids and padding are zero vectors.
    pub fn embed(&self, params: &ModelParams, batch: &Batch) -> Result<(Array3<f64>, Mat)> {
        let rows = self.embedding_rows(batch)?;
        let mut tape = Tape::new(&params.tensors, false);
        let table = tape.param(self.layout.word_emb);
        let emb = tape.gather(table, rows);
        let e = self.dims.embedding_size;
        let flat = tape.value(emb).clone();
        let cube = flat
            .into_shape_with_order((batch.len(), batch.steps, e))
            .expect("stacked embedding shape");
        Ok((cube, batch.mask()))
    }

    fn lstm_step(&self, tape: &mut Tape, cell: Lstm, x_proj: Var, h: Var, c: Var, mask: Vec<f64>) -> (Var, Var) {
        let hs = self.dims.hidden_size;
        let w_h = tape.param(cell.w_h);
        let rec = tape.matmul(h, w_h);
        let gates = tape.add(x_proj, rec);
        let i = tape.slice_cols(gates, 0, hs);
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(gates, hs, 2 * hs);
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(gates, 2 * hs, 3 * hs);
        let g = tape.tanh(g);
        let o = tape.slice_cols(gates, 3 * hs, 4 * hs);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c);
        let write = tape.mul(i, g);
        let c_new = tape.add(keep, write);
        let squashed = tape.tanh(c_new);
        let h_new = tape.mul(o, squashed);
        let h_out = tape.blend(h_new, h, mask.clone());
        let c_out = tape.blend(c_new, c, mask);
        (h_out, c_out)
    }

    /// Attention weights `B × T` of `query` (`B × q`) over precomputed keys.
    fn attention_weights(&self, tape: &mut Tape, att: Attention, keys: Var, query: Var, batch: &Batch, mask: &Mat) -> Var {
        let w_q = tape.param(att.w_query);
        let bias = tape.param(att.b);
        let v = tape.param(att.v);
        let q = tape.matmul(query, w_q);
        let q = tape.add_row(q, bias);
        let mixed = tape.repeat_add(keys, q, batch.steps);
        let act = tape.tanh(mixed);
        let scores = tape.matmul(act, v);
        let scores = tape.reshape(scores, batch.len(), batch.steps);
        tape.masked_softmax(scores, mask)
    }

    fn dropout(tape: &mut Tape, x: Var, dropout: &mut Option<&mut Dropout>, embedding: bool) -> Var {
        let Some(d) = dropout.as_deref_mut() else { return x };
        let rate = if embedding { d.embedding } else { d.classifier };
        let shape = tape.value(x).dim();
        match d.mask(shape, rate) {
            Some(m) => tape.mul_const(x, m),
            None => x,
        }
    }

    /// Build the full graph on `tape`, whose parameters must follow this model's layout.
    ///
    /// `perturbation`, if given, is a `(B·T) × E` node added to the embeddings.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        perturbation: Option<Var>,
        conditioning: SlotConditioning,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<ForwardOutput> {
        let l = self.layout;
        let (bsz, steps) = (batch.len(), batch.steps);
        let hs = self.dims.hidden_size;
        let mask = batch.mask();

        let table = tape.param(l.word_emb);
        let mut emb = tape.gather(table, self.embedding_rows(batch)?);
        if let Some(r) = perturbation {
            let got = tape.value(r).dim();
            if got != (bsz * steps, self.dims.embedding_size) {
                return Err(Error::ShapeMismatch {
                    expected: (bsz, steps, self.dims.embedding_size),
                    got: (got.0 / steps.max(1), steps, got.1),
                });
            }
            emb = tape.add(emb, r);
        }
        emb = Self::dropout(tape, emb, &mut dropout, true);

        let project = |tape: &mut Tape, cell: Lstm| {
            let w_x = tape.param(cell.w_x);
            let b = tape.param(cell.b);
            let p = tape.matmul(emb, w_x);
            tape.add_row(p, b)
        };
        let fw_proj = project(tape, l.enc_fw);
        let bw_proj = project(tape, l.enc_bw);

        let zeros = tape.constant(Mat::zeros((bsz, hs)));
        let mut fw_states = Vec::with_capacity(steps);
        let (mut h, mut c) = (zeros, zeros);
        for t in 0..steps {
            let x = tape.time_slice(fw_proj, t, steps);
            (h, c) = self.lstm_step(tape, l.enc_fw, x, h, c, batch.step_mask(t));
            fw_states.push(h);
        }
        let mut bw_states = vec![zeros; steps];
        let (mut h, mut c) = (zeros, zeros);
        for t in (0..steps).rev() {
            let x = tape.time_slice(bw_proj, t, steps);
            (h, c) = self.lstm_step(tape, l.enc_bw, x, h, c, batch.step_mask(t));
            bw_states[t] = h;
        }
        let encoded: Vec<Var> = (0..steps)
            .map(|t| tape.concat_cols(&[fw_states[t], bw_states[t]]))
            .collect();
        let stacked = tape.stack_time(&encoded);
        // Forward state frozen at the last real token, backward state at the first.
        let summary = tape.concat_cols(&[fw_states[steps - 1], bw_states[0]]);

        // Intent head.
        let w_key = tape.param(l.int_att.w_key);
        let int_keys = tape.matmul(stacked, w_key);
        let alpha = self.attention_weights(tape, l.int_att, int_keys, summary, batch, &mask);
        let context = tape.attend(alpha, stacked);
        let features = tape.concat_cols(&[context, summary]);
        let features = Self::dropout(tape, features, &mut dropout, false);
        let w = tape.param(l.int_out.w);
        let b = tape.param(l.int_out.b);
        let logits = tape.matmul(features, w);
        let logits = tape.add_row(logits, b);
        let intent_logp = tape.log_softmax(logits);

        // Slot head.
        let w_key = tape.param(l.slot_att.w_key);
        let slot_keys = tape.matmul(stacked, w_key);
        let slot_table = tape.param(l.slot_emb);
        let dec_wx = tape.param(l.dec.w_x);
        let dec_b = tape.param(l.dec.b);
        let out_w = tape.param(l.slot_out.w);
        let out_b = tape.param(l.slot_out.b);
        let dec_zeros = tape.constant(Mat::zeros((bsz, hs)));
        let (mut dh, mut dc) = (dec_zeros, dec_zeros);
        let mut prev = vec![self.dims.bos_slot(); bsz];
        let mut step_logp = Vec::with_capacity(steps);
        let mut predicted = vec![Vec::new(); bsz];
        for t in 0..steps {
            let prev_emb = tape.gather(slot_table, prev.iter().map(|&s| Some(s)).collect());
            let alpha = self.attention_weights(tape, l.slot_att, slot_keys, prev_emb, batch, &mask);
            let ctx = tape.attend(alpha, stacked);
            let x = tape.concat_cols(&[encoded[t], ctx, prev_emb]);
            let xp = tape.matmul(x, dec_wx);
            let xp = tape.add_row(xp, dec_b);
            (dh, dc) = self.lstm_step(tape, l.dec, xp, dh, dc, batch.step_mask(t));
            let feat = Self::dropout(tape, dh, &mut dropout, false);
            let logits = tape.matmul(feat, out_w);
            let logits = tape.add_row(logits, out_b);
            let logp = tape.log_softmax(logits);
            let values = tape.value(logp);
            for b in 0..bsz {
                let best = argmax(values.row(b).iter().copied());
                if t < batch.lengths[b] {
                    predicted[b].push(best);
                }
                prev[b] = match conditioning {
                    SlotConditioning::TeacherForced(tags) | SlotConditioning::Fixed(tags) => {
                        tags[b].get(t).copied().unwrap_or(self.dims.bos_slot())
                    }
                    SlotConditioning::Greedy => best,
                };
            }
            step_logp.push(logp);
        }
        let slot_logp = tape.stack_time(&step_logp);
        Ok(ForwardOutput {
            intent_logp,
            slot_logp,
            predicted_slots: predicted,
            steps,
        })
    }

    /// Inference without dropout. `perturbation` is `B × T × E`.
    pub fn posteriors(
        &self,
        params: &ModelParams,
        batch: &Batch,
        perturbation: Option<&Array3<f64>>,
        conditioning: SlotConditioning,
    ) -> Result<Posteriors> {
        let mut tape = Tape::new(&params.tensors, false);
        let r = match perturbation {
            Some(p) => {
                let expected = (batch.len(), batch.steps, self.dims.embedding_size);
                if p.dim() != expected {
                    return Err(Error::ShapeMismatch {
                        expected,
                        got: p.dim(),
                    });
                }
                let flat = p
                    .to_owned()
                    .into_shape_with_order((expected.0 * expected.1, expected.2))
                    .expect("perturbation reshape");
                Some(tape.constant(flat))
            }
            None => None,
        };
        let out = self.forward(&mut tape, batch, r, conditioning, None)?;
        Ok(self.collect_posteriors(&tape, &out, batch))
    }

    pub fn collect_posteriors(&self, tape: &Tape, out: &ForwardOutput, batch: &Batch) -> Posteriors {
        let p_int = tape.value(out.intent_logp).mapv(f64::exp);
        let slot = tape.value(out.slot_logp);
        let mask = batch.mask();
        let mut p_slot = Array3::zeros((batch.len(), batch.steps, self.dims.num_slots));
        for b in 0..batch.len() {
            for t in 0..batch.lengths[b] {
                let row = slot.row(b * batch.steps + t).mapv(f64::exp);
                p_slot.slice_mut(ndarray::s![b, t, ..]).assign(&row);
            }
        }
        Posteriors { p_int, p_slot, mask }
    }

    /// Greedy prediction: intent argmax and autoregressive slot argmax.
    pub fn predict(&self, params: &ModelParams, batch: &Batch) -> Result<Vec<(usize, Vec<usize>)>> {
        if !params.is_finite() {
            return Err(Error::Numerical("non-finite parameters".into()));
        }
        let mut tape = Tape::new(&params.tensors, false);
        let out = self.forward(&mut tape, batch, None, SlotConditioning::Greedy, None)?;
        let intents = tape.value(out.intent_logp);
        Ok(out
            .predicted_slots
            .into_iter()
            .enumerate()
            .map(|(b, tags)| (argmax(intents.row(b).iter().copied()), tags))
            .collect())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_dims() -> ModelDims {
        ModelDims {
            vocab_size: 6,
            embedding_size: 3,
            hidden_size: 2,
            slot_embedding_size: 2,
            attention_size: 2,
            num_intents: 2,
            num_slots: 3,
        }
    }

    fn enc(id: usize, words: &[usize]) -> Encoded {
        Encoded {
            id,
            words: words.to_vec(),
            intent: Some(id % 2),
            slots: Some(words.iter().map(|w| w % 3).collect()),
        }
    }

    #[test]
    fn tiny_model_is_small() {
        let model = NluModel::new(tiny_dims());
        let p = model.init_params(None, 0).unwrap();
        model.check_params(&p).unwrap();
        assert!(p.num_scalars() <= 500, "{}", p.num_scalars());
    }

    #[test]
    fn embed_shapes_and_mask() {
        let model = NluModel::new(tiny_dims());
        let p = model.init_params(None, 1).unwrap();
        let one = Batch::new(&[enc(0, &[2, 3, 4])]).unwrap();
        let (x, m) = model.embed(&p, &one).unwrap();
        assert_eq!(x.dim(), (1, 3, 3));
        assert_eq!(m, ndarray::array![[1.0, 1.0, 1.0]]);

        let two = Batch::new(&[enc(0, &[2, 3]), enc(1, &[2, 3, 4, 5])]).unwrap();
        let (x, m) = model.embed(&p, &two).unwrap();
        assert_eq!(x.dim(), (2, 4, 3));
        assert_eq!(m, ndarray::array![[1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]]);
        assert!(x.slice(ndarray::s![0, 2.., ..]).iter().all(|&v| v == 0.0));

        let with_pad = Batch::new(&[enc(0, &[2, PAD, 4])]).unwrap();
        let (x, _) = model.embed(&p, &with_pad).unwrap();
        assert!(x.slice(ndarray::s![0, 1, ..]).iter().all(|&v| v == 0.0));

        let bad = Batch::new(&[enc(0, &[2, 99])]).unwrap();
        assert!(matches!(model.embed(&p, &bad), Err(Error::IdOutOfRange { id: 99, .. })));
    }

    #[test]
    fn zero_perturbation_is_bitwise_identity() {
        let model = NluModel::new(tiny_dims());
        let p = model.init_params(None, 2).unwrap();
        let batch = Batch::new(&[enc(0, &[2, 3]), enc(1, &[4, 5, 2])]).unwrap();
        let clean = model.posteriors(&p, &batch, None, SlotConditioning::Greedy).unwrap();
        let zero = Array3::zeros((2, 3, 3));
        let perturbed = model.posteriors(&p, &batch, Some(&zero), SlotConditioning::Greedy).unwrap();
        assert_eq!(clean, perturbed);
    }

    #[test]
    fn perturbation_shape_is_checked() {
        let model = NluModel::new(tiny_dims());
        let p = model.init_params(None, 2).unwrap();
        let batch = Batch::new(&[enc(0, &[2, 3])]).unwrap();
        let wrong = Array3::zeros((1, 3, 3));
        assert!(matches!(
            model.posteriors(&p, &batch, Some(&wrong), SlotConditioning::Greedy),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn posteriors_are_distributions() {
        let model = NluModel::new(tiny_dims());
        let p = model.init_params(None, 3).unwrap();
        let batch = Batch::new(&[enc(0, &[2, 3, 1]), enc(1, &[5])]).unwrap();
        let post = model.posteriors(&p, &batch, None, SlotConditioning::Greedy).unwrap();
        for row in post.p_int.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        for b in 0..2 {
            for t in 0..batch.lengths[b] {
                let s: f64 = post.p_slot.slice(ndarray::s![b, t, ..]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn greedy_decoding_matches_manual_unroll() {
        // Decoding step by step with Fixed conditioning on the tags chosen so
        // far must reproduce the single greedy forward call.
        let model = NluModel::new(tiny_dims());
        let p = model.init_params(None, 11).unwrap();
        let batch = Batch::new(&[enc(0, &[2, 4, 3])]).unwrap();
        let greedy = model.posteriors(&p, &batch, None, SlotConditioning::Greedy).unwrap();

        let mut tags: Vec<usize> = Vec::new();
        for t in 0..3 {
            let mut cond = tags.clone();
            cond.resize(3, 0);
            let post = model
                .posteriors(&p, &batch, None, SlotConditioning::Fixed(&[cond]))
                .unwrap();
            let row = post.p_slot.slice(ndarray::s![0, t, ..]).to_owned();
            let expected = greedy.p_slot.slice(ndarray::s![0, t, ..]).to_owned();
            assert_eq!(row, expected, "step {t}");
            tags.push(argmax(row.iter().copied()));
        }
        let pred = model.predict(&p, &batch).unwrap();
        assert_eq!(pred[0].1, tags);
    }

    #[test]
    fn padding_content_is_ignored() {
        let model = NluModel::new(tiny_dims());
        let p = model.init_params(None, 4).unwrap();
        let a = Batch::new(&[enc(0, &[2, 3]), enc(1, &[4, 5, 2, 3])]).unwrap();
        let mut b = a.clone();
        b.words[0][2] = 5;
        b.words[0][3] = 4;
        let pa = model.posteriors(&p, &a, None, SlotConditioning::Greedy).unwrap();
        let pb = model.posteriors(&p, &b, None, SlotConditioning::Greedy).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(argmax([0.5, 0.5]), 0);
        assert_eq!(argmax([0.1, 0.7, 0.7]), 1);
        assert_eq!(argmax([0.0, 0.0, 1.0]), 2);
    }

    #[test]
    fn snapshot_is_frozen() {
        let model = NluModel::new(tiny_dims());
        let mut p = model.init_params(None, 5).unwrap();
        let snap = p.snapshot();
        assert_eq!(snap, p);
        p.tensors[1][[0, 0]] += 1.0;
        assert_ne!(snap.tensors[1], p.tensors[1]);
    }
}
