//! Dataset ingestion: the three-file aligned format (`seq.in`, `seq.out`,
//! `label`), vocabularies, pretrained word vectors and labeled-subset sampling.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Standard deviation of randomly initialised word vectors.
pub const RANDOM_VECTOR_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: usize,
    tokens: Vec<String>,
}

impl Utterance {
    pub fn new(id: usize, tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Format(format!("utterance {id} has no tokens")));
        }
        if tokens.iter().any(|t| t.is_empty()) {
            return Err(Error::Format(format!("utterance {id} has an empty token")));
        }
        Ok(Self { id, tokens })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub intent: String,
    pub slots: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub utterance: Utterance,
    pub annotation: Option<Annotation>,
    pub split: Split,
}

impl Example {
    pub fn id(&self) -> usize {
        self.utterance.id
    }

    pub fn tokens(&self) -> &[String] {
        self.utterance.tokens()
    }

    pub fn intent(&self) -> Option<&str> {
        self.annotation.as_ref().map(|a| a.intent.as_str())
    }

    /// Copy of this example with the annotation removed.
    pub fn unlabeled(&self) -> Example {
        Example {
            utterance: self.utterance.clone(),
            annotation: None,
            split: self.split,
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

fn split_tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}

/// Load one split directory containing `seq.in`, `seq.out` and `label`.
///
/// Example ids are the zero-based line numbers.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Example>> {
    let seq_in = read_lines(&dir.join("seq.in"))?;
    let seq_out_path = dir.join("seq.out");
    let seq_out = read_lines(&seq_out_path)?;
    let labels = read_lines(&dir.join("label"))?;
    if seq_in.len() != seq_out.len() || seq_in.len() != labels.len() {
        return Err(Error::Format(format!(
            "{}: line counts differ (seq.in {}, seq.out {}, label {})",
            dir.display(),
            seq_in.len(),
            seq_out.len(),
            labels.len()
        )));
    }

    seq_in
        .iter()
        .zip(&seq_out)
        .zip(&labels)
        .enumerate()
        .map(|(i, ((words, tags), label))| {
            let tokens = split_tokens(words);
            let slots = split_tokens(tags);
            if tokens.len() != slots.len() {
                return Err(Error::Alignment {
                    path: seq_out_path.clone(),
                    line: i + 1,
                    tokens: tokens.len(),
                    tags: slots.len(),
                });
            }
            let intent = label.trim().to_owned();
            if intent.is_empty() {
                return Err(Error::Format(format!("{}: line {} has no intent", dir.display(), i + 1)));
            }
            Ok(Example {
                utterance: Utterance::new(i, tokens)?,
                annotation: Some(Annotation { intent, slots }),
                split,
            })
        })
        .collect()
}

/// Write examples back to the three-file format. Unlabeled examples are rejected.
pub fn write_split(dir: &Path, examples: &[Example]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut seq_in = String::new();
    let mut seq_out = String::new();
    let mut labels = String::new();
    for ex in examples {
        let ann = ex
            .annotation
            .as_ref()
            .ok_or_else(|| Error::Format(format!("example {} has no annotation", ex.id())))?;
        seq_in.push_str(&ex.tokens().join(" "));
        seq_in.push('\n');
        seq_out.push_str(&ann.slots.join(" "));
        seq_out.push('\n');
        labels.push_str(&ann.intent);
        labels.push('\n');
    }
    for (name, body) in [("seq.in", seq_in), ("seq.out", seq_out), ("label", labels)] {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(body.as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    /// Load `train/`, `test/` and one of `dev/` / `valid/` below `root`.
    ///
    /// When no dev directory exists and `dev_carve` is set, that many
    /// examples are moved out of train under `seed`; train ids are then
    /// renumbered densely in their original order.
    pub fn load(root: &Path, name: &str, dev_carve: Option<usize>, seed: u64) -> Result<Self> {
        let mut train = load_split(&root.join("train"), Split::Train)?;
        let test = load_split(&root.join("test"), Split::Test)?;
        let dev_dir = ["dev", "valid"].iter().map(|d| root.join(d)).find(|p| p.is_dir());
        let dev = match (dev_dir, dev_carve) {
            (Some(dir), _) => load_split(&dir, Split::Dev)?,
            (None, Some(n)) => {
                let (rest, carved) = carve(train, n, seed)?;
                train = rest;
                carved
            }
            (None, None) => Vec::new(),
        };
        Ok(Self {
            name: name.to_owned(),
            train,
            dev,
            test,
        })
    }

    /// SHA-256 over the three-file rendering of every split.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (split, examples) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            h.update(split.as_bytes());
            for ex in examples {
                h.update(ex.tokens().join(" ").as_bytes());
                if let Some(a) = &ex.annotation {
                    h.update(b"\t");
                    h.update(a.slots.join(" ").as_bytes());
                    h.update(b"\t");
                    h.update(a.intent.as_bytes());
                }
                h.update(b"\n");
            }
        }
        hex::encode(h.finalize())
    }
}

fn carve(train: Vec<Example>, n: usize, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if n >= train.len() {
        return Err(Error::Unsatisfiable(format!(
            "cannot carve {n} dev examples from {} train examples",
            train.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_dev = vec![false; train.len()];
    for &i in &order[..n] {
        is_dev[i] = true;
    }
    let mut rest = Vec::new();
    let mut dev = Vec::new();
    for (i, mut ex) in train.into_iter().enumerate() {
        if is_dev[i] {
            ex.split = Split::Dev;
            ex.utterance.id = dev.len();
            dev.push(ex);
        } else {
            ex.utterance.id = rest.len();
            rest.push(ex);
        }
    }
    Ok((rest, dev))
}

/// Dense index over words, slot tags and intents.
///
/// Word ids 0 and 1 are reserved for PAD and UNK. Slot tags occupy
/// `0..num_slots()`; the id `num_slots()` is the start-of-sequence slot used
/// to condition the first decoder step and is never predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    slots: Vec<String>,
    intents: Vec<String>,
    #[serde(skip)]
    word_index: HashMap<String, usize>,
    #[serde(skip)]
    slot_index: HashMap<String, usize>,
    #[serde(skip)]
    intent_index: HashMap<String, usize>,
}

/// An example mapped to vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub id: usize,
    pub words: Vec<usize>,
    pub intent: Option<usize>,
    pub slots: Option<Vec<usize>>,
}

fn index_of(items: &[String]) -> HashMap<String, usize> {
    items.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect()
}

impl Vocabulary {
    /// Indices follow first occurrence in `examples` order.
    pub fn build<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Result<Self> {
        let mut words = vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
        let mut word_index = index_of(&words);
        let mut slots = Vec::new();
        let mut slot_index = HashMap::new();
        let mut intents = Vec::new();
        let mut intent_index = HashMap::new();
        let mut seen = 0usize;

        fn intern(list: &mut Vec<String>, index: &mut HashMap<String, usize>, key: &str) {
            if !index.contains_key(key) {
                index.insert(key.to_owned(), list.len());
                list.push(key.to_owned());
            }
        }

        for ex in examples {
            seen += 1;
            for tok in ex.tokens() {
                intern(&mut words, &mut word_index, tok);
            }
            if let Some(ann) = &ex.annotation {
                intern(&mut intents, &mut intent_index, &ann.intent);
                for tag in &ann.slots {
                    intern(&mut slots, &mut slot_index, tag);
                }
            }
        }
        if seen == 0 {
            return Err(Error::Empty("cannot build a vocabulary from zero examples"));
        }
        Ok(Self {
            words,
            slots,
            intents,
            word_index,
            slot_index,
            intent_index,
        })
    }

    /// Rebuild lookup tables after deserialisation.
    pub fn reindex(&mut self) {
        self.word_index = index_of(&self.words);
        self.slot_index = index_of(&self.slots);
        self.intent_index = index_of(&self.intents);
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn num_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn bos_slot(&self) -> usize {
        self.slots.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn slots(&self) -> &[String] {
        &self.slots
    }

    pub fn intents(&self) -> &[String] {
        &self.intents
    }

    pub fn word_id(&self, word: &str) -> usize {
        self.word_index.get(word).copied().unwrap_or(UNK)
    }

    pub fn slot_id(&self, tag: &str) -> Option<usize> {
        self.slot_index.get(tag).copied()
    }

    pub fn intent_id(&self, intent: &str) -> Option<usize> {
        self.intent_index.get(intent).copied()
    }

    pub fn slot_name(&self, id: usize) -> &str {
        &self.slots[id]
    }

    pub fn intent_name(&self, id: usize) -> &str {
        &self.intents[id]
    }

    /// Annotations with an unknown intent or slot tag encode as `None`.
    pub fn encode(&self, ex: &Example) -> Encoded {
        let words = ex.tokens().iter().map(|w| self.word_id(w)).collect();
        let (intent, slots) = match &ex.annotation {
            Some(ann) => (
                self.intent_id(&ann.intent),
                ann.slots.iter().map(|t| self.slot_id(t)).collect::<Option<Vec<_>>>(),
            ),
            None => (None, None),
        };
        Encoded {
            id: ex.id(),
            words,
            intent,
            slots,
        }
    }

    /// Encode with the annotation dropped.
    pub fn encode_unlabeled(&self, ex: &Example) -> Encoded {
        Encoded {
            id: ex.id(),
            words: ex.tokens().iter().map(|w| self.word_id(w)).collect(),
            intent: None,
            slots: None,
        }
    }

    /// SHA-256 digests of the word, slot and intent inventories.
    pub fn hashes(&self) -> VocabHashes {
        let digest = |items: &[String]| {
            let mut h = Sha256::new();
            for item in items {
                h.update(item.as_bytes());
                h.update(b"\n");
            }
            hex::encode(h.finalize())
        };
        VocabHashes {
            words: digest(&self.words),
            slots: digest(&self.slots),
            intents: digest(&self.intents),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabHashes {
    pub words: String,
    pub slots: String,
    pub intents: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub vectors: Array2<f64>,
    pub normalized: bool,
}

impl EmbeddingMatrix {
    /// Gaussian vectors with std [`RANDOM_VECTOR_STD`]; the PAD row is zero.
    pub fn random(vocab: &Vocabulary, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, RANDOM_VECTOR_STD).expect("valid std");
        let mut vectors = Array2::from_shape_fn((vocab.num_words(), dim), |_| normal.sample(&mut rng));
        vectors.row_mut(PAD).fill(0.0);
        Self {
            vectors,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Standardise every dimension over the non-PAD rows (population variance).
    pub fn normalize(&mut self) {
        let rows = self.vectors.nrows();
        if rows <= 1 {
            self.normalized = true;
            return;
        }
        let n = (rows - 1) as f64;
        for mut col in self.vectors.columns_mut() {
            let body: Vec<f64> = col.iter().skip(1).copied().collect();
            let mean = body.iter().sum::<f64>() / n;
            let var = body.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            for (r, x) in col.iter_mut().enumerate() {
                if r == PAD {
                    *x = 0.0;
                } else if std > 0.0 {
                    *x = (*x - mean) / std;
                } else {
                    *x -= mean;
                }
            }
        }
        self.normalized = true;
    }
}

/// Read `word v1 … vD` rows into a matrix aligned with `vocab`.
///
/// Words absent from the file receive random vectors drawn under `seed`; an
/// optional fastText-style `count dim` header line is skipped.
pub fn load_pretrained(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    normalize: bool,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    let mut matrix = EmbeddingMatrix::random(vocab, dim, seed);
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: Vec<&str> = parts.collect();
        if i == 0 && values.len() == 1 && word.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
            continue;
        }
        if values.len() != dim {
            return Err(Error::Format(format!(
                "{}:{}: expected {dim} values, found {}",
                path.display(),
                i + 1,
                values.len()
            )));
        }
        let id = vocab.word_id(word);
        if id == UNK && word != UNK_TOKEN || id == PAD {
            continue;
        }
        let mut row = matrix.vectors.row_mut(id);
        for (dst, v) in row.iter_mut().zip(&values) {
            *dst = v
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
    }
    if normalize {
        matrix.normalize();
    }
    Ok(matrix)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regime {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl Regime {
    /// SHA-256 of the sorted labeled ids.
    pub fn labeled_hash(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.labeled {
            h.update(id.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// `round(fraction / 100 × n)`.
pub fn regime_size(fraction: f64, n: usize) -> usize {
    (fraction / 100.0 * n as f64).round() as usize
}

/// Sample a labeled subset covering every intent at least once.
///
/// One example per intent is drawn first, the remainder is filled uniformly
/// from what is left. Both id lists are returned sorted.
pub fn sample_regime(examples: &[Example], fraction: f64, seed: u64) -> Result<Regime> {
    if !(fraction > 0.0 && fraction <= 100.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 100]")));
    }
    let target = regime_size(fraction, examples.len());
    sample_count(examples, target, seed)
}

/// Same as [`sample_regime`] with an explicit labeled-set size.
pub fn sample_count(examples: &[Example], target: usize, seed: u64) -> Result<Regime> {
    let mut by_intent: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for ex in examples {
        let intent = ex
            .intent()
            .ok_or_else(|| Error::Format(format!("example {} has no intent", ex.id())))?;
        by_intent.entry(intent).or_default().push(ex.id());
    }
    if target < by_intent.len() {
        return Err(Error::Unsatisfiable(format!(
            "{target} labeled examples cannot cover {} intents",
            by_intent.len()
        )));
    }
    if target > examples.len() {
        return Err(Error::Unsatisfiable(format!(
            "{target} labeled examples requested from {}",
            examples.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = std::collections::BTreeSet::new();
    for ids in by_intent.values() {
        let pick = *ids.choose(&mut rng).expect("intent groups are nonempty");
        chosen.insert(pick);
    }
    let mut rest: Vec<usize> = examples.iter().map(Example::id).filter(|id| !chosen.contains(id)).collect();
    rest.shuffle(&mut rng);
    chosen.extend(rest.into_iter().take(target - by_intent.len()));

    let labeled: Vec<usize> = chosen.into_iter().collect();
    let mut unlabeled: Vec<usize> = examples
        .iter()
        .map(Example::id)
        .filter(|id| labeled.binary_search(id).is_err())
        .collect();
    unlabeled.sort_unstable();
    Ok(Regime { labeled, unlabeled })
}

/// A validation subset of `dev` proportional to the labeled fraction (≥ 1).
pub fn sample_validation(dev: &[Example], fraction: f64, seed: u64) -> Vec<usize> {
    if dev.is_empty() {
        return Vec::new();
    }
    let n = regime_size(fraction, dev.len()).clamp(1, dev.len());
    let mut ids: Vec<usize> = dev.iter().map(Example::id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a));
    ids.truncate(n);
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    pub split: Split,
    pub labeled: bool,
    pub seed: u64,
    pub fraction: f64,
}

/// One JSON record per train example.
pub fn write_regime_manifest(path: &Path, regime: &Regime, seed: u64, fraction: f64) -> Result<()> {
    let mut out = String::new();
    let mut records: Vec<ManifestRecord> = regime
        .labeled
        .iter()
        .map(|&id| (id, true))
        .chain(regime.unlabeled.iter().map(|&id| (id, false)))
        .map(|(id, labeled)| ManifestRecord {
            id,
            split: Split::Train,
            labeled,
            seed,
            fraction,
        })
        .collect();
    records.sort_by_key(|r| r.id);
    for r in &records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_regime_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    read_lines(path)?
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
