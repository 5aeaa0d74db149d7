//! Experiment cells: one training configuration on one seed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context as _, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use viraal_core::active::{self, Criterion, QuerySpec};
use viraal_core::config::{LossTerm, RunConfig};
use viraal_core::corpus::{self, Dataset, EmbeddingMatrix, Example, Regime, Vocabulary};
use viraal_core::metrics::MetricsReport;
use viraal_core::train::{self, FitInput, FitOutcome, RunManifest};

/// Loaded data shared by every cell of an experiment.
#[derive(Debug, Clone)]
pub struct Context {
    pub dataset: Dataset,
    pub vocab: Vocabulary,
    pub embeddings: Option<EmbeddingMatrix>,
    pub base: RunConfig,
}

impl Context {
    /// The vocabulary covers the train split; dev and test words outside it map to UNK.
    pub fn new(dataset: Dataset, base: RunConfig, embeddings: Option<&Path>) -> Result<Self> {
        let vocab = Vocabulary::build(&dataset.train)?;
        let embeddings = match embeddings {
            Some(p) => Some(corpus::load_pretrained(p, &vocab, base.embedding_size, false, base.seed)?),
            None => None,
        };
        Ok(Self {
            dataset,
            vocab,
            embeddings,
            base,
        })
    }

    pub fn name(&self) -> &str {
        &self.dataset.name
    }

    fn train_examples(&self, ids: &[usize]) -> Vec<&Example> {
        ids.iter().map(|&i| &self.dataset.train[i]).collect()
    }

    fn dev_examples(&self, ids: &[usize]) -> Vec<&Example> {
        ids.iter().map(|&i| &self.dataset.dev[i]).collect()
    }

    fn test_examples(&self) -> Vec<&Example> {
        self.dataset.test.iter().collect()
    }

    fn config(&self, losses: Vec<LossTerm>, seed: u64) -> RunConfig {
        RunConfig {
            losses,
            seed,
            ..self.base.clone()
        }
    }

    /// Train on `regime` and evaluate on the test split.
    pub fn fit_regime(&self, regime: &Regime, validation: &[usize], config: &RunConfig) -> Result<(FitOutcome, MetricsReport, RunManifest)> {
        let input = FitInput {
            vocab: &self.vocab,
            embeddings: self.embeddings.as_ref(),
            labeled: self.train_examples(&regime.labeled),
            unlabeled: self.train_examples(&regime.unlabeled),
            validation: self.dev_examples(validation),
        };
        let outcome = train::fit(&input, config)?;
        let mut report = train::evaluate(&outcome.model, &outcome.params, &self.vocab, &self.test_examples())?;
        report.loss_curve = outcome.loss_curve();
        report.seed = Some(config.seed);
        let manifest = RunManifest {
            config: config.clone(),
            code_revision: train::code_revision(),
            seed: config.seed,
            dataset_fingerprint: self.dataset.fingerprint(),
            labeled_hash: regime.labeled_hash(),
            vocab: self.vocab.hashes(),
            labeled: regime.labeled.len(),
            unlabeled: regime.unlabeled.len(),
            best_epoch: outcome.best_epoch,
        };
        Ok((outcome, report, manifest))
    }
}

/// Which heads are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Int,
    Slot,
    Joint,
}

impl Task {
    pub fn entropy_criterion(self) -> Criterion {
        match self {
            Task::Int => Criterion::EntropyInt,
            Task::Slot => Criterion::EntropySlot,
            Task::Joint => Criterion::EntropyJoint,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Int => "int",
            Task::Slot => "slot",
            Task::Joint => "joint",
        })
    }
}

impl FromStr for Task {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "int" => Task::Int,
            "slot" => Task::Slot,
            "joint" => Task::Joint,
            _ => bail!("unknown task {s:?} (expected int, slot or joint)"),
        })
    }
}

/// A loss configuration: a task trained with or without VAT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Variant {
    pub vat: bool,
    pub task: Task,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant { vat: false, task: Task::Int },
        Variant { vat: false, task: Task::Slot },
        Variant { vat: false, task: Task::Joint },
        Variant { vat: true, task: Task::Int },
        Variant { vat: true, task: Task::Slot },
        Variant { vat: true, task: Task::Joint },
    ];

    pub fn losses(self) -> Vec<LossTerm> {
        let mut l = match self.task {
            Task::Int => vec![LossTerm::CeInt],
            Task::Slot => vec![LossTerm::CeSlot],
            Task::Joint => vec![LossTerm::CeInt, LossTerm::CeSlot],
        };
        if self.vat {
            l.push(match self.task {
                Task::Int => LossTerm::VatInt,
                Task::Slot => LossTerm::VatSlot,
                Task::Joint => LossTerm::VatJoint,
            });
        }
        l
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", if self.vat { "vat" } else { "ce" }, self.task)
    }
}

impl FromStr for Variant {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        let (kind, task) = s.split_once('-').ok_or_else(|| anyhow!("variant {s:?} should look like ce-joint"))?;
        let vat = match kind {
            "ce" => false,
            "vat" => true,
            _ => bail!("unknown training kind {kind:?} (expected ce or vat)"),
        };
        Ok(Variant { vat, task: task.parse()? })
    }
}

/// An active-learning method: training kind and query criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Method {
    pub vat: bool,
    pub entropy: bool,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method { vat: false, entropy: false },
        Method { vat: false, entropy: true },
        Method { vat: true, entropy: false },
        Method { vat: true, entropy: true },
    ];

    pub fn criterion(self, task: Task) -> Criterion {
        if self.entropy {
            task.entropy_criterion()
        } else {
            Criterion::Random
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", if self.vat { "vat" } else { "ce" }, if self.entropy { "ent" } else { "random" })
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        let (kind, crit) = s.split_once('-').ok_or_else(|| anyhow!("method {s:?} should look like vat-ent"))?;
        let vat = match kind {
            "ce" => false,
            "vat" => true,
            _ => bail!("unknown training kind {kind:?}"),
        };
        let entropy = match crit {
            "ent" | "entropy" => true,
            "random" => false,
            _ => bail!("unknown criterion {crit:?} (expected ent or random)"),
        };
        Ok(Method { vat, entropy })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed { error: String },
}

/// One result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub key: String,
    pub experiment: String,
    pub dataset: String,
    /// Fraction, budget or split size, depending on the experiment.
    pub x: f64,
    pub series: String,
    pub seed: u64,
    pub status: CellStatus,
    pub report: Option<MetricsReport>,
    pub initial_hash: Option<String>,
    pub manifest: Option<RunManifest>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl CellRecord {
    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }
}

/// Something the work queue can run.
pub trait Cell: Send + Sync {
    fn key(&self) -> String;
    /// Record skeleton for this cell, used for failures.
    fn describe(&self) -> CellRecord;
    fn run(&self, ctx: &Context) -> Result<CellRecord>;
}

fn skeleton(key: String, experiment: &str, dataset: &str, x: f64, series: String, seed: u64) -> CellRecord {
    CellRecord {
        key,
        experiment: experiment.into(),
        dataset: dataset.into(),
        x,
        series,
        seed,
        status: CellStatus::Ok,
        report: None,
        initial_hash: None,
        manifest: None,
        extra: BTreeMap::new(),
    }
}

fn fmt_x(x: f64) -> String {
    let s = format!("{x}");
    s.replace('.', "p")
}

/// Data-regime sweep cell: `fraction`% of train labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeCell {
    pub dataset: String,
    pub fraction: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Cell for RegimeCell {
    fn key(&self) -> String {
        format!("regime_{}_f{}_{}_s{}", self.dataset, fmt_x(self.fraction), self.variant, self.seed)
    }

    fn describe(&self) -> CellRecord {
        skeleton(self.key(), "regime", &self.dataset, self.fraction, self.variant.to_string(), self.seed)
    }

    fn run(&self, ctx: &Context) -> Result<CellRecord> {
        let regime = corpus::sample_regime(&ctx.dataset.train, self.fraction, self.seed)?;
        let validation = corpus::sample_validation(&ctx.dataset.dev, self.fraction, self.seed);
        let config = ctx.config(self.variant.losses(), self.seed);
        let (_, report, manifest) = ctx.fit_regime(&regime, &validation, &config)?;
        let mut rec = self.describe();
        rec.report = Some(report);
        rec.manifest = Some(manifest);
        Ok(rec)
    }
}

/// Seed derived from the dataset, total budget and run seed only, so every
/// method of one (dataset, budget, seed) sees the same initial set.
pub fn shared_seed(dataset: &str, budget: f64, seed: u64) -> u64 {
    let digest = Sha256::digest(format!("{dataset}/{budget}/{seed}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Initial random half of a total budget of `budget`% of train.
pub fn initial_set(ctx: &Context, budget: f64, seed: u64) -> Result<Regime> {
    Ok(corpus::sample_regime(&ctx.dataset.train, budget / 2.0, shared_seed(ctx.name(), budget, seed))?)
}

/// Everything produced by a two-round active-learning run.
#[derive(Debug, Clone)]
pub struct AlOutcome {
    pub initial: Regime,
    pub round1: FitOutcome,
    pub round1_config: RunConfig,
    pub query: QuerySpec,
    pub selected: Vec<usize>,
    pub final_regime: Regime,
    pub report: MetricsReport,
    pub manifest: RunManifest,
}

/// Query `budget` ids from `pool` with the round-one model.
pub fn query(ctx: &Context, round1: &FitOutcome, pool: &[usize], spec: &QuerySpec) -> Result<Vec<usize>> {
    let examples: Vec<Example> = pool.iter().map(|&i| ctx.dataset.train[i].unlabeled()).collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let records = active::score_pool(&round1.model, &round1.params, &ctx.vocab, &refs)?;
    Ok(active::select(&records, spec)?)
}

/// Labeled and unlabeled ids after adding `selected` to `initial`.
pub fn extend_regime(initial: &Regime, selected: &[usize]) -> Regime {
    let chosen = active::as_set(selected);
    let mut labeled: Vec<usize> = initial.labeled.iter().chain(selected).copied().collect();
    labeled.sort_unstable();
    labeled.dedup();
    let unlabeled = initial.unlabeled.iter().copied().filter(|i| !chosen.contains(i)).collect();
    Regime { labeled, unlabeled }
}

/// Two-round active-learning cell with a total budget of `budget`% of train.
#[derive(Debug, Clone, PartialEq)]
pub struct AlCell {
    pub dataset: String,
    pub budget: f64,
    pub method: Method,
    pub task: Task,
    pub seed: u64,
}

impl AlCell {
    pub fn variant(&self) -> Variant {
        Variant {
            vat: self.method.vat,
            task: self.task,
        }
    }

    pub fn query_spec(&self, ctx: &Context, initial: &Regime) -> QuerySpec {
        let total = corpus::regime_size(self.budget, ctx.dataset.train.len());
        QuerySpec {
            criterion: self.method.criterion(self.task),
            budget: total.saturating_sub(initial.labeled.len()),
            seed: shared_seed(ctx.name(), self.budget, self.seed) ^ 0x5e1ec7,
        }
    }

    pub fn run_al(&self, ctx: &Context) -> Result<AlOutcome> {
        let initial = initial_set(ctx, self.budget, self.seed)?;
        let validation = corpus::sample_validation(&ctx.dataset.dev, self.budget, self.seed);
        let config = ctx.config(self.variant().losses(), self.seed);
        let (round1, _, _) = ctx.fit_regime(&initial, &validation, &config).context("round one")?;
        let spec = self.query_spec(ctx, &initial);
        let selected = query(ctx, &round1, &initial.unlabeled, &spec)?;
        let final_regime = extend_regime(&initial, &selected);
        let (_, report, manifest) = ctx.fit_regime(&final_regime, &validation, &config).context("round two")?;
        Ok(AlOutcome {
            initial,
            round1,
            round1_config: config,
            query: spec,
            selected,
            final_regime,
            report,
            manifest,
        })
    }
}

impl Cell for AlCell {
    fn key(&self) -> String {
        format!("al_{}_x{}_{}_{}_s{}", self.dataset, fmt_x(self.budget), self.task, self.method, self.seed)
    }

    fn describe(&self) -> CellRecord {
        skeleton(
            self.key(),
            "al",
            &self.dataset,
            self.budget,
            format!("{}/{}", self.task, self.method),
            self.seed,
        )
    }

    fn run(&self, ctx: &Context) -> Result<CellRecord> {
        let out = self.run_al(ctx)?;
        let mut rec = self.describe();
        rec.initial_hash = Some(out.initial.labeled_hash());
        rec.extra.insert("selected".into(), serde_json::to_value(&out.selected)?);
        rec.report = Some(out.report);
        rec.manifest = Some(out.manifest);
        Ok(rec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSize {
    Small,
    Medium,
}

impl SplitSize {
    /// Labeled utterances in the split for a known dataset.
    pub fn size(self, dataset: &str) -> Option<usize> {
        match (dataset.to_ascii_lowercase().as_str(), self) {
            ("atis", SplitSize::Small) => Some(129),
            ("atis", SplitSize::Medium) => Some(515),
            ("snips", SplitSize::Small) => Some(327),
            ("snips", SplitSize::Medium) => Some(1308),
            _ => None,
        }
    }
}

impl FromStr for SplitSize {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(SplitSize::Small),
            "medium" => Ok(SplitSize::Medium),
            _ => bail!("unknown split {s:?} (expected small or medium)"),
        }
    }
}

/// Small/medium comparison methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmallMethod {
    /// Joint cross-entropy training.
    Baseline,
    VatJoint,
    /// VAT joint training, half the split queried by joint entropy.
    ViraalJoint,
    /// VAT joint training; intent column from an intent-entropy query,
    /// slot column from a slot-entropy query.
    ViraalIndividual,
}

impl fmt::Display for SmallMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SmallMethod::Baseline => "baseline",
            SmallMethod::VatJoint => "vat-joint",
            SmallMethod::ViraalJoint => "viraal-joint-entropy",
            SmallMethod::ViraalIndividual => "viraal-individual-entropy",
        })
    }
}

impl FromStr for SmallMethod {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => SmallMethod::Baseline,
            "vat-joint" => SmallMethod::VatJoint,
            "viraal-joint-entropy" => SmallMethod::ViraalJoint,
            "viraal-individual-entropy" => SmallMethod::ViraalIndividual,
            _ => bail!("unknown small/medium method {s:?}"),
        })
    }
}

pub const TUNED_BATCH_SIZES: [usize; 5] = [4, 8, 16, 32, 64];

#[derive(Debug, Clone, PartialEq)]
pub struct SmallMediumCell {
    pub dataset: String,
    /// Number of labeled utterances.
    pub size: usize,
    pub method: SmallMethod,
    pub batch_sizes: Vec<usize>,
    pub seed: u64,
}

struct Tuned {
    report: MetricsReport,
    manifest: RunManifest,
    batch_size: usize,
    val_score: f64,
}

impl SmallMediumCell {
    /// Fit once per batch size with per-epoch selection on the full dev
    /// split, keep the batch size with the best validation score.
    fn tuned_fit(&self, ctx: &Context, regime: &Regime, losses: Vec<LossTerm>) -> Result<Tuned> {
        let validation: Vec<usize> = (0..ctx.dataset.dev.len()).collect();
        let mut best: Option<Tuned> = None;
        for &bs in &self.batch_sizes {
            let mut config = ctx.config(losses.clone(), self.seed);
            config.batch_size_ce = bs;
            config.batch_size_vat = bs;
            config.select_on_validation = true;
            let (outcome, report, manifest) = ctx.fit_regime(regime, &validation, &config)?;
            let val_score = outcome
                .history
                .get(outcome.best_epoch - 1)
                .and_then(|h| Some(h.val_intent_accuracy? + h.val_slot_f1? / 100.0))
                .unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|b| val_score > b.val_score) {
                best = Some(Tuned {
                    report,
                    manifest,
                    batch_size: bs,
                    val_score,
                });
            }
        }
        best.ok_or_else(|| anyhow!("no batch sizes to tune over"))
    }

    fn half_and_query(&self, ctx: &Context, criterion: Criterion) -> Result<Regime> {
        let initial = corpus::sample_count(&ctx.dataset.train, self.size / 2, self.seed)?;
        let validation: Vec<usize> = (0..ctx.dataset.dev.len()).collect();
        let config = ctx.config(Variant { vat: true, task: Task::Joint }.losses(), self.seed);
        let (round1, _, _) = ctx.fit_regime(&initial, &validation, &config)?;
        let spec = QuerySpec {
            criterion,
            budget: self.size - initial.labeled.len(),
            seed: self.seed,
        };
        let selected = query(ctx, &round1, &initial.unlabeled, &spec)?;
        Ok(extend_regime(&initial, &selected))
    }
}

impl Cell for SmallMediumCell {
    fn key(&self) -> String {
        format!("small-medium_{}_n{}_{}_s{}", self.dataset, self.size, self.method, self.seed)
    }

    fn describe(&self) -> CellRecord {
        skeleton(self.key(), "small-medium", &self.dataset, self.size as f64, self.method.to_string(), self.seed)
    }

    fn run(&self, ctx: &Context) -> Result<CellRecord> {
        let joint_vat = Variant { vat: true, task: Task::Joint }.losses();
        let mut rec = self.describe();
        let tuned = match self.method {
            SmallMethod::Baseline | SmallMethod::VatJoint => {
                let regime = corpus::sample_count(&ctx.dataset.train, self.size, self.seed)?;
                let losses = if self.method == SmallMethod::Baseline {
                    Variant { vat: false, task: Task::Joint }.losses()
                } else {
                    joint_vat
                };
                self.tuned_fit(ctx, &regime, losses)?
            }
            SmallMethod::ViraalJoint => {
                let regime = self.half_and_query(ctx, Criterion::EntropyJoint)?;
                self.tuned_fit(ctx, &regime, joint_vat)?
            }
            SmallMethod::ViraalIndividual => {
                let int_regime = self.half_and_query(ctx, Criterion::EntropyInt)?;
                let slot_regime = self.half_and_query(ctx, Criterion::EntropySlot)?;
                let int_model = self.tuned_fit(ctx, &int_regime, joint_vat.clone())?;
                let slot_model = self.tuned_fit(ctx, &slot_regime, joint_vat)?;
                rec.extra.insert("slot_batch_size".into(), slot_model.batch_size.into());
                rec.extra.insert("slot_manifest".into(), serde_json::to_value(&slot_model.manifest)?);
                let mut report = int_model.report.clone();
                report.slot_f1 = slot_model.report.slot_f1;
                report.slot_precision = slot_model.report.slot_precision;
                report.slot_recall = slot_model.report.slot_recall;
                Tuned { report, ..int_model }
            }
        };
        rec.extra.insert("batch_size".into(), tuned.batch_size.into());
        rec.report = Some(tuned.report);
        rec.manifest = Some(tuned.manifest);
        Ok(rec)
    }
}
