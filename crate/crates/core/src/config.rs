//! Run configuration and its default hyper-parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossTerm {
    CeInt,
    CeSlot,
    VatInt,
    VatSlot,
    VatJoint,
}

impl LossTerm {
    pub fn is_vat(self) -> bool {
        matches!(self, LossTerm::VatInt | LossTerm::VatSlot | LossTerm::VatJoint)
    }
}

/// Which output heads a divergence or perturbation is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heads {
    Int,
    Slot,
    Joint,
}

/// How the joint perturbation is composed from the two heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JointNormMode {
    /// One gradient of `½(D_int + D_slot)`, normalised once.
    RawGrad,
    /// Normalise each head's perturbation to ε, average, renormalise to ε.
    NormalizeThenAverage,
}

/// Direction of the finalised perturbation relative to the divergence gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationSign {
    /// `+ε g/‖g‖`: ascent on the divergence.
    Ascent,
    /// `−ε g/‖g‖`, the sign as literally printed in the VAT approximation.
    Descent,
}

impl PerturbationSign {
    pub fn factor(self) -> f64 {
        match self {
            PerturbationSign::Ascent => 1.0,
            PerturbationSign::Descent => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VatConfig {
    pub epsilon: f64,
    pub xi: f64,
    pub normalize_embeddings: bool,
    pub joint_norm_mode: JointNormMode,
    pub sign: PerturbationSign,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self {
            epsilon: 5.0,
            xi: 1e-2,
            normalize_embeddings: true,
            joint_norm_mode: JointNormMode::RawGrad,
            sign: PerturbationSign::Ascent,
        }
    }
}

impl VatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::Config(format!("xi must be > 0, got {}", self.xi)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub layers: usize,
    pub slot_embedding_size: usize,
    pub attention_size: usize,
    pub classifier_dropout: f64,
    pub embedding_dropout: f64,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub epochs_ce: usize,
    pub epochs_vat: usize,
    pub batch_size_ce: usize,
    pub batch_size_vat: usize,
    pub losses: Vec<LossTerm>,
    pub vat: VatConfig,
    /// Keep the epoch with the best validation score instead of the last one.
    pub select_on_validation: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            embedding_size: 300,
            hidden_size: 128,
            layers: 1,
            slot_embedding_size: 128,
            attention_size: 128,
            classifier_dropout: 0.5,
            embedding_dropout: 0.5,
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            epochs_ce: 100,
            epochs_vat: 60,
            batch_size_ce: 16,
            batch_size_vat: 64,
            losses: vec![LossTerm::CeInt, LossTerm::CeSlot],
            vat: VatConfig::default(),
            select_on_validation: true,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Defaults with the dataset-specific batch size: SNIPS uses 64 everywhere.
    pub fn for_dataset(name: &str) -> Self {
        let mut cfg = Self::default();
        if name.eq_ignore_ascii_case("snips") {
            cfg.batch_size_ce = 64;
        }
        cfg
    }

    pub fn vat_heads(&self) -> Option<Heads> {
        self.losses.iter().find_map(|l| match l {
            LossTerm::VatInt => Some(Heads::Int),
            LossTerm::VatSlot => Some(Heads::Slot),
            LossTerm::VatJoint => Some(Heads::Joint),
            _ => None,
        })
    }

    pub fn uses_vat(&self) -> bool {
        self.vat_heads().is_some()
    }

    pub fn has(&self, term: LossTerm) -> bool {
        self.losses.contains(&term)
    }

    pub fn epochs(&self) -> usize {
        if self.uses_vat() {
            self.epochs_vat
        } else {
            self.epochs_ce
        }
    }

    pub fn batch_size(&self) -> usize {
        if self.uses_vat() {
            self.batch_size_vat
        } else {
            self.batch_size_ce
        }
    }

    pub fn effective_embedding_dropout(&self) -> f64 {
        if self.uses_vat() {
            0.0
        } else {
            self.embedding_dropout
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty() {
            return Err(Error::Config("no loss terms enabled".into()));
        }
        if self.losses.iter().filter(|l| l.is_vat()).count() > 1 {
            return Err(Error::Config("at most one VAT term may be enabled".into()));
        }
        if self.layers != 1 {
            return Err(Error::Config(format!("only single-layer encoders are supported, got {}", self.layers)));
        }
        for (name, p) in [
            ("classifier_dropout", self.classifier_dropout),
            ("embedding_dropout", self.embedding_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if self.batch_size() == 0 || self.epochs() == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.vat.validate()
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Dataset defaults overlaid with a TOML document.
    ///
    /// Fields the document leaves out keep the dataset's defaults, so
    /// `batch_size_ce` stays at 64 for SNIPS unless the file says otherwise.
    pub fn from_toml(dataset: &str, text: &str) -> Result<Self> {
        let mut base = toml::Table::try_from(Self::for_dataset(dataset)).map_err(|e| Error::Config(e.to_string()))?;
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, overlay);
        let config: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// [`RunConfig::from_toml`] on a file, or the dataset defaults without one.
    pub fn load(dataset: &str, path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(dataset, &text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
            None => Ok(Self::for_dataset(dataset)),
        }
    }
}
