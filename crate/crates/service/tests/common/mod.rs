#![allow(dead_code)]

use std::path::Path;
use std::sync::OnceLock;

use viraal_core::checkpoint::Checkpoint;
use viraal_core::config::{LossTerm, RunConfig};
use viraal_core::corpus::{self, Example};
use viraal_core::synthetic;
use viraal_service::service::{train_checkpoint, LabelRequest};
use viraal_service::{Service, ServiceConfig};

pub const TRAIN: usize = 60;
pub const LABELED_PERCENT: f64 = 20.0;

pub fn small_config(vat: bool) -> RunConfig {
    RunConfig {
        embedding_size: 8,
        hidden_size: 8,
        slot_embedding_size: 4,
        attention_size: 8,
        epochs_ce: 2,
        epochs_vat: 2,
        batch_size_ce: 16,
        batch_size_vat: 16,
        learning_rate: 1e-2,
        losses: if vat {
            vec![LossTerm::CeInt, LossTerm::CeSlot, LossTerm::VatJoint]
        } else {
            vec![LossTerm::CeInt, LossTerm::CeSlot]
        },
        ..RunConfig::default()
    }
}

pub struct Fixture {
    /// Train split with gold labels, used by the simulated annotator.
    pub gold: Vec<Example>,
    /// Train split with the pool's labels removed.
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub checkpoint: Checkpoint,
}

fn build(vat: bool) -> Fixture {
    let ds = synthetic::dataset(TRAIN, 20, 10, 11);
    let regime = corpus::sample_regime(&ds.train, LABELED_PERCENT, 3).unwrap();
    let labeled = viraal_core::active::as_set(&regime.labeled);
    let train: Vec<Example> = ds
        .train
        .iter()
        .map(|e| if labeled.contains(&e.id()) { e.clone() } else { e.unlabeled() })
        .collect();
    let (checkpoint, _) = train_checkpoint(&train, &ds.dev, &small_config(vat), None).unwrap();
    Fixture {
        gold: ds.train,
        train,
        dev: ds.dev,
        checkpoint,
    }
}

/// Trained once per test binary.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| build(false))
}

pub fn vat_fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| build(true))
}

pub fn service_with(dir: &Path, f: &Fixture, lease_ms: u64, checkpoint: Checkpoint) -> Service {
    let mut config = ServiceConfig::new(dir);
    config.lease_ms = lease_ms;
    config.snapshot_every = 7;
    Service::init(config, f.train.clone(), f.dev.clone(), checkpoint).unwrap()
}

pub fn service(dir: &Path) -> Service {
    let f = fixture();
    service_with(dir, f, 1_000, f.checkpoint.clone())
}

/// The simulated annotator: gold labels, confirming tags the initial
/// labeled set happened not to contain.
pub fn gold_label(f: &Fixture, id: usize) -> LabelRequest {
    let a = f.gold[id].annotation.clone().unwrap();
    LabelRequest {
        intent: a.intent,
        slots: a.slots,
        allow_new_tags: true,
    }
}
