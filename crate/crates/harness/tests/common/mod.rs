#![allow(dead_code)]

use viraal_core::config::RunConfig;
use viraal_core::synthetic;
use viraal_harness::experiment::Context;

/// Small model and few epochs so a full two-round run takes well under a second.
pub fn small_config() -> RunConfig {
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
        ..RunConfig::for_dataset("syn")
    }
}

pub fn small_context(train: usize, seed: u64) -> Context {
    let ds = synthetic::dataset(train, 30, 30, seed);
    Context::new(ds, small_config(), None).expect("context")
}
