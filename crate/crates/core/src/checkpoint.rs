//! Versioned model checkpoints: parameters, vocabulary and the run config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{VocabHashes, Vocabulary};
use crate::model::{ModelDims, ModelParams, NluModel};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub dims: ModelDims,
    pub vocab_hashes: VocabHashes,
    pub vocab: Vocabulary,
    pub config: RunConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(model: &NluModel, params: ModelParams, vocab: &Vocabulary, config: &RunConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            dims: model.dims().clone(),
            vocab_hashes: vocab.hashes(),
            vocab: vocab.clone(),
            config: config.clone(),
            params,
        }
    }

    /// Write atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let text = serde_json::to_vec(self)?;
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut ck: Checkpoint = serde_json::from_slice(&text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        ck.vocab.reindex();
        if ck.vocab.hashes() != ck.vocab_hashes {
            return Err(Error::Checkpoint("vocabulary does not match its recorded hashes".into()));
        }
        ck.model().check_params(&ck.params)?;
        Ok(ck)
    }

    pub fn model(&self) -> NluModel {
        NluModel::new(self.dims.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    #[test]
    fn round_trip_preserves_everything() {
        let data = synthetic::examples(20, 0);
        let vocab = Vocabulary::build(&data).unwrap();
        let config = RunConfig {
            embedding_size: 4,
            hidden_size: 3,
            slot_embedding_size: 2,
            attention_size: 2,
            ..RunConfig::default()
        };
        let model = NluModel::new(ModelDims::new(&vocab, &config));
        let params = model.init_params(None, 1).unwrap();
        let ck = Checkpoint::new(&model, params, &vocab, &config);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.vocab.word_id("flight"), vocab.word_id("flight"));
        assert_eq!(back.config, config);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let data = synthetic::examples(5, 0);
        let vocab = Vocabulary::build(&data).unwrap();
        let config = RunConfig {
            embedding_size: 2,
            hidden_size: 2,
            slot_embedding_size: 2,
            attention_size: 2,
            ..RunConfig::default()
        };
        let model = NluModel::new(ModelDims::new(&vocab, &config));
        let mut ck = Checkpoint::new(&model, model.init_params(None, 0).unwrap(), &vocab, &config);
        ck.format_version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(&path, serde_json::to_vec(&ck).unwrap()).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }
}
