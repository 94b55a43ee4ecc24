//! Single-file run configuration (TOML). Every field has a default and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CorpusConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, PathContext, Result};
use crate::mfd_decoder::DecoderConfig;
use crate::model::ModelConfig;
use crate::train::{Stage, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    /// Seed for parameter initialization.
    pub init_seed: u64,
    pub visual_frozen: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            init_seed: 7,
            visual_frozen: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Corpus directory written by `gen-data`.
    pub data_dir: Option<PathBuf>,
    /// Stage-1 checkpoint consumed by stage 2.
    pub stage1_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    /// `vocab_size` is derived from the corpus and may be left at 0.
    pub decoder: DecoderConfig,
    pub model: ModelOptions,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            model: ModelOptions::default(),
            stage1: TrainConfig::default(),
            stage2: TrainConfig {
                stage: Stage::Fusion,
                freeze_encoder: true,
                ..TrainConfig::default()
            },
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text` laid over the defaults, so a partial section keeps the
    /// defaults of its own section (stage 2 stays a frozen-encoder fusion
    /// stage unless overridden).
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg_err = |e: &dyn std::fmt::Display| Error::Config(e.to_string().trim().replace('\n', " "));
        let user: toml::Table = toml::from_str(text).map_err(|e| cfg_err(&e))?;
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| cfg_err(&e))?;
        merge(&mut base, user);
        let cfg: Self = toml::Value::Table(base).try_into().map_err(|e| cfg_err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model_config()?;
        self.stage1.validate()?;
        self.stage2.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut enc = self.encoder.clone();
        enc.d_in = self.corpus.d_in;
        ModelConfig::new(self.corpus.vocab_size, enc, self.decoder.clone(), self.model.visual_frozen)
    }

    pub fn stage(&self, n: u8) -> Result<&TrainConfig> {
        match n {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            _ => Err(Error::Config(format!("stage must be 1 or 2, got {n}"))),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::from_toml("[corpus]\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("extra = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn partial_stage2_keeps_stage2_defaults() {
        let cfg = RunConfig::from_toml("[stage2]\nmax_steps = 3\n").unwrap();
        assert_eq!(cfg.stage2.stage, Stage::Fusion);
        assert!(cfg.stage2.freeze_encoder);
        assert_eq!(cfg.stage2.max_steps, 3);
    }

    #[test]
    fn encoder_input_width_follows_corpus() {
        let cfg = RunConfig::from_toml("[corpus]\nd_in = 8\n").unwrap();
        assert_eq!(cfg.model_config().unwrap().encoder.d_in, 8);
    }
}
