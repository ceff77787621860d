//! Run configuration file: TOML with `[encoder]`, `[adapters]`, `[trainer]`,
//! `[data]` and `[eval]` sections. Every key is optional; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterKind;
use crate::data::GeneratorConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::pipeline::{EvalConfig, TrainerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    /// Seed of every frozen component.
    pub seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub adapted_layers: Vec<usize>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let c = EncoderConfig::default();
        Self {
            seed: 0,
            image_size: c.image_size,
            patch_size: c.patch_size,
            embed_dim: c.embed_dim,
            num_blocks: c.num_blocks,
            num_heads: c.num_heads,
            mlp_ratio: c.mlp_ratio,
            adapted_layers: c.adapted_layers,
        }
    }
}

impl EncoderSection {
    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            num_blocks: self.num_blocks,
            num_heads: self.num_heads,
            mlp_ratio: self.mlp_ratio,
            adapted_layers: self.adapted_layers.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub kind: String,
    /// Defaults to half the embedding width.
    pub bottleneck_dim: Option<usize>,
    pub seed: u64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self {
            kind: AdapterKind::AdaptFormer.as_str().into(),
            bottleneck_dim: None,
            seed: 0,
        }
    }
}

impl AdapterSection {
    pub fn kind(&self) -> Result<AdapterKind> {
        self.kind.parse()
    }

    pub fn bottleneck(&self, embed_dim: usize) -> usize {
        self.bottleneck_dim.unwrap_or(embed_dim / 2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seed: u64,
    pub folds: usize,
    pub episodes_per_class: usize,
    pub samples_per_episode: usize,
    pub distractors: bool,
    pub max_targets: usize,
    pub max_distractors: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            seed: 0,
            folds: 3,
            episodes_per_class: 10,
            samples_per_episode: 6,
            distractors: true,
            max_targets: 2,
            max_distractors: 2,
        }
    }
}

impl DataSection {
    pub fn generator(&self, resolution: usize) -> GeneratorConfig {
        GeneratorConfig {
            resolution,
            max_targets: self.max_targets,
            max_distractors: self.max_distractors,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderSection,
    pub adapters: AdapterSection,
    pub trainer: TrainerConfig,
    pub data: DataSection,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        let enc = self.encoder.config();
        enc.validate()?;
        self.adapters.kind()?;
        let b = self.adapters.bottleneck(enc.embed_dim);
        if b == 0 || b >= enc.embed_dim {
            return Err(Error::Config(format!(
                "bottleneck_dim {b} must lie in [1, {})",
                enc.embed_dim
            )));
        }
        self.trainer.validate()?;
        crate::data::make_folds(self.data.folds)?;
        if self.data.episodes_per_class == 0 || self.data.samples_per_episode < 2 {
            return Err(Error::Config(
                "episodes_per_class must be positive and samples_per_episode at least 2".into(),
            ));
        }
        if self.data.samples_per_episode < self.trainer.frames_per_clip + 1 {
            return Err(Error::Config(format!(
                "samples_per_episode {} cannot hold a clip of {} targets plus a reference",
                self.data.samples_per_episode, self.trainer.frames_per_clip
            )));
        }
        if self.eval.shots == 0 || self.eval.shots >= self.data.samples_per_episode {
            return Err(Error::Config(format!(
                "eval shots {} must lie in [1, {})",
                self.eval.shots, self.data.samples_per_episode
            )));
        }
        if self.data.max_targets == 0 {
            return Err(Error::Config("max_targets must be positive".into()));
        }
        Ok(())
    }
}
