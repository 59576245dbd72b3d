//! The TOML run configuration.

use anyhow::{anyhow, bail, Context, Result};
use jam_core::data::Vocabulary;
use jam_core::model::{NormPlacement, TransformerConfig};
use jam_core::retrieval::{RetrievalConfig, SkipDirection, DEFAULT_EMBED_DIM};
use jam_core::sampler::SamplerConfig;
use jam_core::trainer::ablation::AblationConfig;
use jam_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub norm: NormPlacement,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TransformerConfig::toy(0);
        Self {
            n_layers: t.n_layers,
            d_model: t.d_model,
            n_heads: t.n_heads,
            d_ff: t.d_ff,
            max_seq_len: t.max_seq_len,
            norm: t.norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSection {
    pub k: usize,
    pub skip_threshold: f64,
    pub skip_direction: SkipDirection,
    pub query_dropout: f64,
    pub encoder_dim: usize,
    pub encoder_seed: u64,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        let r = RetrievalConfig::default();
        Self {
            k: r.k,
            skip_threshold: r.skip_threshold,
            skip_direction: r.skip_direction,
            query_dropout: r.query_dropout,
            encoder_dim: DEFAULT_EMBED_DIM,
            encoder_seed: 0,
        }
    }
}

impl RetrievalSection {
    pub fn config(&self) -> RetrievalConfig {
        RetrievalConfig {
            k: self.k,
            skip_threshold: self.skip_threshold,
            skip_direction: self.skip_direction,
            query_dropout: self.query_dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub world_seed: u64,
    pub image_noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            world_seed: 0,
            image_noise: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Seed for fresh model initialization.
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub vocab: Vocabulary,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub retrieval: RetrievalSection,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub data: DataSection,
    /// Whether `train.mixture_weights` was given explicitly.
    #[serde(skip)]
    pub explicit_mixture: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            init_seed: 0,
            vocab: Vocabulary::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            retrieval: RetrievalSection::default(),
            ablation: AblationConfig::default(),
            data: DataSection::default(),
            explicit_mixture: false,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        match table.get("schema_version") {
            None => bail!("config is missing schema_version (expected {SCHEMA_VERSION})"),
            Some(toml::Value::Integer(v)) if *v == SCHEMA_VERSION as i64 => {}
            Some(v) => bail!("unsupported schema_version {v} (expected {SCHEMA_VERSION})"),
        }
        let explicit_mixture = table
            .get("train")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("mixture_weights"));
        let mut cfg: RunConfig = table.try_into().map_err(|e| anyhow!("invalid config: {e}"))?;
        cfg.explicit_mixture = explicit_mixture;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        self.model_config().validate()?;
        self.sampler.validate()?;
        self.retrieval.config().validate()?;
        let mut ablation = self.ablation.clone();
        ablation.vocab = self.vocab;
        ablation.model = self.model_config();
        ablation.validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> TransformerConfig {
        let m = &self.model;
        TransformerConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            vocab_size: self.vocab.size(),
            max_seq_len: m.max_seq_len,
            norm: m.norm,
            ..TransformerConfig::toy(self.vocab.size())
        }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            vocab: self.vocab,
            model: self.model_config(),
            ..self.ablation.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::parse("schema_version = 1\n").unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(!c.explicit_mixture);
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::parse(
            "schema_version = 1\n[model]\nn_layers = 2\n[train]\nlr = 0.5\nmixture_weights = { caption_pairs = 1.0 }\n",
        )
        .unwrap();
        assert_eq!(c.model_config().n_layers, 2);
        assert_eq!(c.model_config().vocab_size, 103);
        assert_eq!(c.train.lr, 0.5);
        assert!(c.explicit_mixture);
    }

    #[test]
    fn bad_configs_are_rejected() {
        for text in [
            "",
            "schema_version = 2\n",
            "schema_version = 1\nunknown = 3\n",
            "schema_version = 1\n[train]\nlearning_rate = 0.1\n",
            "schema_version = 1\n[model]\nd_model = 15\n",
            "schema_version = 1\n[ablation]\nvariants = [\"deep\"]\n",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text:?}");
        }
    }

    #[test]
    fn shipped_configs_parse() {
        let toy = RunConfig::parse(include_str!("../../../configs/toy.toml")).unwrap();
        assert_eq!(toy, RunConfig { explicit_mixture: true, ..RunConfig::default() });
        let reference = RunConfig::parse(include_str!("../../../configs/reference.toml")).unwrap();
        assert_eq!(reference.vocab.size(), 58_464);
        assert_eq!(reference.model_config().d_model, 4096);
    }
}
