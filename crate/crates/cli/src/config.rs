//! Run configuration: a TOML file whose fields are mirrored by CLI
//! flags, with flags taking precedence.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use demsal::matching::{EmbeddingProvider, HashedTrigramEmbedder, RemoteEmbeddingClient};
use demsal::scoring::{HpDenominatorMode, ScoreOptions};
use demsal::stats::EffectSizeMethod;

/// Which embedding backend similarity scoring uses. The remote variant
/// reads its bearer token from the `EMBED_API_KEY` environment variable.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingProviderConfig {
    #[default]
    Builtin,
    Remote {
        endpoint: String,
        model: String,
    },
}

/// All knobs of a run. Every field has a default, so an empty TOML file
/// (or none at all) is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus_path: PathBuf,
    pub output_dir: PathBuf,
    pub match_threshold: f64,
    pub hallucination_threshold: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub t_max: usize,
    pub hp_mode: HpDenominatorMode,
    pub embedding_provider: EmbeddingProviderConfig,
    pub effect_method: EffectSizeMethod,
}

impl Default for RunConfig {
    fn default() -> Self {
        let defaults = ScoreOptions::default();
        RunConfig {
            corpus_path: PathBuf::from("corpus.jsonl"),
            output_dir: PathBuf::from("reports"),
            match_threshold: defaults.match_threshold,
            hallucination_threshold: defaults.hallucination_threshold,
            alpha: defaults.alpha,
            gamma: defaults.gamma,
            t_max: defaults.t_max,
            hp_mode: defaults.hp_mode,
            embedding_provider: EmbeddingProviderConfig::Builtin,
            effect_method: EffectSizeMethod::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&raw).with_context(|| format!("invalid config {}", path.display()))
    }

    /// The scoring knobs in the shape the library takes.
    pub fn score_options(&self) -> ScoreOptions {
        ScoreOptions {
            match_threshold: self.match_threshold,
            hallucination_threshold: self.hallucination_threshold,
            alpha: self.alpha,
            gamma: self.gamma,
            t_max: self.t_max,
            hp_mode: self.hp_mode,
        }
    }

    /// Rejects numeric knobs outside their operation preconditions.
    pub fn validate(&self) -> Result<()> {
        self.score_options().validate()?;
        Ok(())
    }

    pub fn provider(&self) -> Box<dyn EmbeddingProvider> {
        match &self.embedding_provider {
            EmbeddingProviderConfig::Builtin => Box::new(HashedTrigramEmbedder),
            EmbeddingProviderConfig::Remote { endpoint, model } => {
                Box::new(RemoteEmbeddingClient::new(endpoint.clone(), model.clone()))
            }
        }
    }
}
