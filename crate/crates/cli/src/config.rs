//! Declarative run configuration. Every section is optional in the TOML
//! file; command-line flags override whatever the file sets.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use iclvc_core::flow::FlowConfig;
use iclvc_core::model::Variant;
use iclvc_core::pipeline::{ConvertOptions, ModelShape};
use iclvc_core::prosody::{
    PrecomputedProvider, ProsodyProvider, ToyEmotionEncoder, TOY_EMBED_DIM, TOY_ENCODER_SEED,
};
use iclvc_core::synthdata::CorpusSpec;
use iclvc_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Artifacts land here unless a path is given explicitly.
pub const DEFAULT_CACHE_DIR: &str = "iclvc-cache";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub cache_dir: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub tokenizer: TokenizerConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub flow: FlowConfig,
    pub prosody: ProsodyConfig,
    pub convert: ConvertConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub stream: String,
    pub k: usize,
    pub embed_dim: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            stream: "ssl_a".into(),
            k: 32,
            embed_dim: 16,
            max_iters: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub seed: u64,
    pub width: usize,
    pub time_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub prosody_token_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let s = ModelShape::default();
        Self {
            variant: Variant::Icl,
            seed: 0,
            width: s.width,
            time_dim: s.time_dim,
            layers: s.layers,
            heads: s.heads,
            ffn_dim: s.ffn_dim,
            prosody_token_dim: s.prosody_token_dim,
        }
    }
}

impl ModelSection {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            width: self.width,
            time_dim: self.time_dim,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            prosody_token_dim: self.prosody_token_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Toy,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProsodyConfig {
    pub provider: ProviderKind,
    pub dim: usize,
    pub seed: u64,
    /// Directory of embedding files for the precomputed provider.
    pub dir: Option<PathBuf>,
}

impl Default for ProsodyConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Toy,
            dim: TOY_EMBED_DIM,
            seed: TOY_ENCODER_SEED,
            dir: None,
        }
    }
}

impl ProsodyConfig {
    pub fn build(&self) -> anyhow::Result<Box<dyn ProsodyProvider>> {
        Ok(match self.provider {
            ProviderKind::Toy => Box::new(ToyEmotionEncoder::new(self.dim, self.seed)),
            ProviderKind::Precomputed => {
                let Some(dir) = &self.dir else {
                    bail!("the precomputed prosody provider needs prosody.dir");
                };
                Box::new(PrecomputedProvider::new(dir, self.dim))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvertConfig {
    pub seed: u64,
    /// Pairs integrated together in one batched ODE solve.
    pub batch: usize,
    /// Pairs drawn when no pairs file is given.
    pub num_pairs: usize,
    /// Seconds of reference audio in the prompt; 0 keeps the whole reference.
    pub prompt_seconds: f64,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        let o = ConvertOptions::default();
        Self {
            seed: o.seed,
            batch: o.batch,
            num_pairs: 100,
            prompt_seconds: o.prompt_seconds.unwrap_or(0.0),
        }
    }
}

impl ConvertConfig {
    pub fn options(&self) -> ConvertOptions {
        ConvertOptions {
            seed: self.seed,
            batch: self.batch,
            prompt_seconds: (self.prompt_seconds > 0.0).then_some(self.prompt_seconds),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Validates the numeric sections together.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.corpus.validate()?;
        self.flow.validate()?;
        if self.tokenizer.k == 0 || self.tokenizer.embed_dim == 0 {
            bail!("tokenizer.k and tokenizer.embed_dim must be positive");
        }
        if !(self.convert.prompt_seconds >= 0.0) {
            bail!("convert.prompt_seconds must be non-negative");
        }
        if self.train.batch_size == 0 || self.convert.batch == 0 {
            bail!("batch sizes must be positive");
        }
        Ok(())
    }
}
