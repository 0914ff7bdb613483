//! Run configuration: one TOML file describing every pipeline stage, with
//! strict key checking so typos fail loudly. Each run writes a resolved copy
//! of the configuration it actually used next to its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::PositionScheme;
use crate::data::{SampleMode, SyntheticConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PoolingMode, TrainConfig, Variant};
use crate::pool::SimilarityMeasure;

pub const OUT_ROOT_ENV: &str = "SUIN_OUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Output directory; omitted means root/run-seed<seed> where root comes
    /// from the SUIN_OUT_ROOT environment variable or ./runs.
    pub out_dir: Option<PathBuf>,
    /// Worker threads for embarrassingly parallel stages; results are
    /// identical at any value.
    pub threads: usize,
    pub synthetic: SyntheticSection,
    pub split: SplitSection,
    pub samples: SamplesSection,
    pub encoder: EncoderSection,
    pub retrieval: RetrievalSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: None,
            threads: 1,
            synthetic: SyntheticSection::default(),
            split: SplitSection::default(),
            samples: SamplesSection::default(),
            encoder: EncoderSection::default(),
            retrieval: RetrievalSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub users: u64,
    pub items: u64,
    pub clusters: u64,
    pub latent_dim: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub length_exponent: f64,
    pub temperature: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let c = SyntheticConfig::default();
        SyntheticSection {
            users: c.users,
            items: c.items,
            clusters: c.clusters,
            latent_dim: c.latent_dim,
            len_min: c.len_min,
            len_max: c.len_max,
            length_exponent: c.length_exponent,
            temperature: c.temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { train: 0.8, val: 0.1, test: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplesSection {
    pub mode: SampleMode,
    pub negatives_per_positive: usize,
}

impl Default for SamplesSection {
    fn default() -> Self {
        SamplesSection {
            mode: SampleMode::LastItem,
            negatives_per_positive: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub d_prime: usize,
    pub max_len: usize,
    pub blocks: usize,
    pub heads: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let c = EncoderConfig::default();
        EncoderSection {
            d_prime: c.d_prime,
            max_len: c.max_len,
            blocks: c.blocks,
            heads: c.heads,
            epochs: c.epochs,
            lr: c.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSection {
    pub measure: SimilarityMeasure,
    /// Neighbors written per user; must cover the largest K any downstream
    /// run will ask for.
    pub k_retrieve: usize,
    pub threshold: Option<f64>,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection {
            measure: SimilarityMeasure::Cosine,
            k_retrieve: 10,
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub d_item: usize,
    /// Slot width of the augmented sequence.
    pub l: usize,
    /// Neighbor slots.
    pub k: usize,
    pub variant: Variant,
    pub pooling: Option<PoolingMode>,
    pub position_scheme: PositionScheme,
    pub mlp_hidden: Vec<usize>,
    pub adapter_hidden: usize,
    pub dropout: f64,
    pub swap_pooling_projections: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 16,
            d_item: 16,
            l: 20,
            k: 2,
            variant: Variant::Full,
            pooling: None,
            position_scheme: PositionScheme::Utpe,
            mlp_hidden: vec![200, 80],
            adapter_hidden: 32,
            dropout: 0.0,
            swap_pooling_projections: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::default();
        TrainSection {
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            patience: c.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// Seeds per setting for mean and standard deviation.
    pub seeds: usize,
    /// Largest K in the top-K sweep (0..=topk_max).
    pub topk_max: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection { seeds: 5, topk_max: 6 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("config serialization: {e}")))
    }

    /// Write the resolved configuration next to a run's outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("config.resolved.toml");
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let s = &self.split;
        if (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {}+{}+{} do not sum to 1",
                s.train, s.val, s.test
            )));
        }
        if self.samples.negatives_per_positive == 0 {
            return Err(Error::Config("need at least one negative per positive".into()));
        }
        self.synthetic_config().validate()?;
        self.encoder_config(0).validate()?;
        if self.retrieval.k_retrieve < self.model.k {
            return Err(Error::Config(format!(
                "retrieval writes {} neighbors but the model wants K={}",
                self.retrieval.k_retrieve, self.model.k
            )));
        }
        if self.retrieval.k_retrieve < self.ablate.topk_max {
            return Err(Error::Config(format!(
                "retrieval writes {} neighbors but the top-K sweep goes to {}",
                self.retrieval.k_retrieve, self.ablate.topk_max
            )));
        }
        if self.ablate.seeds == 0 {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        // Full model validation needs the item count; check with a stand-in.
        self.model_config(u64::MAX, 0).validate()?;
        Ok(())
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        let s = &self.synthetic;
        SyntheticConfig {
            users: s.users,
            items: s.items,
            clusters: s.clusters,
            latent_dim: s.latent_dim,
            len_min: s.len_min,
            len_max: s.len_max,
            length_exponent: s.length_exponent,
            temperature: s.temperature,
            seed: self.seed,
        }
    }

    pub fn encoder_config(&self, seed: u64) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            d_prime: e.d_prime,
            max_len: e.max_len,
            blocks: e.blocks,
            heads: e.heads,
            epochs: e.epochs,
            lr: e.lr,
            seed,
        }
    }

    pub fn model_config(&self, v_items: u64, seed: u64) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            v_items,
            d: m.d,
            d_item: m.d_item,
            d_prime: self.encoder.d_prime,
            l: m.l,
            k: m.k,
            variant: m.variant,
            pooling: m.pooling,
            position_scheme: m.position_scheme,
            mlp_hidden: m.mlp_hidden.clone(),
            adapter_hidden: m.adapter_hidden,
            dropout: m.dropout,
            swap_pooling_projections: m.swap_pooling_projections,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            patience: t.patience,
            seed,
        }
    }
}

/// Output directory precedence: explicit flag, then the config file, then
/// `$SUIN_OUT_ROOT/run-seed<seed>`, then `./runs/run-seed<seed>`.
pub fn resolve_out_dir(cli: Option<&Path>, config: &RunConfig) -> PathBuf {
    resolve_out_dir_from(cli, config, std::env::var(OUT_ROOT_ENV).ok().as_deref())
}

fn resolve_out_dir_from(
    cli: Option<&Path>,
    config: &RunConfig,
    env_root: Option<&str>,
) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Some(p) = &config.out_dir {
        return p.clone();
    }
    let root = env_root.map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(format!("run-seed{}", config.seed))
}
