//! Run configuration: one TOML document with a section per subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use simreuse_core::dataflow::{Dataflow, PEArrayConfig};
use simreuse_core::mcache::MCacheConfig;
use simreuse_core::rpq::UniquenessParams;
use simreuse_core::tensor::ConvLayerSpec;
use simreuse_core::trainer::{ModelSpec, SyntheticConfig, TrainOptions};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub rpq: RpqSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub train: TrainSection,
}

fn default_seed() -> u64 {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: default_seed(),
            rpq: RpqSection::default(),
            simulate: SimulateSection::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpqSection {
    pub trials: usize,
    pub params: UniquenessParams,
}

impl Default for RpqSection {
    fn default() -> Self {
        Self { trials: 100, params: UniquenessParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub layers: Vec<ConvLayerSpec>,
    /// Fraction of each channel's windows that repeat an earlier window.
    pub duplicate_fractions: Vec<f64>,
    pub bits: usize,
    pub dataflow: Dataflow,
    pub asynchronous: bool,
    pub reuse: bool,
    pub pe: PEArrayConfig,
    /// Cache organisations to sweep; the default 1024-entry 16-way cache is
    /// always included.
    pub caches: Vec<MCacheConfig>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let layer = ConvLayerSpec {
            in_channels: 4,
            out_channels: 128,
            stride: 3,
            ..ConvLayerSpec::simple((96, 96), (3, 3))
        };
        let cache = |total_entries, ways| MCacheConfig { total_entries, ways, ..Default::default() };
        Self {
            layers: vec![layer],
            duplicate_fractions: vec![0.0, 0.25, 0.5, 0.75],
            bits: 20,
            dataflow: Dataflow::Rs,
            asynchronous: false,
            reuse: true,
            pe: PEArrayConfig::default(),
            caches: vec![cache(256, 4), cache(512, 8), cache(1024, 16), cache(2048, 16)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// MRCY dataset; the synthetic generator is used when absent.
    pub data: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    /// Leading samples used for training, the rest for validation.
    pub train_count: usize,
    /// Filters of the default two-layer CNN.
    pub filters: usize,
    /// Full model; replaces the default CNN.
    pub model: Option<ModelSpec>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f32>,
    pub batch_size: Option<usize>,
    pub options: TrainOptions,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            data: None,
            synthetic: SyntheticConfig::default(),
            train_count: 500,
            filters: 16,
            model: None,
            epochs: None,
            learning_rate: None,
            batch_size: None,
            options: TrainOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!("schema_version {} is not supported (expected {})", self.schema_version, SCHEMA_VERSION);
        }
        if self.rpq.trials == 0 {
            bail!("rpq.trials must be positive");
        }
        let sim = &self.simulate;
        sim.pe.validate()?;
        for l in &sim.layers {
            l.validate()?;
        }
        for c in &sim.caches {
            c.validate()?;
        }
        if sim.bits == 0 {
            bail!("simulate.bits must be positive");
        }
        if let Some(d) = sim.duplicate_fractions.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            bail!("duplicate fraction {} is outside [0, 1]", d);
        }
        let tr = &self.train;
        if let Some(m) = &tr.model {
            m.validate()?;
        }
        tr.options.adapt.validate()?;
        tr.options.pe.validate()?;
        tr.options.cache.validate()?;
        if tr.filters == 0 {
            bail!("train.filters must be positive");
        }
        Ok(())
    }

    /// The resolved document, as embedded in every output file.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
