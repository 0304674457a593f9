//! TOML experiment configuration.
//!
//! Every field has a default, so an empty file describes the default
//! synthetic experiment: 3 exits, bit-widths {4, 8}, 10,000 samples over
//! 10 classes.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use quee_core::dataset::SyntheticConfig;
use quee_core::harness::{default_lambdas, default_thresholds, PipelineConfig, DEFAULT_BOOTSTRAP_SPLITS, DEFAULT_FIT_FRACTION};
use quee_core::path_space::NetworkTopology;
use quee_core::predictor::{RowSampling, TrainConfig};
use quee_core::router::FirstGate;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    pub num_exits: usize,
    /// Per-block FLOPS; uniform 1.0 per block when omitted.
    pub block_flops: Option<Vec<f64>>,
    pub bit_widths: Vec<u32>,
    pub path_cap: usize,
    /// Path-sampling seed; falls back to the experiment seed.
    pub seed: Option<u64>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            num_exits: 3,
            block_flops: None,
            bit_widths: vec![4, 8],
            path_cap: 50,
            seed: None,
        }
    }
}

impl TopologyConfig {
    pub fn build(&self) -> Result<NetworkTopology> {
        let flops = self
            .block_flops
            .clone()
            .unwrap_or_else(|| vec![1.0; self.num_exits]);
        if flops.len() != self.num_exits {
            bail!(
                "num_exits is {} but block_flops has {} entries",
                self.num_exits,
                flops.len()
            );
        }
        Ok(NetworkTopology::new(flops, self.bit_widths.clone())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing topology file {}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Record file to load; the synthetic generator is used when absent.
    pub records: Option<PathBuf>,
    pub num_classes: usize,
    pub num_samples: usize,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub alpha: f64,
    pub beta: f64,
    pub skill_offset: f64,
    pub difficulty_scale: f64,
    pub jitter: f64,
    pub sharpness_eps: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            records: None,
            num_classes: s.num_classes,
            num_samples: s.num_samples,
            train_fraction: s.train_fraction,
            validation_fraction: s.validation_fraction,
            test_fraction: s.test_fraction,
            alpha: s.alpha,
            beta: s.beta,
            skill_offset: s.skill_offset,
            difficulty_scale: s.difficulty_scale,
            jitter: s.jitter,
            sharpness_eps: s.sharpness_eps,
        }
    }
}

impl DataConfig {
    pub fn synthetic(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            num_classes: self.num_classes,
            num_samples: self.num_samples,
            train_fraction: self.train_fraction,
            validation_fraction: self.validation_fraction,
            test_fraction: self.test_fraction,
            seed,
            alpha: self.alpha,
            beta: self.beta,
            skill_offset: self.skill_offset,
            difficulty_scale: self.difficulty_scale,
            jitter: self.jitter,
            sharpness_eps: self.sharpness_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub k: usize,
    pub fit_fraction: f64,
    pub prefixes: usize,
    pub candidates: usize,
    pub hidden_dim: usize,
    pub embedding_dim: Option<usize>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = RowSampling::default();
        Self {
            k: 40,
            fit_fraction: DEFAULT_FIT_FRACTION,
            prefixes: s.prefixes,
            candidates: s.candidates,
            hidden_dim: t.hidden_dim,
            embedding_dim: t.embedding_dim,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
        }
    }
}

/// `"highest"` or a bit-width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FirstGateConfig {
    Named(FirstGateName),
    Bits(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstGateName {
    Highest,
}

impl From<FirstGateConfig> for FirstGate {
    fn from(c: FirstGateConfig) -> Self {
        match c {
            FirstGateConfig::Named(FirstGateName::Highest) => FirstGate::Highest,
            FirstGateConfig::Bits(b) => FirstGate::Fixed(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub first_gate: FirstGateConfig,
    pub bootstrap_splits: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: default_lambdas(),
            thresholds: default_thresholds(),
            first_gate: FirstGateConfig::Named(FirstGateName::Highest),
            bootstrap_splits: DEFAULT_BOOTSTRAP_SPLITS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudiesConfig {
    pub ece_ks: Vec<usize>,
    pub ece_curves: bool,
    pub noise_levels: Vec<f64>,
}

impl Default for StudiesConfig {
    fn default() -> Self {
        Self {
            ece_ks: vec![1, 5, 20, 50],
            ece_curves: false,
            noise_levels: vec![0.0, 0.1, 0.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub topology: TopologyConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub sweep: SweepConfig,
    pub studies: StudiesConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // relative record paths are resolved against the config's directory
        if let (Some(rec), Some(dir)) = (cfg.data.records.as_mut(), path.parent()) {
            if rec.is_relative() {
                *rec = dir.join(&*rec);
            }
        }
        Ok(cfg)
    }

    pub fn path_seed(&self) -> u64 {
        self.topology.seed.unwrap_or(self.seed)
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let m = &self.model;
        let cfg = PipelineConfig {
            topology: self.topology.build()?,
            path_cap: self.topology.path_cap,
            seed: self.seed,
            k: m.k,
            fit_fraction: m.fit_fraction,
            sampling: RowSampling {
                prefixes: m.prefixes,
                candidates: m.candidates,
            },
            train: TrainConfig {
                hidden_dim: m.hidden_dim,
                embedding_dim: m.embedding_dim,
                learning_rate: m.learning_rate,
                weight_decay: m.weight_decay,
                batch_size: m.batch_size,
                max_epochs: m.max_epochs,
                patience: m.patience,
                ..TrainConfig::default()
            },
            lambdas: self.sweep.lambdas.clone(),
            thresholds: self.sweep.thresholds.clone(),
            first_gate: self.sweep.first_gate.into(),
            bootstrap_splits: self.sweep.bootstrap_splits,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
