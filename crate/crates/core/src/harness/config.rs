//! Run configuration: a flat `key = value` file, with environment overrides
//! for path fields.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::DEFAULT_C_GRID;
use crate::error::{Error, Result};
use crate::metrics::{AggregateRule, ApcerVariant};
use crate::networks::{ExtractorConfig, GeneratorConfig};
use crate::optim::{DEFAULT_DAMPING, DEFAULT_LR, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};
use crate::triplet::{LossForm, DEFAULT_GAMMA, DEFAULT_TAU_MULTIPLIER};

/// Environment variables that override path fields, and the field each sets.
pub const PATH_ENV_VARS: [(&str, &str); 4] = [
    ("PAD_DATA_ROOT", "data_root"),
    ("PAD_MANIFEST", "manifest"),
    ("PAD_OUTPUT_DIR", "output_dir"),
    ("PAD_CHECKPOINT", "checkpoint"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Miner {
    /// Points-to-center mining.
    #[default]
    P2c,
    /// Random combination baseline.
    Rc,
}

impl fmt::Display for Miner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Miner::P2c => "p2c",
            Miner::Rc => "rc",
        })
    }
}

impl FromStr for Miner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "p2c" => Ok(Miner::P2c),
            "rc" => Ok(Miner::Rc),
            other => Err(Error::Config(format!("unknown miner {other:?} (p2c | rc)"))),
        }
    }
}

/// Counts of the synthetic dataset per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub bona_fide: usize,
    pub print: usize,
    pub replay: usize,
}

impl SplitCounts {
    /// Half bona fide, the rest split evenly between the two attack species.
    pub fn balanced(total: usize) -> Self {
        let bona_fide = total / 2;
        let print = (total - bona_fide) / 2;
        Self {
            bona_fide,
            print,
            replay: total - bona_fide - print,
        }
    }

    pub fn total(&self) -> usize {
        self.bona_fide + self.print + self.replay
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub image_size: usize,
    pub gamma: f64,
    pub tau_multiplier: f64,
    pub lr: f64,
    pub damping: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_triplets: usize,
    /// Global L2 bound on the trainable gradient before each step; 0 disables.
    pub max_grad_norm: f64,
    pub seed: u64,
    pub loss_form: LossForm,
    pub extractor_frozen: bool,
    pub miner: Miner,
    pub svm_c_grid: Vec<f64>,
    pub apcer_variant: ApcerVariant,
    /// Score aggregation over group ids before evaluation; none when unset.
    pub aggregate: Option<AggregateRule>,

    pub generator_channels: usize,
    pub generator_blocks: usize,
    pub extractor_channels: Vec<usize>,
    pub extractor_hidden: Vec<usize>,
    pub extractor_batch_norm: bool,
    pub embed_dim: usize,
    pub leaky_slope: f64,

    pub synth_train: usize,
    pub synth_dev: usize,
    pub synth_test: usize,

    pub data_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GeneratorConfig::default();
        let ext = ExtractorConfig::default();
        Self {
            image_size: 32,
            gamma: DEFAULT_GAMMA,
            tau_multiplier: DEFAULT_TAU_MULTIPLIER,
            lr: DEFAULT_LR,
            damping: DEFAULT_DAMPING,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            epochs: 30,
            batch_triplets: 16,
            max_grad_norm: 10.0,
            seed: 7,
            loss_form: LossForm::Paper,
            extractor_frozen: false,
            miner: Miner::P2c,
            svm_c_grid: DEFAULT_C_GRID.to_vec(),
            apcer_variant: ApcerVariant::Pooled,
            aggregate: None,
            generator_channels: gen.channels,
            generator_blocks: gen.blocks,
            extractor_channels: ext.stage_channels,
            extractor_hidden: ext.hidden,
            extractor_batch_norm: ext.batch_norm,
            embed_dim: ext.embed_dim,
            leaky_slope: gen.slope,
            synth_train: 2000,
            synth_dev: 600,
            synth_test: 600,
            data_root: None,
            manifest: None,
            output_dir: PathBuf::from("runs"),
            checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `PAD_*` path overrides taken from `lookup`.
    pub fn apply_path_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (var, field) in PATH_ENV_VARS {
            if let Some(value) = lookup(var).filter(|v| !v.is_empty()) {
                let path = PathBuf::from(value);
                match field {
                    "data_root" => self.data_root = Some(path),
                    "manifest" => self.manifest = Some(path),
                    "output_dir" => self.output_dir = path,
                    "checkpoint" => self.checkpoint = Some(path),
                    _ => unreachable!("every override names a path field"),
                }
            }
        }
    }

    pub fn apply_env_overrides(&mut self) {
        self.apply_path_overrides(|k| std::env::var(k).ok());
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("damping", self.damping)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return Err(Error::Config("max_grad_norm must be finite and non-negative".into()));
        }
        if !(self.tau_multiplier >= 0.0) {
            return Err(Error::Config("tau_multiplier must be non-negative".into()));
        }
        if !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be finite".into()));
        }
        if self.batch_triplets == 0 || self.image_size == 0 || self.embed_dim == 0 {
            return Err(Error::Config("batch_triplets, image_size and embed_dim must be positive".into()));
        }
        if self.svm_c_grid.is_empty() {
            return Err(Error::Config("svm_c_grid is empty".into()));
        }
        for &c in &self.svm_c_grid {
            positive("svm_c_grid entry", c)?;
        }
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            channels: self.generator_channels,
            blocks: self.generator_blocks,
            slope: self.leaky_slope,
            ..Default::default()
        }
    }

    pub fn extractor_config(&self) -> ExtractorConfig {
        ExtractorConfig {
            stage_channels: self.extractor_channels.clone(),
            hidden: self.extractor_hidden.clone(),
            embed_dim: self.embed_dim,
            batch_norm: self.extractor_batch_norm,
            slope: self.leaky_slope,
            ..Default::default()
        }
    }

    pub fn synth_counts(&self) -> [SplitCounts; 3] {
        [self.synth_train, self.synth_dev, self.synth_test].map(SplitCounts::balanced)
    }
}
