//! Experiment configuration: TOML on disk, every omitted field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{f_cost, CostSpec, LayerCostTable};
use crate::distill::{KDSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::search::SearchConfig;
use crate::supernet::{candidates_from_ratios, ConvLayerSpec, SuperNetSpec};

/// Environment variable that re-roots relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "NETSHRINK_OUTPUT_ROOT";

pub const DEFAULT_RATIOS: [f64; 8] = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        #[serde(default = "defaults::classes")]
        classes: usize,
        #[serde(default = "defaults::train_samples")]
        train_samples: usize,
        #[serde(default = "defaults::test_samples")]
        test_samples: usize,
        /// `[channels, height, width]`.
        #[serde(default = "defaults::image_shape")]
        image_shape: [usize; 3],
        #[serde(default = "defaults::noise")]
        noise: f64,
        /// Seed of the sample noise; independent of the run seed.
        #[serde(default)]
        seed: u64,
    },
    Cifar10 {
        path: PathBuf,
        /// Stratified training subset size; all 50,000 images when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subset: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_subset: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
}

mod defaults {
    pub fn classes() -> usize {
        4
    }
    pub fn train_samples() -> usize {
        2000
    }
    pub fn test_samples() -> usize {
        1000
    }
    pub fn image_shape() -> [usize; 3] {
        [3, 8, 8]
    }
    pub fn noise() -> f64 {
        2.0
    }
}

impl DatasetConfig {
    pub fn image_shape(&self) -> [usize; 3] {
        match self {
            DatasetConfig::Synthetic { image_shape, .. } => *image_shape,
            DatasetConfig::Cifar10 { .. } => [3, 32, 32],
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetConfig::Synthetic { classes, .. } => *classes,
            DatasetConfig::Cifar10 { .. } => crate::data::CIFAR_CLASSES,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DatasetConfig::Synthetic {
                classes,
                train_samples,
                test_samples,
                image_shape,
                noise,
                ..
            } => {
                if *classes < 2 {
                    return Err(config_err("dataset.classes", "need at least 2 classes"));
                }
                if *train_samples < 2 * classes || *test_samples == 0 {
                    return Err(config_err(
                        "dataset.train_samples",
                        "too few samples for the class count",
                    ));
                }
                if image_shape.contains(&0) {
                    return Err(config_err("dataset.image_shape", "extents must be positive"));
                }
                if !(*noise >= 0.0) {
                    return Err(config_err("dataset.noise", "must be >= 0"));
                }
            }
            DatasetConfig::Cifar10 {
                subset, test_subset, ..
            } => {
                for (key, v) in [("dataset.subset", subset), ("dataset.test_subset", test_subset)] {
                    if let Some(n) = v {
                        if *n == 0 || n % crate::data::CIFAR_CLASSES != 0 {
                            return Err(config_err(key, "must be a positive multiple of 10"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// One convolution of the supernet at maximal width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub width: usize,
    #[serde(default = "three")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "one")]
    pub padding: usize,
}

fn three() -> usize {
    3
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupernetConfig {
    pub stages: Vec<Vec<LayerConfig>>,
    pub candidate_ratios: Vec<f64>,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        let layer = |stride| LayerConfig {
            width: 16,
            kernel: 3,
            stride,
            padding: 1,
        };
        SupernetConfig {
            stages: vec![vec![layer(1)], vec![layer(2)], vec![layer(1)]],
            candidate_ratios: DEFAULT_RATIOS.to_vec(),
        }
    }
}

/// Target given either as absolute FLOPs or as a fraction of the supernet's
/// maximal FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub lambda: f64,
    pub toleration: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_flops: Option<f64>,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            lambda: 2.0,
            toleration: 0.05,
            target_ratio: Some(0.5),
            target_flops: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub supernet: SupernetConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub teacher: TrainConfig,
    #[serde(default)]
    pub student: TrainConfig,
    #[serde(default)]
    pub kd: KDSpec,
}

fn config_err(key: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        detail: detail.into(),
    }
}

/// Pulls the offending key out of a TOML deserialization message.
fn parse_error(e: toml::de::Error) -> Error {
    let msg = e.message().to_string();
    let key = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.contains("field"))
        .unwrap_or("config")
        .to_string();
    config_err(&key, msg)
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(parse_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Every field, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.supernet.stages.is_empty() || self.supernet.stages.iter().any(Vec::is_empty) {
            return Err(config_err("supernet.stages", "need at least one layer per stage"));
        }
        if self.supernet.candidate_ratios.is_empty()
            || self.supernet.candidate_ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0))
        {
            return Err(config_err("supernet.candidate_ratios", "ratios must lie in (0, 1]"));
        }
        for l in self.supernet.stages.iter().flatten() {
            if l.width == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(config_err(
                    "supernet.stages",
                    "width, kernel and stride must be positive",
                ));
            }
        }
        self.search.validate()?;
        let c = &self.cost;
        if !(c.lambda >= 0.0) {
            return Err(config_err("cost.lambda", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&c.toleration) {
            return Err(config_err(
                "cost.toleration",
                format!("{} outside [0, 1]", c.toleration),
            ));
        }
        match (c.target_ratio, c.target_flops) {
            (Some(_), Some(_)) => {
                return Err(config_err(
                    "cost.target_flops",
                    "set target_ratio or target_flops, not both",
                ))
            }
            (Some(r), None) if !(r > 0.0 && r <= 1.0) => {
                return Err(config_err("cost.target_ratio", format!("{r} outside (0, 1]")))
            }
            (None, Some(f)) if !(f > 0.0) => return Err(config_err("cost.target_flops", "must be positive")),
            _ => {}
        }
        self.teacher.validate("teacher")?;
        self.student.validate("student")?;
        self.kd.validate().map_err(|e| config_err("kd", e.to_string()))?;
        self.supernet_spec()?;
        Ok(())
    }

    pub fn supernet_spec(&self) -> Result<SuperNetSpec> {
        let shape = self.dataset.image_shape();
        let spec = SuperNetSpec {
            in_channels: shape[0],
            image_size: [shape[1], shape[2]],
            num_classes: self.dataset.num_classes(),
            stages: self
                .supernet
                .stages
                .iter()
                .map(|stage| {
                    stage
                        .iter()
                        .map(|l| ConvLayerSpec {
                            c_out_max: l.width,
                            kernel: l.kernel,
                            stride: l.stride,
                            padding: l.padding,
                            candidates: candidates_from_ratios(l.width, &self.supernet.candidate_ratios),
                        })
                        .collect()
                })
                .collect(),
        };
        spec.validate().map_err(|e| config_err("supernet", e.to_string()))?;
        Ok(spec)
    }

    pub fn max_flops(&self) -> Result<f64> {
        let spec = self.supernet_spec()?;
        Ok(f_cost(&spec.full_arch(), &LayerCostTable::new(&spec)))
    }

    pub fn cost_spec(&self) -> Result<CostSpec> {
        let target = match (self.cost.target_flops, self.cost.target_ratio) {
            (Some(f), _) => f,
            (None, Some(r)) => r * self.max_flops()?,
            (None, None) => 0.5 * self.max_flops()?,
        };
        CostSpec::new(target, self.cost.toleration, self.cost.lambda)
    }

    /// SHA-256 of the resolved configuration with the output directory
    /// blanked, as lowercase hex.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Output directory after applying the output-root override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}
