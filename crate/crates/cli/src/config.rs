//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use anyhow::Context;

use biper::data::{load_cifar10, load_mnist, synth_two_moons_like, ChannelStats, Dataset};
use biper::layers::{Architecture, ModelSpec, Stage};
use biper::training::{Augment, Scheduler, TrainConfig};
use biper::QuantSpec;
use serde::{Deserialize, Deserializer, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    Mnist,
    Cifar10,
    TwoMoons,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetId,
    pub mnist_images: PathBuf,
    pub mnist_labels: PathBuf,
    pub cifar_dir: PathBuf,
    /// Leading samples of the shuffled file used for training; the rest validate.
    pub train_size: usize,
    pub split_seed: u64,
    pub two_moons_n: usize,
    pub two_moons_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetId::Mnist,
            mnist_images: "data/mnist10k/images-idx3-ubyte.gz".into(),
            mnist_labels: "data/mnist10k/labels-idx1-ubyte.gz".into(),
            cifar_dir: "data/cifar-10-batches-bin".into(),
            train_size: 8000,
            split_seed: 0,
            two_moons_n: 1000,
            two_moons_noise: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: String,
    pub channels: usize,
    pub hidden: Vec<usize>,
    pub binarize_activations: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: "minicnn".into(),
            channels: 8,
            hidden: vec![256, 256],
            binarize_activations: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub scheduler: Scheduler,
    pub augment: Augment,
}

impl StageConfig {
    pub fn defaults(stage: Stage) -> Self {
        let t = TrainConfig::for_stage(stage);
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr0: t.lr0,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            scheduler: t.scheduler,
            augment: t.augment,
        }
    }

    pub fn train_config(&self, stage: Stage, seed: u64) -> TrainConfig {
        TrainConfig {
            stage,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            scheduler: self.scheduler,
            seed,
            augment: self.augment,
        }
    }
}

fn stage1_defaults() -> StageConfig {
    StageConfig::defaults(Stage::Stage1)
}

fn stage2_defaults() -> StageConfig {
    StageConfig::defaults(Stage::Stage2)
}

fn ablation_stage1_defaults() -> StageConfig {
    StageConfig {
        lr0: 0.05,
        ..stage1_defaults()
    }
}

/// A stage table in which every key is optional.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StagePatch {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr0: Option<f64>,
    weight_decay: Option<f64>,
    momentum: Option<f64>,
    scheduler: Option<Scheduler>,
    augment: Option<Augment>,
}

impl StagePatch {
    fn apply(self, base: StageConfig) -> StageConfig {
        StageConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            lr0: self.lr0.unwrap_or(base.lr0),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            momentum: self.momentum.unwrap_or(base.momentum),
            scheduler: self.scheduler.unwrap_or(base.scheduler),
            augment: self.augment.unwrap_or(base.augment),
        }
    }
}

fn de_stage1<'de, D: Deserializer<'de>>(d: D) -> Result<StageConfig, D::Error> {
    StagePatch::deserialize(d).map(|p| p.apply(stage1_defaults()))
}

fn de_stage2<'de, D: Deserializer<'de>>(d: D) -> Result<StageConfig, D::Error> {
    StagePatch::deserialize(d).map(|p| p.apply(stage2_defaults()))
}

fn de_ablation_stage1<'de, D: Deserializer<'de>>(d: D) -> Result<StageConfig, D::Error> {
    StagePatch::deserialize(d).map(|p| p.apply(ablation_stage1_defaults()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub omegas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Stage-1 schedule of every ablation run.
    #[serde(default = "ablation_stage1_defaults", deserialize_with = "de_ablation_stage1")]
    pub stage1: StageConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            omegas: vec![5.0, 10.0, 20.0, 30.0],
            seeds: vec![0, 1, 2],
            stage1: ablation_stage1_defaults(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticsConfig {
    pub b: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    pub points: usize,
    pub pdf_omega0: f64,
    pub pdf_points: usize,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        Self {
            b: 1.0,
            omega_min: 0.01,
            omega_max: 100.0,
            points: 2001,
            pdf_omega0: 1.0,
            pdf_points: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub quant: QuantSpec,
    #[serde(default = "stage1_defaults", deserialize_with = "de_stage1")]
    pub stage1: StageConfig,
    #[serde(default = "stage2_defaults", deserialize_with = "de_stage2")]
    pub stage2: StageConfig,
    pub ablation: AblationConfig,
    pub analytics: AnalyticsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "runs/default".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            quant: QuantSpec::default(),
            stage1: stage1_defaults(),
            stage2: stage2_defaults(),
            ablation: AblationConfig::default(),
            analytics: AnalyticsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.quant.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or_else(|| Path::new("")));
        Ok(cfg)
    }

    /// Relative paths are taken relative to the config file's directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.output_dir,
            &mut self.data.mnist_images,
            &mut self.data.mnist_labels,
            &mut self.data.cifar_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Stage1 => &self.stage1,
            Stage::Stage2 => &self.stage2,
        }
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut StageConfig {
        match stage {
            Stage::Stage1 => &mut self.stage1,
            Stage::Stage2 => &mut self.stage2,
        }
    }

    pub fn model_spec(&self, data: &Dataset) -> anyhow::Result<ModelSpec> {
        let arch = Architecture::from_id(
            &self.model.arch,
            data.sample_shape(),
            data.classes,
            &self.model.hidden,
            self.model.channels,
        )?;
        let mut spec = ModelSpec::new(arch);
        spec.binarize_activations = self.model.binarize_activations;
        Ok(spec)
    }
}

/// Train/validation splits, standardized with statistics of the train split.
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub stats: ChannelStats,
}

pub fn load_splits(cfg: &DataConfig) -> anyhow::Result<Splits> {
    let (mut train, mut val) = match cfg.dataset {
        DatasetId::Mnist => {
            let all = load_mnist(&cfg.mnist_images, &cfg.mnist_labels).with_context(|| {
                format!("cannot load MNIST from {} and {}", cfg.mnist_images.display(), cfg.mnist_labels.display())
            })?;
            if cfg.train_size == 0 || cfg.train_size >= all.len() {
                anyhow::bail!("train_size must lie in 1..{}, got {}", all.len(), cfg.train_size);
            }
            all.split(cfg.train_size, cfg.split_seed)?
        }
        DatasetId::Cifar10 => load_cifar10(&cfg.cifar_dir)
            .with_context(|| format!("cannot load CIFAR-10 from {}", cfg.cifar_dir.display()))?,
        DatasetId::TwoMoons => {
            let all = synth_two_moons_like(cfg.two_moons_n, cfg.two_moons_noise, cfg.split_seed)?;
            let n = cfg.train_size.min(all.len() * 4 / 5).max(1);
            all.split(n, cfg.split_seed)?
        }
    };
    let stats = ChannelStats::fit(&train)?;
    stats.apply(&mut train)?;
    stats.apply(&mut val)?;
    Ok(Splits { train, val, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_stage_tables_keep_their_own_defaults() {
        let cfg = ExperimentConfig::from_toml("[stage1]\nepochs = 3\n[stage2]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.stage1.epochs, 3);
        assert_eq!(cfg.stage1.lr0, 0.1);
        assert_eq!(cfg.stage2.epochs, 2);
        assert_eq!(cfg.stage2.lr0, 0.01);
        assert_eq!(cfg.stage2.weight_decay, 5e-5);
        assert_eq!(cfg.ablation.stage1.lr0, 0.05);
        let empty = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(empty, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_quantizers_are_rejected() {
        assert!(ExperimentConfig::from_toml("[stage2]\nepoch = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[quant]\nomega0 = -1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[quant]\nmethod = \"ternary\"\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.stage2.epochs = 7;
        cfg.model.arch = "mlp".into();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.mnist_images = "/abs/images.gz".into();
        cfg.resolve_paths(Path::new("/etc/exp"));
        assert_eq!(cfg.output_dir, PathBuf::from("/etc/exp/runs/default"));
        assert_eq!(cfg.data.mnist_images, PathBuf::from("/abs/images.gz"));
        assert_eq!(cfg.data.mnist_labels, PathBuf::from("/etc/exp/data/mnist10k/labels-idx1-ubyte.gz"));
    }
}
