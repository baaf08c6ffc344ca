//! Resolution of per-command settings: defaults, then the `[command]` table
//! of the `--config` file, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use coda_core::data::{load_cifar_binary, load_idx, LabeledImageSet};
use coda_core::dau::RescaleKind;
use coda_core::evdemo::EvDemoConfig;
use coda_core::net::{EncodingKind, NetConfig, Optimizer, TrainConfig};
use coda_core::tensor::Real;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Parsed `--config` file: global keys plus one table per command.
#[derive(Debug, Default)]
pub struct ConfigFile {
    pub table: toml::Table,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let table = text
            .parse::<toml::Table>()
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(Self { table })
    }

    pub fn global<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => Ok(Some(v.clone().try_into().with_context(|| format!("config key '{key}'"))?)),
        }
    }

    /// Settings for `section`, with `flags` (a serialisable struct of
    /// optional overrides) taking precedence over the file.
    pub fn resolve<T: DeserializeOwned, F: Serialize>(&self, section: &str, flags: &F) -> Result<T> {
        let mut merged = match self.table.get(section) {
            Some(toml::Value::Table(t)) => t.clone(),
            Some(_) => bail!("config key '{section}' must be a table"),
            None => toml::Table::new(),
        };
        let overrides = toml::Table::try_from(flags).context("encoding command-line flags")?;
        for (k, v) in overrides {
            merged.insert(k, v);
        }
        toml::Value::Table(merged)
            .try_into()
            .with_context(|| format!("invalid settings for '{section}'"))
    }
}

fn default_images() -> PathBuf {
    PathBuf::from("data/mnist5k/images-idx3-ubyte.gz")
}

fn default_labels() -> PathBuf {
    PathBuf::from("data/mnist5k/labels-idx1-ubyte.gz")
}

/// Where the images come from and how they are split.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSettings {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// CIFAR-10 binary batches; when non-empty, used instead of IDX files.
    pub cifar: Vec<PathBuf>,
    /// Classes to keep, relabelled in this order. Empty keeps all.
    pub classes: Vec<usize>,
    pub test_fraction: f64,
    pub split_salt: u64,
    /// Cap on training images per class (0 = no cap).
    pub train_per_class: usize,
    /// Cap on test images per class (0 = no cap).
    pub test_per_class: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            images: default_images(),
            labels: default_labels(),
            cifar: Vec::new(),
            classes: Vec::new(),
            test_fraction: 0.2,
            split_salt: 17,
            train_per_class: 0,
            test_per_class: 0,
        }
    }
}

pub struct LoadedData {
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
    pub inputs: Vec<PathBuf>,
}

impl DataSettings {
    pub fn load(&self) -> Result<LoadedData> {
        let (mut set, inputs) = if self.cifar.is_empty() {
            let set = load_idx(&self.images, &self.labels)
                .with_context(|| format!("loading {} / {}", self.images.display(), self.labels.display()))?;
            (set, vec![self.images.clone(), self.labels.clone()])
        } else {
            let mut all: Option<LabeledImageSet> = None;
            for p in &self.cifar {
                let part = load_cifar_binary(p).with_context(|| format!("loading {}", p.display()))?;
                all = Some(match all {
                    None => part,
                    Some(mut a) => {
                        a.images.extend(part.images);
                        a.labels.extend(part.labels);
                        a
                    }
                });
            }
            (all.expect("at least one file"), self.cifar.clone())
        };
        if !self.classes.is_empty() {
            set = set.select_classes(&self.classes)?;
        }
        let (mut train, mut test) = set.split(self.test_fraction, self.split_salt);
        if self.train_per_class > 0 {
            train = train.take_per_class(self.train_per_class);
        }
        if self.test_per_class > 0 {
            test = test.take_per_class(self.test_per_class);
        }
        Ok(LoadedData { train, test, inputs })
    }
}

/// Network architecture knobs exposed on the command line.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub rescale: RescaleKind,
    pub encoding: EncodingKind,
    /// Piecewise-linear stem blocks; 0 builds the default pure network.
    pub stem_depth: usize,
    /// CoDA layers after a stem.
    pub coda_depth: usize,
    pub temperature: Real,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            rescale: RescaleKind::Wb,
            encoding: EncodingKind::Six,
            stem_depth: 0,
            coda_depth: 2,
            temperature: 10.0,
        }
    }
}

impl ModelSettings {
    pub fn net_config(&self, set: &LabeledImageSet) -> Result<NetConfig> {
        let Some(&[c, h, w]) = set.image_shape() else {
            bail!("training set is empty or not made of [C, H, W] images");
        };
        let mut cfg = NetConfig::default_for(c, h, w, set.classes, self.rescale);
        cfg.encoding = self.encoding;
        cfg.temperature = self.temperature;
        if self.stem_depth > 0 {
            cfg = cfg.hybrid(self.stem_depth, self.coda_depth);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimiser settings; the seed comes from the global `--seed`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimSettings {
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    pub micro_batch: usize,
    pub lr: Real,
    pub momentum: Real,
    pub cosine: bool,
}

impl Default for OptimSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            optimizer: t.optimizer,
            epochs: t.epochs,
            batch_size: t.batch_size,
            micro_batch: t.micro_batch,
            lr: t.lr,
            momentum: t.momentum,
            cosine: t.cosine,
        }
    }
}

impl OptimSettings {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            epochs: self.epochs,
            batch_size: self.batch_size,
            micro_batch: self.micro_batch,
            lr: self.lr,
            momentum: self.momentum,
            cosine: self.cosine,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    #[serde(flatten)]
    pub data: DataSettings,
    #[serde(flatten)]
    pub model: ModelSettings,
    #[serde(flatten)]
    pub optim: OptimSettings,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainSettings {
    #[serde(flatten)]
    pub data: DataSettings,
    pub model: PathBuf,
    /// Index into the test split.
    pub index: usize,
    /// Class to explain; defaults to the image's label.
    pub class: Option<usize>,
    pub depth: usize,
    /// For hybrids: explain at the input of this stem block instead, with
    /// the CoDA layers' dynamic weights frozen.
    pub stem_block: Option<usize>,
    pub scale: usize,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        Self {
            data: DataSettings::default(),
            model: PathBuf::from("model.coda"),
            index: 0,
            class: None,
            depth: 0,
            stem_block: None,
            scale: 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PointingSettings {
    #[serde(flatten)]
    pub data: DataSettings,
    pub model: PathBuf,
    pub grid_n: usize,
    pub grids: usize,
    /// Most confident images per class the tiles are drawn from.
    pub pool: usize,
    pub methods: Vec<String>,
    /// Heatmaps written for the first this many grids.
    pub heatmaps: usize,
}

impl Default for PointingSettings {
    fn default() -> Self {
        Self {
            data: DataSettings::default(),
            model: PathBuf::from("model.coda"),
            grid_n: 2,
            grids: 50,
            pool: 50,
            methods: ["inherent", "grad", "ixg", "occ8:4", "random"].map(String::from).to_vec(),
            heatmaps: 2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RemovalSettings {
    #[serde(flatten)]
    pub data: DataSettings,
    pub model: PathBuf,
    /// Number of test images (taken in order).
    pub count: usize,
    pub methods: Vec<String>,
    pub orders: Vec<String>,
    pub fractions: Vec<Real>,
}

impl Default for RemovalSettings {
    fn default() -> Self {
        Self {
            data: DataSettings::default(),
            model: PathBuf::from("model.coda"),
            count: 200,
            methods: ["inherent", "random"].map(String::from).to_vec(),
            orders: ["least", "most"].map(String::from).to_vec(),
            fractions: (0..=10).map(|i| i as Real / 10.0).collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TemperatureSettings {
    #[serde(flatten)]
    pub data: DataSettings,
    #[serde(flatten)]
    pub model: ModelSettings,
    #[serde(flatten)]
    pub optim: OptimSettings,
    pub temperatures: Vec<Real>,
    pub seeds: Vec<u64>,
    pub grid_n: usize,
    pub grids: usize,
    pub pool: usize,
}

impl Default for TemperatureSettings {
    fn default() -> Self {
        Self {
            data: DataSettings {
                classes: vec![0, 1, 2, 3],
                train_per_class: 100,
                ..DataSettings::default()
            },
            model: ModelSettings {
                rescale: RescaleKind::Sq,
                ..ModelSettings::default()
            },
            optim: OptimSettings {
                epochs: 10,
                ..OptimSettings::default()
            },
            temperatures: vec![10.0, 1000.0],
            seeds: vec![0, 1, 2],
            grid_n: 2,
            grids: 30,
            pool: 30,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvDemoSettings {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// One template per listed class: its first image in the file.
    pub classes: Vec<usize>,
    pub samples: usize,
    pub sigma: Real,
    pub rank: usize,
    pub steps: usize,
    pub lr: Real,
    pub rescale: RescaleKind,
    pub scale: usize,
}

impl Default for EvDemoSettings {
    fn default() -> Self {
        let d = EvDemoConfig::default();
        Self {
            images: default_images(),
            labels: default_labels(),
            classes: vec![0, 1, 2],
            samples: d.samples,
            sigma: d.sigma,
            rank: d.rank,
            steps: d.steps,
            lr: d.lr,
            rescale: d.rescale,
            scale: 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub batch_sizes: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            batch_sizes: vec![1, 16, 128],
            reps: 10,
            warmup: 3,
            channels: 1,
            height: 28,
            width: 28,
            classes: 10,
        }
    }
}
