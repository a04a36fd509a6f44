use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, AttackKind};
use crate::data::{BlobsConfig, MultiViewImagesConfig};
use crate::error::{Error, Result};
use crate::model::{Architecture, KlDirection, ModelSpec, TrainConfig};
use crate::trigger::{LabelStrategy, SelectionPool, SelectionStrategy};
use crate::watermark::{RegMode, WatermarkTrainConfig};

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Blobs(BlobsConfig),
    MultiviewImages(MultiViewImagesConfig),
    /// The 8x8 digits set, read from the cache directory.
    Digits {
        #[serde(default)]
        cache_dir: Option<PathBuf>,
    },
    /// A label-first CSV file (`label,x_0,x_1,...`) inside `path`.
    Directory {
        path: PathBuf,
        #[serde(default = "default_csv_name")]
        file: String,
        input_shape: Vec<usize>,
        num_classes: usize,
    },
}

fn default_csv_name() -> String {
    "data.csv".into()
}

impl DatasetSource {
    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Directory { path, file, .. } = self {
            let p = path.join(file);
            if !p.is_file() {
                return Err(Error::Config(format!("dataset file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Optimiser settings without a seed; each stage derives its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Defaults to a quarter of `epochs`.
    #[serde(default)]
    pub lr_decay_every: Option<usize>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    5e-4
}

impl TrainSection {
    pub fn with_epochs(epochs: usize) -> Self {
        TrainSection {
            epochs,
            batch_size: default_batch(),
            lr: default_lr(),
            lr_decay_every: None,
            momentum: default_momentum(),
            weight_decay: default_wd(),
            grad_clip: None,
        }
    }

    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_initial: self.lr,
            lr_decay_every: self.lr_decay_every.unwrap_or((self.epochs / 4).max(1)),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSection {
    /// Absolute trigger-set size; overrides `fraction`.
    #[serde(default)]
    pub size: Option<usize>,
    /// Trigger-set size as a fraction of the source set.
    #[serde(default = "default_trigger_fraction")]
    pub fraction: f64,
    #[serde(default)]
    pub selection: SelectionStrategy,
    #[serde(default)]
    pub labeling: LabelStrategy,
    #[serde(default)]
    pub pool: SelectionPool,
}

fn default_trigger_fraction() -> f64 {
    0.02
}

impl Default for TriggerSection {
    fn default() -> Self {
        TriggerSection {
            size: None,
            fraction: default_trigger_fraction(),
            selection: SelectionStrategy::default(),
            labeling: LabelStrategy::default(),
            pool: SelectionPool::default(),
        }
    }
}

impl TriggerSection {
    pub fn size_for(&self, source_len: usize) -> usize {
        self.size.unwrap_or_else(|| (self.fraction * source_len as f64).round() as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_reg_mode")]
    pub reg_mode: RegMode,
    #[serde(default = "default_cap_factor")]
    pub repel_cap_factor: f64,
    #[serde(default)]
    pub repel_cap: Option<f64>,
}

fn default_alpha() -> f64 {
    0.01
}
fn default_reg_mode() -> RegMode {
    RegMode::Attract
}
fn default_cap_factor() -> f64 {
    10.0
}

impl Default for WatermarkSection {
    fn default() -> Self {
        WatermarkSection {
            alpha: default_alpha(),
            reg_mode: default_reg_mode(),
            repel_cap_factor: default_cap_factor(),
            repel_cap: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEntry {
    /// Unique name; used in stage names and artifact paths.
    pub name: String,
    pub kind: AttackKind,
    /// Defaults to the top-level `[train]` section.
    #[serde(default)]
    pub train: Option<TrainSection>,
    /// Surrogate architecture for black-box attacks; defaults to the source's.
    #[serde(default)]
    pub surrogate_model: Option<Architecture>,
    #[serde(default)]
    pub distill_alpha: Option<f64>,
    #[serde(default)]
    pub prune_acc_drop: Option<f64>,
    #[serde(default)]
    pub kl_direction: KlDirection,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    1.0
}

impl AttackEntry {
    pub fn new(name: &str, kind: AttackKind) -> Self {
        AttackEntry {
            name: name.into(),
            kind,
            train: None,
            surrogate_model: None,
            distill_alpha: None,
            prune_acc_drop: (kind == AttackKind::Fineprune).then_some(0.2),
            kl_direction: KlDirection::default(),
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Alpha,
    TriggerSize,
    DistillAlpha,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Alpha => "alpha",
            SweepParameter::TriggerSize => "trigger_size",
            SweepParameter::DistillAlpha => "distill_alpha",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

/// One experiment: data, model, watermark, attacks and verification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; the CLI's `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSource,
    /// Attacker data from a different source; otherwise the surrogate half
    /// of `dataset` is used.
    #[serde(default)]
    pub surrogate_dataset: Option<DatasetSource>,
    /// Held-out share of `dataset` used only for reporting accuracy.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_source_fraction")]
    pub source_fraction: f64,
    pub model: Architecture,
    pub train: TrainSection,
    #[serde(default)]
    pub trigger: TriggerSection,
    #[serde(default)]
    pub watermark: WatermarkSection,
    #[serde(default)]
    pub attacks: Vec<AttackEntry>,
    #[serde(default = "default_significance")]
    pub significance: f64,
    /// Also train a clean model on the surrogate data as a negative control.
    #[serde(default = "default_true")]
    pub independent_model: bool,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

fn default_test_fraction() -> f64 {
    0.2
}
fn default_source_fraction() -> f64 {
    0.5
}
fn default_significance() -> f64 {
    crate::verification::DEFAULT_SIGNIFICANCE
}
fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::persistence(path, e.to_string()))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.source_fraction) {
            return Err(Error::Config(format!("source_fraction {} must lie in (0, 1)", self.source_fraction)));
        }
        if !open(self.test_fraction) {
            return Err(Error::Config(format!("test_fraction {} must lie in (0, 1)", self.test_fraction)));
        }
        if !open(self.significance) {
            return Err(Error::Config("significance must lie in (0, 1)".into()));
        }
        if !(self.trigger.fraction > 0.0 && self.trigger.fraction < 1.0) && self.trigger.size.is_none() {
            return Err(Error::Config("trigger fraction must lie in (0, 1)".into()));
        }
        self.dataset.validate()?;
        if let Some(s) = &self.surrogate_dataset {
            s.validate()?;
        }
        self.train.to_config(0).validate()?;
        self.watermark_config(0).validate()?;
        let mut names = std::collections::HashSet::new();
        for a in &self.attacks {
            if a.name.is_empty() || !a.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(Error::Config(format!("attack name `{}` must be [A-Za-z0-9_-]+", a.name)));
            }
            if !names.insert(a.name.as_str()) {
                return Err(Error::Config(format!("duplicate attack name `{}`", a.name)));
            }
            if matches!(a.name.as_str(), "source" | "independent" | "benign") {
                return Err(Error::Config(format!("attack name `{}` is reserved", a.name)));
            }
            self.attack_config(a, None, 0)?.validate()?;
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(Error::Config("sweep needs at least one value".into()));
            }
            if sw.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config("sweep values must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    /// Stable hash of everything that affects results (not the output path).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let json = serde_json::to_vec(&c).expect("experiment config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn watermark_config(&self, seed: u64) -> WatermarkTrainConfig {
        WatermarkTrainConfig {
            base: self.train.to_config(seed),
            alpha: self.watermark.alpha,
            reg_mode: self.watermark.reg_mode,
            repel_cap_factor: self.watermark.repel_cap_factor,
            repel_cap: self.watermark.repel_cap,
        }
    }

    /// Concrete attack configuration. `surrogate_shape` supplies the input
    /// shape and class count for the surrogate spec; without it the spec is
    /// left for the attack to default.
    pub fn attack_config(
        &self,
        entry: &AttackEntry,
        surrogate_shape: Option<(&[usize], usize)>,
        seed: u64,
    ) -> Result<AttackConfig> {
        let train = entry.train.as_ref().unwrap_or(&self.train).to_config(seed);
        let surrogate_spec = match (&entry.surrogate_model, surrogate_shape) {
            (Some(arch), Some((shape, k))) => Some(ModelSpec::new(arch.clone(), k, shape.to_vec())?),
            _ => None,
        };
        Ok(AttackConfig {
            kind: entry.kind,
            surrogate_spec,
            train,
            distill_alpha: entry.distill_alpha,
            prune_acc_drop: entry.prune_acc_drop,
            kl_direction: entry.kl_direction,
            temperature: entry.temperature,
        })
    }

    /// Copy of this config with one sweep value applied.
    pub fn with_sweep_value(&self, parameter: SweepParameter, value: f64) -> Result<Self> {
        let mut c = self.clone();
        c.sweep = None;
        match parameter {
            SweepParameter::Alpha => {
                c.watermark.alpha = value;
                if value == 0.0 {
                    c.watermark.reg_mode = RegMode::None;
                }
            }
            SweepParameter::TriggerSize => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::Config(format!("trigger size {value} must be a positive integer")));
                }
                c.trigger.size = Some(value as usize);
            }
            SweepParameter::DistillAlpha => {
                let mut any = false;
                for a in c.attacks.iter_mut().filter(|a| a.kind == AttackKind::Distill) {
                    a.distill_alpha = Some(value);
                    any = true;
                }
                if !any {
                    return Err(Error::Config("distill_alpha sweep needs a distill attack".into()));
                }
            }
        }
        c.validate()?;
        Ok(c)
    }
}
