//! Experiment configuration: a `key = value` grammar, validation, and the
//! preset catalog.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::collectives::{assign_groups_1d, assign_groups_2d, GroupAssignment, ReplicaTopology};
use crate::distbn;
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network, ParamTag};
use crate::optim::{LarsConfig, OptimizerConfig, RmsPropConfig};
use crate::perf::CostModelParams;
use crate::precision::PrecisionPolicy;
use crate::schedule::{Decay, DecayKind, ScheduleSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Two strided conv → BN → swish blocks and a dense classifier.
    ToyCnn,
    /// conv → BN → swish → global pool → dense.
    PoolCnn,
    /// A single dense layer.
    Linear,
}

impl ModelKind {
    pub fn layers(self, num_classes: usize) -> Vec<LayerSpec> {
        match self {
            ModelKind::ToyCnn => vec![
                LayerSpec::conv("conv1", 8, 3, 2),
                LayerSpec::batchnorm("bn1"),
                LayerSpec::swish("act1"),
                LayerSpec::conv("conv2", 16, 3, 2),
                LayerSpec::batchnorm("bn2"),
                LayerSpec::swish("act2"),
                LayerSpec::dense("fc", num_classes),
                LayerSpec::head("head", num_classes),
            ],
            ModelKind::PoolCnn => vec![
                LayerSpec::conv("conv", 8, 3, 1),
                LayerSpec::batchnorm("bn"),
                LayerSpec::swish("act"),
                LayerSpec::pool("pool"),
                LayerSpec::dense("fc", num_classes),
                LayerSpec::head("head", num_classes),
            ],
            ModelKind::Linear => vec![
                LayerSpec::dense("fc", num_classes),
                LayerSpec::head("head", num_classes),
            ],
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::ToyCnn => "toy_cnn",
            ModelKind::PoolCnn => "pool_cnn",
            ModelKind::Linear => "linear",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy_cnn" => Ok(ModelKind::ToyCnn),
            "pool_cnn" => Ok(ModelKind::PoolCnn),
            "linear" => Ok(ModelKind::Linear),
            _ => Err(Error::Config(format!(
                "unknown model {s:?} (expected toy_cnn, pool_cnn or linear)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic,
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        eval: Option<(PathBuf, PathBuf)>,
    },
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSource::Synthetic => f.write_str("synthetic"),
            DatasetSource::Idx {
                train_images,
                train_labels,
                eval,
            } => {
                write!(f, "idx:{},{}", train_images.display(), train_labels.display())?;
                if let Some((i, l)) = eval {
                    write!(f, ",{},{}", i.display(), l.display())?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "synthetic" {
            return Ok(DatasetSource::Synthetic);
        }
        let Some(paths) = s.strip_prefix("idx:") else {
            return Err(Error::Config(format!(
                "dataset must be `synthetic` or `idx:<images>,<labels>[,<eval images>,<eval labels>]`, got {s:?}"
            )));
        };
        let p: Vec<PathBuf> = paths.split(',').map(|x| PathBuf::from(x.trim())).collect();
        match p.as_slice() {
            [i, l] => Ok(DatasetSource::Idx {
                train_images: i.clone(),
                train_labels: l.clone(),
                eval: None,
            }),
            [i, l, ei, el] => Ok(DatasetSource::Idx {
                train_images: i.clone(),
                train_labels: l.clone(),
                eval: Some((ei.clone(), el.clone())),
            }),
            _ => Err(Error::Config(format!(
                "idx dataset needs 2 or 4 comma-separated paths, got {}",
                p.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    OneD,
    TwoD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    RmsProp,
    Lars,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Lars => "lars",
        })
    }
}

/// Every knob of a training run. Parse with [`parse_config`]; serialize with
/// [`to_config_text`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: Option<String>,
    pub model: ModelKind,
    pub dataset: DatasetSource,
    pub seed: u64,
    pub synthetic_classes: usize,
    pub synthetic_train: usize,
    pub synthetic_eval: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,

    pub num_replicas: usize,
    pub global_batch: usize,
    /// Defaults to all replicas (1D) or the tile area (2D).
    pub bn_group_size: Option<usize>,
    pub bn_grouping: Grouping,
    pub grid_rows: Option<usize>,
    pub grid_cols: Option<usize>,
    pub tile_rows: Option<usize>,
    pub tile_cols: Option<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub precision: PrecisionPolicy,

    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub lars_eta: f64,
    pub lars_weight_decay: f64,
    pub lars_eps: f64,

    pub lr_per_256: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub decay: DecayKind,
    pub decay_rate: f64,
    pub epochs_per_decay: f64,
    pub poly_power: f64,
    pub end_lr: f64,

    pub eval_every_epochs: f64,
    pub eval_batch: usize,

    pub compute_ms_per_image: f64,
    pub link_bandwidth: f64,
    pub hop_latency_ms: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let rms = RmsPropConfig::default();
        let lars = LarsConfig::default();
        TrainConfig {
            preset: None,
            model: ModelKind::ToyCnn,
            dataset: DatasetSource::Synthetic,
            seed: 0,
            synthetic_classes: 10,
            synthetic_train: 8192,
            synthetic_eval: 2048,
            image_height: 16,
            image_width: 16,
            image_channels: 1,
            num_replicas: 1,
            global_batch: 256,
            bn_group_size: None,
            bn_grouping: Grouping::OneD,
            grid_rows: None,
            grid_cols: None,
            tile_rows: None,
            tile_cols: None,
            bn_momentum: distbn::DEFAULT_MOMENTUM,
            bn_eps: distbn::DEFAULT_EPS,
            precision: PrecisionPolicy::default(),
            optimizer: OptimizerKind::RmsProp,
            momentum: 0.9,
            rmsprop_decay: rms.decay,
            rmsprop_eps: rms.eps,
            lars_eta: lars.eta,
            lars_weight_decay: lars.weight_decay,
            lars_eps: lars.eps,
            lr_per_256: 0.016,
            warmup_epochs: 5.0,
            total_epochs: 350.0,
            decay: DecayKind::Exponential,
            decay_rate: Decay::DEFAULT_RATE,
            epochs_per_decay: Decay::DEFAULT_EPOCHS_PER_DECAY,
            poly_power: Decay::DEFAULT_POWER,
            end_lr: Decay::DEFAULT_END_LR,
            eval_every_epochs: 1.0,
            eval_batch: 64,
            compute_ms_per_image: 0.05,
            link_bandwidth: 1.0e6,
            hop_latency_ms: 0.001,
        }
    }
}

/// Keys required when no preset supplies them.
pub const REQUIRED_KEYS: &[&str] = &["num_replicas", "global_batch", "optimizer", "lr_per_256"];

pub const KEYS: &[&str] = &[
    "preset",
    "model",
    "dataset",
    "seed",
    "synthetic_classes",
    "synthetic_train",
    "synthetic_eval",
    "image_height",
    "image_width",
    "image_channels",
    "num_replicas",
    "global_batch",
    "bn_group_size",
    "bn_grouping",
    "grid_rows",
    "grid_cols",
    "tile_rows",
    "tile_cols",
    "bn_momentum",
    "bn_eps",
    "precision",
    "optimizer",
    "momentum",
    "rmsprop_decay",
    "rmsprop_eps",
    "lars_eta",
    "lars_weight_decay",
    "lars_eps",
    "lr_per_256",
    "warmup_epochs",
    "total_epochs",
    "decay",
    "decay_rate",
    "epochs_per_decay",
    "poly_power",
    "end_lr",
    "eval_every_epochs",
    "eval_batch",
    "compute_ms_per_image",
    "link_bandwidth",
    "hop_latency_ms",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: {value:?}")))
}

impl TrainConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => {
                let p = preset(value)?;
                p.apply(self)?;
            }
            "model" => self.model = value.parse()?,
            "dataset" => self.dataset = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "synthetic_classes" => self.synthetic_classes = num(key, value)?,
            "synthetic_train" => self.synthetic_train = num(key, value)?,
            "synthetic_eval" => self.synthetic_eval = num(key, value)?,
            "image_height" => self.image_height = num(key, value)?,
            "image_width" => self.image_width = num(key, value)?,
            "image_channels" => self.image_channels = num(key, value)?,
            "num_replicas" => self.num_replicas = num(key, value)?,
            "global_batch" => self.global_batch = num(key, value)?,
            "bn_group_size" => self.bn_group_size = Some(num(key, value)?),
            "bn_grouping" => {
                self.bn_grouping = match value {
                    "1d" => Grouping::OneD,
                    "2d" => Grouping::TwoD,
                    _ => return Err(Error::Config(format!("bn_grouping must be 1d or 2d, got {value:?}"))),
                }
            }
            "grid_rows" => self.grid_rows = Some(num(key, value)?),
            "grid_cols" => self.grid_cols = Some(num(key, value)?),
            "tile_rows" => self.tile_rows = Some(num(key, value)?),
            "tile_cols" => self.tile_cols = Some(num(key, value)?),
            "bn_momentum" => self.bn_momentum = num(key, value)?,
            "bn_eps" => self.bn_eps = num(key, value)?,
            "precision" => {
                self.precision = value
                    .parse()
                    .map_err(|e| Error::Config(format!("precision: {e}")))?
            }
            "optimizer" => {
                self.optimizer = match value {
                    "rmsprop" => OptimizerKind::RmsProp,
                    "lars" => OptimizerKind::Lars,
                    _ => return Err(Error::Config(format!("optimizer must be rmsprop or lars, got {value:?}"))),
                }
            }
            "momentum" => self.momentum = num(key, value)?,
            "rmsprop_decay" => self.rmsprop_decay = num(key, value)?,
            "rmsprop_eps" => self.rmsprop_eps = num(key, value)?,
            "lars_eta" => self.lars_eta = num(key, value)?,
            "lars_weight_decay" => self.lars_weight_decay = num(key, value)?,
            "lars_eps" => self.lars_eps = num(key, value)?,
            "lr_per_256" => self.lr_per_256 = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "total_epochs" => self.total_epochs = num(key, value)?,
            "decay" => {
                self.decay = match value {
                    "exponential" => DecayKind::Exponential,
                    "polynomial" => DecayKind::Polynomial,
                    _ => return Err(Error::Config(format!("decay must be exponential or polynomial, got {value:?}"))),
                }
            }
            "decay_rate" => self.decay_rate = num(key, value)?,
            "epochs_per_decay" => self.epochs_per_decay = num(key, value)?,
            "poly_power" => self.poly_power = num(key, value)?,
            "end_lr" => self.end_lr = num(key, value)?,
            "eval_every_epochs" => self.eval_every_epochs = num(key, value)?,
            "eval_batch" => self.eval_batch = num(key, value)?,
            "compute_ms_per_image" => self.compute_ms_per_image = num(key, value)?,
            "link_bandwidth" => self.link_bandwidth = num(key, value)?,
            "hop_latency_ms" => self.hop_latency_ms = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// All keys with their current values, in [`KEYS`] order. Unset optional
    /// keys are omitted.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<usize>| v.map(|x| x.to_string());
        let pairs: Vec<(&'static str, Option<String>)> = vec![
            ("preset", self.preset.clone()),
            ("model", Some(self.model.to_string())),
            ("dataset", Some(self.dataset.to_string())),
            ("seed", Some(self.seed.to_string())),
            ("synthetic_classes", Some(self.synthetic_classes.to_string())),
            ("synthetic_train", Some(self.synthetic_train.to_string())),
            ("synthetic_eval", Some(self.synthetic_eval.to_string())),
            ("image_height", Some(self.image_height.to_string())),
            ("image_width", Some(self.image_width.to_string())),
            ("image_channels", Some(self.image_channels.to_string())),
            ("num_replicas", Some(self.num_replicas.to_string())),
            ("global_batch", Some(self.global_batch.to_string())),
            ("bn_group_size", opt(self.bn_group_size)),
            (
                "bn_grouping",
                Some(match self.bn_grouping {
                    Grouping::OneD => "1d".into(),
                    Grouping::TwoD => "2d".into(),
                }),
            ),
            ("grid_rows", opt(self.grid_rows)),
            ("grid_cols", opt(self.grid_cols)),
            ("tile_rows", opt(self.tile_rows)),
            ("tile_cols", opt(self.tile_cols)),
            ("bn_momentum", Some(self.bn_momentum.to_string())),
            ("bn_eps", Some(self.bn_eps.to_string())),
            ("precision", Some(self.precision.to_string())),
            ("optimizer", Some(self.optimizer.to_string())),
            ("momentum", Some(self.momentum.to_string())),
            ("rmsprop_decay", Some(self.rmsprop_decay.to_string())),
            ("rmsprop_eps", Some(self.rmsprop_eps.to_string())),
            ("lars_eta", Some(self.lars_eta.to_string())),
            ("lars_weight_decay", Some(self.lars_weight_decay.to_string())),
            ("lars_eps", Some(self.lars_eps.to_string())),
            ("lr_per_256", Some(self.lr_per_256.to_string())),
            ("warmup_epochs", Some(self.warmup_epochs.to_string())),
            ("total_epochs", Some(self.total_epochs.to_string())),
            ("decay", Some(self.decay.to_string())),
            ("decay_rate", Some(self.decay_rate.to_string())),
            ("epochs_per_decay", Some(self.epochs_per_decay.to_string())),
            ("poly_power", Some(self.poly_power.to_string())),
            ("end_lr", Some(self.end_lr.to_string())),
            ("eval_every_epochs", Some(self.eval_every_epochs.to_string())),
            ("eval_batch", Some(self.eval_batch.to_string())),
            ("compute_ms_per_image", Some(self.compute_ms_per_image.to_string())),
            ("link_bandwidth", Some(self.link_bandwidth.to_string())),
            ("hop_latency_ms", Some(self.hop_latency_ms.to_string())),
        ];
        debug_assert_eq!(pairs.len(), KEYS.len());
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k, v)))
            .collect()
    }

    pub fn per_core_batch(&self) -> usize {
        self.global_batch / self.num_replicas
    }

    pub fn effective_group_size(&self) -> usize {
        match self.bn_grouping {
            Grouping::OneD => self.bn_group_size.unwrap_or(self.num_replicas),
            Grouping::TwoD => self.tile_rows.unwrap_or(1) * self.tile_cols.unwrap_or(1),
        }
    }

    pub fn topology(&self) -> Result<ReplicaTopology> {
        match (self.grid_rows, self.grid_cols) {
            (None, None) => ReplicaTopology::new(self.num_replicas),
            (Some(r), Some(c)) => {
                if r * c != self.num_replicas {
                    return Err(Error::Config(format!(
                        "grid {r}x{c} does not hold {} replicas",
                        self.num_replicas
                    )));
                }
                ReplicaTopology::with_grid(r, c)
            }
            _ => Err(Error::Config("grid_rows and grid_cols must be given together".into())),
        }
    }

    pub fn groups(&self) -> Result<GroupAssignment> {
        let wrap = |e: Error| Error::Config(format!("bn grouping: {e}"));
        match self.bn_grouping {
            Grouping::OneD => {
                assign_groups_1d(self.num_replicas, self.effective_group_size()).map_err(wrap)
            }
            Grouping::TwoD => {
                let (Some(tr), Some(tc)) = (self.tile_rows, self.tile_cols) else {
                    return Err(Error::Config("bn_grouping = 2d needs tile_rows and tile_cols".into()));
                };
                if let Some(g) = self.bn_group_size {
                    if g != tr * tc {
                        return Err(Error::Config(format!(
                            "bn_group_size {g} does not match the {tr}x{tc} tile"
                        )));
                    }
                }
                assign_groups_2d(&self.topology()?, (tr, tc)).map_err(wrap)
            }
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::RmsProp => OptimizerConfig::RmsProp(RmsPropConfig {
                decay: self.rmsprop_decay,
                momentum: self.momentum,
                eps: self.rmsprop_eps,
            }),
            OptimizerKind::Lars => OptimizerConfig::Lars(LarsConfig {
                eta: self.lars_eta,
                momentum: self.momentum,
                weight_decay: self.lars_weight_decay,
                eps: self.lars_eps,
                exclude_tags: [ParamTag::Bias, ParamTag::BnGamma, ParamTag::BnBeta]
                    .into_iter()
                    .collect(),
            }),
        }
    }

    pub fn decay_spec(&self) -> Decay {
        match self.decay {
            DecayKind::Exponential => Decay::Exponential {
                rate: self.decay_rate,
                epochs_per_decay: self.epochs_per_decay,
            },
            DecayKind::Polynomial => Decay::Polynomial {
                power: self.poly_power,
                end_lr: self.end_lr,
            },
        }
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> ScheduleSpec {
        ScheduleSpec {
            lr_per_256: self.lr_per_256,
            global_batch: self.global_batch,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.total_epochs,
            steps_per_epoch,
            decay: self.decay_spec(),
        }
    }

    pub fn network(&self, input_shape: [usize; 3], num_classes: usize) -> Result<Network> {
        Network::new(self.model.layers(num_classes), input_shape)
    }

    pub fn cost_params(&self, num_parameters: usize) -> CostModelParams {
        CostModelParams {
            per_image_compute_ms: self.compute_ms_per_image,
            param_bytes: 4 * num_parameters as u64,
            link_bandwidth_bytes_per_ms: self.link_bandwidth,
            per_hop_latency_ms: self.hop_latency_ms,
        }
    }

    /// Checks every cross-field invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_replicas == 0 || self.global_batch == 0 {
            return bad("num_replicas and global_batch must be >= 1".into());
        }
        if self.global_batch % self.num_replicas != 0 {
            return bad(format!(
                "global_batch {} is not a multiple of num_replicas {}",
                self.global_batch, self.num_replicas
            ));
        }
        self.groups()?;
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) || !(self.bn_eps > 0.0) {
            return bad(format!(
                "bn_momentum must be in (0,1) and bn_eps > 0, got {} and {}",
                self.bn_momentum, self.bn_eps
            ));
        }
        self.optimizer_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.total_epochs >= 0.0) {
            return bad(format!("total_epochs must be >= 0, got {}", self.total_epochs));
        }
        self.schedule(1)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.eval_every_epochs > 0.0) || self.eval_batch == 0 {
            return bad("eval_every_epochs must be > 0 and eval_batch >= 1".into());
        }
        if self.dataset == DatasetSource::Synthetic
            && [
                self.synthetic_classes,
                self.synthetic_train,
                self.synthetic_eval,
                self.image_height,
                self.image_width,
                self.image_channels,
            ]
            .contains(&0)
        {
            return bad("synthetic dataset sizes must all be >= 1".into());
        }
        if !(self.compute_ms_per_image > 0.0)
            || !(self.link_bandwidth > 0.0)
            || !(self.hop_latency_ms >= 0.0)
        {
            return bad("cost model needs compute_ms_per_image > 0, link_bandwidth > 0, hop_latency_ms >= 0".into());
        }
        Ok(())
    }
}

/// Parses the `key = value` grammar. A `preset` is applied first; other keys
/// override it in any order. Duplicate and unknown keys are errors.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut pairs: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key {k:?}", i + 1)));
        }
        if let Some((first, _)) = pairs.insert(k.to_string(), (i + 1, v.to_string())) {
            return Err(Error::Config(format!(
                "line {}: duplicate key {k:?} (first set on line {first})",
                i + 1
            )));
        }
    }
    let mut cfg = TrainConfig::default();
    if let Some((_, name)) = pairs.remove("preset") {
        cfg.set("preset", &name)?;
    } else {
        let missing: Vec<&str> = REQUIRED_KEYS
            .iter()
            .copied()
            .filter(|k| !pairs.contains_key(*k))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "required keys missing: {}",
                missing.join(", ")
            )));
        }
    }
    for (k, (line, v)) in &pairs {
        cfg.set(k, v)
            .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Serializes every key so that `parse_config(to_config_text(c)) == c`.
pub fn to_config_text(cfg: &TrainConfig) -> String {
    cfg.entries()
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetModel {
    B2,
    B5,
    Toy,
}

impl fmt::Display for PresetModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PresetModel::B2 => "b2",
            PresetModel::B5 => "b5",
            PresetModel::Toy => "toy",
        })
    }
}

/// One row of the hyperparameter catalog.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub model: PresetModel,
    pub num_replicas: usize,
    pub global_batch: usize,
    pub optimizer: OptimizerKind,
    pub lr_per_256: f64,
    pub decay: DecayKind,
    pub warmup_epochs: f64,
    /// Further `key = value` settings (toy presets only).
    pub extra: &'static [(&'static str, &'static str)],
}

impl Preset {
    /// Overwrites every field the preset defines and records its name.
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        let defaults = TrainConfig::default();
        *cfg = TrainConfig {
            preset: Some(self.name.to_string()),
            num_replicas: self.num_replicas,
            global_batch: self.global_batch,
            optimizer: self.optimizer,
            lr_per_256: self.lr_per_256,
            decay: self.decay,
            warmup_epochs: self.warmup_epochs,
            total_epochs: 350.0,
            ..defaults
        };
        let common: &[(&str, &str)] = if self.model == PresetModel::Toy { TOY_COMMON } else { &[] };
        for (k, v) in common.iter().chain(self.extra) {
            cfg.set(k, v)?;
        }
        Ok(())
    }
}

const fn row(
    name: &'static str,
    model: PresetModel,
    num_replicas: usize,
    global_batch: usize,
    optimizer: OptimizerKind,
    lr_per_256: f64,
    decay: DecayKind,
    warmup_epochs: f64,
) -> Preset {
    Preset {
        name,
        model,
        num_replicas,
        global_batch,
        optimizer,
        lr_per_256,
        decay,
        warmup_epochs,
        extra: &[],
    }
}

use DecayKind::{Exponential as Exp, Polynomial as Poly};
use OptimizerKind::{Lars, RmsProp};
use PresetModel::{B2, B5};

/// The pod-scale catalog: EfficientNet-B2 and B5 hyperparameters.
pub const TABLE_PRESETS: [Preset; 11] = [
    row("b2-rmsprop-4096", B2, 128, 4096, RmsProp, 0.016, Exp, 5.0),
    row("b2-rmsprop-8192", B2, 256, 8192, RmsProp, 0.016, Exp, 5.0),
    row("b2-rmsprop-16384", B2, 512, 16384, RmsProp, 0.016, Exp, 5.0),
    row("b2-lars-16384", B2, 512, 16384, Lars, 0.236, Poly, 50.0),
    row("b2-lars-32768", B2, 1024, 32768, Lars, 0.118, Poly, 50.0),
    row("b5-rmsprop-4096", B5, 128, 4096, RmsProp, 0.016, Exp, 5.0),
    row("b5-rmsprop-8192", B5, 256, 8192, RmsProp, 0.016, Exp, 5.0),
    row("b5-rmsprop-16384", B5, 512, 16384, RmsProp, 0.016, Exp, 5.0),
    row("b5-lars-16384", B5, 512, 16384, Lars, 0.236, Poly, 50.0),
    row("b5-lars-32768", B5, 1024, 32768, Lars, 0.118, Poly, 50.0),
    row("b5-lars-65536", B5, 1024, 65536, Lars, 0.081, Poly, 43.0),
];

const TOY_COMMON: &[(&str, &str)] = &[
    ("model", "toy_cnn"),
    ("dataset", "synthetic"),
    ("synthetic_classes", "10"),
    ("synthetic_train", "8192"),
    ("synthetic_eval", "2048"),
    ("image_height", "16"),
    ("image_width", "16"),
    ("image_channels", "1"),
    ("bn_momentum", "0.9"),
    ("eval_every_epochs", "1"),
];

const TOY_RMSPROP_EXTRA: &[(&str, &str)] = &[("total_epochs", "12")];

const TOY_LARS_EXTRA: &[(&str, &str)] = &[
    ("total_epochs", "12"),
    ("lars_weight_decay", "0.00001"),
    ("bn_momentum", "0.8"),
];

/// Desk-scale presets trained on synthetic 16×16 images.
pub const TOY_PRESETS: [Preset; 2] = [
    Preset {
        name: "toy-rmsprop-512",
        model: PresetModel::Toy,
        num_replicas: 8,
        global_batch: 512,
        optimizer: RmsProp,
        lr_per_256: 0.016,
        decay: Exp,
        warmup_epochs: 1.0,
        extra: TOY_RMSPROP_EXTRA,
    },
    Preset {
        name: "toy-lars-2048",
        model: PresetModel::Toy,
        num_replicas: 8,
        global_batch: 2048,
        optimizer: Lars,
        lr_per_256: 1.0,
        decay: Poly,
        warmup_epochs: 2.0,
        extra: TOY_LARS_EXTRA,
    },
];

pub fn presets() -> impl Iterator<Item = &'static Preset> {
    TABLE_PRESETS.iter().chain(TOY_PRESETS.iter())
}

pub fn preset(name: &str) -> Result<&'static Preset> {
    presets()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))
}
