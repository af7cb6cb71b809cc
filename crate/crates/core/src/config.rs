//! Experiment configuration and its flat `key = value` text format.
//!
//! One assignment per line, `#` starts a comment, nested fields use dotted
//! keys (`kalman.q = 1e-4`). Lists are comma-separated. Unset keys keep
//! their defaults; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{PartitionKind, PartitionSpec};
use crate::fusion::KalmanParams;
use crate::nn::TrainSpec;
use crate::scoring::{EntropyMode, DEFAULT_WEIGHT_FLOOR};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FedAvgUniform,
    FedAvgSamples,
    Cgsv,
    ShapFed,
    SpectralFed,
    SpectralFuse,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::FedAvgUniform,
        Strategy::FedAvgSamples,
        Strategy::Cgsv,
        Strategy::ShapFed,
        Strategy::SpectralFed,
        Strategy::SpectralFuse,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedAvgUniform => "fedavg_uniform",
            Strategy::FedAvgSamples => "fedavg_samples",
            Strategy::Cgsv => "cgsv",
            Strategy::ShapFed => "shapfed",
            Strategy::SpectralFed => "spectral_fed",
            Strategy::SpectralFuse => "spectral_fuse",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("strategy", format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Stratified share of the data held out as the shared test set.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs {
                classes: 10,
                dim: 32,
                per_class: 300,
                separation: 3.0,
            },
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 1,
            batch_size: 64,
            lr_initial: 0.1,
            lr_final: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden layer widths; empty means a linear softmax model.
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeRiderConfig {
    pub client: usize,
    /// Genuine samples kept; defaults to 1% of the mean shard size.
    pub pool_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub tau: f64,
    /// Number of equal round intervals reported by `freerider`.
    pub intervals: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self { tau: 2.5, intervals: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub q: Vec<f64>,
    pub epsilon: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            q: vec![1e-6, 1e-4, 1e-2],
            epsilon: vec![1e-4, 1e-3, 1e-2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub seed: u64,
    pub n_clients: usize,
    pub rounds: usize,
    /// Worker threads; `0` uses the global pool.
    pub workers: usize,
    pub strategy: Strategy,
    pub entropy_mode: EntropyMode,
    /// EMA momentum applied to every raw score.
    pub momentum: f64,
    pub weight_floor: f64,
    pub kalman: KalmanParams,
    pub train: TrainConfig,
    pub partition: PartitionKind,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub free_rider: Option<FreeRiderConfig>,
    pub detection: DetectionConfig,
    pub sweep: SweepConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_clients: 5,
            rounds: 50,
            workers: 0,
            strategy: Strategy::SpectralFed,
            entropy_mode: EntropyMode::TraceNormalized,
            momentum: 0.9,
            weight_floor: DEFAULT_WEIGHT_FLOOR,
            kalman: KalmanParams::default(),
            train: TrainConfig::default(),
            partition: PartitionKind::OnlyLabelSkew,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            free_rider: None,
            detection: DetectionConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(key, format!("{v} must be positive")))
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds", "must be positive"));
        }
        self.partition_spec().validate()?;
        self.train_spec().validate()?;
        self.kalman.validate()?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", format!("{} must lie in [0, 1)", self.momentum)));
        }
        positive("weight_floor", self.weight_floor)?;
        if self.weight_floor * self.n_clients as f64 > 1.0 {
            return Err(Error::invalid("weight_floor", "floor times n_clients exceeds 1"));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::invalid("model.hidden", "widths must be positive"));
        }
        match &self.data.source {
            DataSource::Blobs {
                classes,
                dim,
                per_class,
                separation,
            } => {
                if *classes < 2 {
                    return Err(Error::invalid("data.classes", "need at least 2"));
                }
                if *dim < 2 {
                    return Err(Error::invalid("data.dim", "need at least 2"));
                }
                if *per_class == 0 {
                    return Err(Error::invalid("data.per_class", "must be positive"));
                }
                positive("data.separation", *separation)?;
            }
            DataSource::Idx { images, labels } => {
                if images.as_os_str().is_empty() || labels.as_os_str().is_empty() {
                    return Err(Error::invalid("data.images", "idx source needs both paths"));
                }
            }
        }
        let tf = self.data.test_fraction;
        if !(tf > 0.0 && tf < 1.0) {
            return Err(Error::invalid("data.test_fraction", format!("{tf} must lie in (0, 1)")));
        }
        if let Some(fr) = &self.free_rider {
            if fr.client >= self.n_clients {
                return Err(Error::invalid(
                    "free_rider.client",
                    format!("{} must be below n_clients = {}", fr.client, self.n_clients),
                ));
            }
            if fr.pool_size == Some(0) {
                return Err(Error::invalid("free_rider.pool_size", "must be positive"));
            }
        }
        positive("detection.tau", self.detection.tau)?;
        if self.detection.intervals == 0 {
            return Err(Error::invalid("detection.intervals", "must be positive"));
        }
        if self.sweep.q.is_empty() {
            return Err(Error::invalid("sweep.q", "must not be empty"));
        }
        if self.sweep.epsilon.is_empty() {
            return Err(Error::invalid("sweep.epsilon", "must not be empty"));
        }
        for &q in &self.sweep.q {
            KalmanParams { q, ..self.kalman }.validate()?;
        }
        for &epsilon in &self.sweep.epsilon {
            KalmanParams { epsilon, ..self.kalman }.validate()?;
        }
        Ok(())
    }

    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec {
            local_epochs: self.train.local_epochs,
            batch_size: self.train.batch_size,
            lr_initial: self.train.lr_initial,
            lr_final: self.train.lr_final,
            total_rounds: self.rounds,
            seed: self.seed,
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            kind: self.partition,
            n_clients: self.n_clients,
            seed: self.seed,
        }
    }

    /// Serializes every field in the text format; `parse_config_str` reads it
    /// back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("n_clients", self.n_clients.to_string());
        put("rounds", self.rounds.to_string());
        put("workers", self.workers.to_string());
        put("strategy", self.strategy.name().into());
        put("entropy_mode", entropy_mode_name(self.entropy_mode).into());
        put("momentum", self.momentum.to_string());
        put("weight_floor", self.weight_floor.to_string());
        put("kalman.q", self.kalman.q.to_string());
        put("kalman.epsilon", self.kalman.epsilon.to_string());
        put("kalman.p0", self.kalman.p0.to_string());
        put("train.local_epochs", self.train.local_epochs.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.lr_initial", self.train.lr_initial.to_string());
        put("train.lr_final", self.train.lr_final.to_string());
        put("partition.kind", self.partition.name().into());
        if let PartitionKind::Dirichlet { alpha } = self.partition {
            put("partition.alpha", alpha.to_string());
        }
        put("model.hidden", join(&self.model.hidden));
        match &self.data.source {
            DataSource::Blobs {
                classes,
                dim,
                per_class,
                separation,
            } => {
                put("data.source", "blobs".into());
                put("data.classes", classes.to_string());
                put("data.dim", dim.to_string());
                put("data.per_class", per_class.to_string());
                put("data.separation", separation.to_string());
            }
            DataSource::Idx { images, labels } => {
                put("data.source", "idx".into());
                put("data.images", images.display().to_string());
                put("data.labels", labels.display().to_string());
            }
        }
        put("data.test_fraction", self.data.test_fraction.to_string());
        if let Some(fr) = &self.free_rider {
            put("free_rider.client", fr.client.to_string());
            if let Some(p) = fr.pool_size {
                put("free_rider.pool_size", p.to_string());
            }
        }
        put("detection.tau", self.detection.tau.to_string());
        put("detection.intervals", self.detection.intervals.to_string());
        put("sweep.q", join(&self.sweep.q));
        put("sweep.epsilon", join(&self.sweep.epsilon));
        out
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn entropy_mode_name(mode: EntropyMode) -> &'static str {
    match mode {
        EntropyMode::TraceNormalized => "trace",
        EntropyMode::FrobeniusNormalized => "frobenius",
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::invalid(key, format!("`{raw}`: {e}")))
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|s| value(key, s.trim())).collect()
}

/// Raw assignments collected before the config is assembled, since some
/// keys (`partition.alpha`, `data.*`) only make sense together.
#[derive(Default)]
struct Pending {
    partition_kind: Option<String>,
    alpha: Option<f64>,
    source: Option<String>,
    classes: Option<usize>,
    dim: Option<usize>,
    per_class: Option<usize>,
    separation: Option<f64>,
    images: Option<PathBuf>,
    labels: Option<PathBuf>,
    fr_client: Option<usize>,
    fr_pool: Option<usize>,
}

pub fn parse_config_str(text: &str) -> Result<FederationConfig> {
    let mut cfg = FederationConfig::default();
    let mut p = Pending::default();
    let mut seen = std::collections::HashSet::new();

    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, raw) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
        })?;
        let key = key.trim();
        let raw = raw.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::invalid(key, format!("assigned twice (line {})", lineno + 1)));
        }
        match key {
            "seed" => cfg.seed = value(key, raw)?,
            "n_clients" => cfg.n_clients = value(key, raw)?,
            "rounds" => cfg.rounds = value(key, raw)?,
            "workers" => cfg.workers = value(key, raw)?,
            "strategy" => cfg.strategy = raw.parse()?,
            "entropy_mode" => {
                cfg.entropy_mode = match raw {
                    "trace" => EntropyMode::TraceNormalized,
                    "frobenius" => EntropyMode::FrobeniusNormalized,
                    _ => return Err(Error::invalid(key, format!("`{raw}` is not trace or frobenius"))),
                }
            }
            "momentum" => cfg.momentum = value(key, raw)?,
            "weight_floor" => cfg.weight_floor = value(key, raw)?,
            "kalman.q" => cfg.kalman.q = value(key, raw)?,
            "kalman.epsilon" => cfg.kalman.epsilon = value(key, raw)?,
            "kalman.p0" => cfg.kalman.p0 = value(key, raw)?,
            "train.local_epochs" => cfg.train.local_epochs = value(key, raw)?,
            "train.batch_size" => cfg.train.batch_size = value(key, raw)?,
            "train.lr_initial" => cfg.train.lr_initial = value(key, raw)?,
            "train.lr_final" => cfg.train.lr_final = value(key, raw)?,
            "partition.kind" => p.partition_kind = Some(raw.to_string()),
            "partition.alpha" => p.alpha = Some(value(key, raw)?),
            "model.hidden" => cfg.model.hidden = list(key, raw)?,
            "data.source" => p.source = Some(raw.to_string()),
            "data.classes" => p.classes = Some(value(key, raw)?),
            "data.dim" => p.dim = Some(value(key, raw)?),
            "data.per_class" => p.per_class = Some(value(key, raw)?),
            "data.separation" => p.separation = Some(value(key, raw)?),
            "data.images" => p.images = Some(PathBuf::from(raw)),
            "data.labels" => p.labels = Some(PathBuf::from(raw)),
            "data.test_fraction" => cfg.data.test_fraction = value(key, raw)?,
            "free_rider.client" => p.fr_client = Some(value(key, raw)?),
            "free_rider.pool_size" => p.fr_pool = Some(value(key, raw)?),
            "detection.tau" => cfg.detection.tau = value(key, raw)?,
            "detection.intervals" => cfg.detection.intervals = value(key, raw)?,
            "sweep.q" => cfg.sweep.q = list(key, raw)?,
            "sweep.epsilon" => cfg.sweep.epsilon = list(key, raw)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
    }

    cfg.partition = match p.partition_kind.as_deref() {
        None if p.alpha.is_some() => {
            return Err(Error::invalid("partition.alpha", "only valid with partition.kind = dirichlet"))
        }
        None => cfg.partition,
        Some("iid") => PartitionKind::Iid,
        Some("only_label_skew") => PartitionKind::OnlyLabelSkew,
        Some("step_quantity") => PartitionKind::StepQuantity,
        Some("step_label_skew") => PartitionKind::StepLabelSkew,
        Some("dirichlet") => PartitionKind::Dirichlet {
            alpha: p.alpha.unwrap_or(1.0),
        },
        Some(other) => return Err(Error::invalid("partition.kind", format!("unknown partition `{other}`"))),
    };
    if p.alpha.is_some() && !matches!(cfg.partition, PartitionKind::Dirichlet { .. }) {
        return Err(Error::invalid("partition.alpha", "only valid with partition.kind = dirichlet"));
    }

    let blob_keys = p.classes.is_some() || p.dim.is_some() || p.per_class.is_some() || p.separation.is_some();
    let idx_keys = p.images.is_some() || p.labels.is_some();
    cfg.data.source = match p.source.as_deref() {
        Some("idx") => {
            if blob_keys {
                return Err(Error::invalid("data.source", "blob keys given for an idx source"));
            }
            DataSource::Idx {
                images: p.images.ok_or_else(|| Error::invalid("data.images", "required for idx"))?,
                labels: p.labels.ok_or_else(|| Error::invalid("data.labels", "required for idx"))?,
            }
        }
        None | Some("blobs") => {
            if idx_keys {
                return Err(Error::invalid("data.source", "idx paths given for a blobs source"));
            }
            let DataSource::Blobs {
                classes,
                dim,
                per_class,
                separation,
            } = cfg.data.source
            else {
                unreachable!("default source is blobs")
            };
            DataSource::Blobs {
                classes: p.classes.unwrap_or(classes),
                dim: p.dim.unwrap_or(dim),
                per_class: p.per_class.unwrap_or(per_class),
                separation: p.separation.unwrap_or(separation),
            }
        }
        Some(other) => return Err(Error::invalid("data.source", format!("unknown source `{other}`"))),
    };

    cfg.free_rider = match (p.fr_client, p.fr_pool) {
        (Some(client), pool_size) => Some(FreeRiderConfig { client, pool_size }),
        (None, Some(_)) => return Err(Error::invalid("free_rider.pool_size", "needs free_rider.client")),
        (None, None) => None,
    };

    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<FederationConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
