//! Run configuration. Every field has a default, so a config file only
//! needs to name what it changes.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::TrainSchedule;
use crate::data::{load_cifar10, synthetic_dataset, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::graph::{ArchDesc, DatasetMeta};
use crate::metrics::LatencySettings;
use crate::probes::ProbeConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PipelineMode {
    /// Iterative pruning, mimic loss.
    #[default]
    #[serde(rename = "dbp")]
    Dbp,
    /// Iterative pruning, mimic loss, random block selection.
    #[serde(rename = "random")]
    Random,
    /// One-shot pruning, no mimic loss.
    #[serde(rename = "dbp-a")]
    DbpA,
    /// One-shot pruning, mimic loss.
    #[serde(rename = "dbp-b")]
    DbpB,
    /// Iterative pruning, no mimic loss.
    #[serde(rename = "dbp-c")]
    DbpC,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 5] = [
        PipelineMode::Dbp,
        PipelineMode::Random,
        PipelineMode::DbpA,
        PipelineMode::DbpB,
        PipelineMode::DbpC,
    ];

    pub fn iterative(self) -> bool {
        !matches!(self, PipelineMode::DbpA | PipelineMode::DbpB)
    }

    pub fn uses_mimic(self) -> bool {
        !matches!(self, PipelineMode::DbpA | PipelineMode::DbpC)
    }

    pub fn random_selection(self) -> bool {
        self == PipelineMode::Random
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineMode::Dbp => "dbp",
            PipelineMode::Random => "random",
            PipelineMode::DbpA => "dbp-a",
            PipelineMode::DbpB => "dbp-b",
            PipelineMode::DbpC => "dbp-c",
        }
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}` (expected dbp, random, dbp-a, dbp-b or dbp-c)")))
    }
}

/// Which model supplies the mimic targets in round `r`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherPolicy {
    /// The model entering round `r`, before its surgery.
    #[default]
    PreviousRound,
    /// The un-pruned baseline for every round.
    Original,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Cifar10 { path: PathBuf },
    Synthetic(SyntheticSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Cifar10 {
            path: PathBuf::from("data/cifar-10-batches-bin"),
        }
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Cifar10 { path } => load_cifar10(path),
            DatasetSource::Synthetic(spec) => synthetic_dataset(spec),
        }
    }

    pub fn meta(&self) -> DatasetMeta {
        match self {
            DatasetSource::Cifar10 { .. } => DatasetMeta {
                num_classes: 10,
                input_shape: [3, 32, 32],
            },
            DatasetSource::Synthetic(spec) => DatasetMeta {
                num_classes: spec.num_classes,
                input_shape: spec.image_shape,
            },
        }
    }

    /// Identifies the data a manifest was produced on.
    pub fn id(&self) -> String {
        match self {
            DatasetSource::Cifar10 { .. } => "cifar10".to_string(),
            DatasetSource::Synthetic(s) => format!(
                "synthetic:{}x{:?}:{}/{}:noise{}:seed{}",
                s.num_classes, s.image_shape, s.n_train, s.n_test, s.noise, s.seed
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub global_ratio: f64,
    pub rounds: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            global_ratio: 0.5,
            rounds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub alpha: f64,
    pub teacher: TeacherPolicy,
    /// Overrides the per-round budget of `ceil(baseline epochs / 5)`.
    pub finetune_epochs_per_round: Option<usize>,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            teacher: TeacherPolicy::PreviousRound,
            finetune_epochs_per_round: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub arch: ArchDesc,
    pub dataset: DatasetSource,
    pub seed: u64,
    pub baseline: TrainSchedule,
    pub probe: ProbeConfig,
    pub schedule: ScheduleConfig,
    pub recovery: RecoveryConfig,
    pub mode: PipelineMode,
    pub output_dir: Option<PathBuf>,
    pub baseline_checkpoint: Option<PathBuf>,
    /// Measure batch-size-1 latency of every model when set.
    pub latency: Option<LatencySettings>,
    /// Probe the final model too, so the degraded-block census covers it.
    pub probe_final: bool,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: ArchDesc::resnet(20),
            dataset: DatasetSource::default(),
            seed: 0,
            baseline: TrainSchedule::default(),
            probe: ProbeConfig::default(),
            schedule: ScheduleConfig::default(),
            recovery: RecoveryConfig::default(),
            mode: PipelineMode::Dbp,
            output_dir: None,
            baseline_checkpoint: None,
            latency: None,
            probe_final: true,
            deterministic: true,
        }
    }
}

impl RunConfig {
    /// Fine-tuning epochs for one pruning round.
    pub fn finetune_epochs_per_round(&self) -> usize {
        self.recovery
            .finetune_epochs_per_round
            .unwrap_or_else(|| self.baseline.epochs.div_ceil(5))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
