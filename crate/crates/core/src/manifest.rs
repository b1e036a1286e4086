//! The JSON record of one pruning run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::EpochLog;
use crate::config::{PipelineMode, RunConfig, TeacherPolicy};
use crate::criterion::{ContributionTable, PruneSchedule};
use crate::error::{Error, Result};
use crate::metrics::{LatencyReport, MetricsSummary};
use crate::probes::ProbeReport;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mimic: bool,
    pub alpha: f64,
    pub teacher: TeacherPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub accuracy: f64,
    pub flops: u64,
    pub block_count: usize,
    pub unit_count: usize,
    pub latency: Option<LatencyReport>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based.
    pub round: usize,
    /// Probe accuracies of the model entering this round.
    pub probe_report: Option<ProbeReport>,
    pub contributions: Option<ContributionTable>,
    pub requested: usize,
    /// Ids in the graph entering this round.
    pub pruned_ids: Vec<usize>,
    pub pruned_names: Vec<String>,
    /// Old id → new id for the blocks that survived.
    pub id_map: BTreeMap<usize, usize>,
    pub finetune_epochs: usize,
    pub accuracy_before_finetune: f64,
    pub model: ModelRecord,
    pub frr: f64,
    pub ar: Option<f64>,
    pub finetune_log: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub mode: PipelineMode,
    pub dataset_id: String,
    pub arch_family: String,
    pub config: RunConfig,
    pub loss: LossConfig,
    pub schedule: PruneSchedule,
    pub baseline: ModelRecord,
    pub rounds: Vec<RoundRecord>,
    /// Probe accuracies of the final model, when requested.
    pub final_probe: Option<ProbeReport>,
    pub summary: MetricsSummary,
}

impl ExperimentManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Accepts either the manifest file or the directory that holds it.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn final_model(&self) -> &ModelRecord {
        self.rounds.last().map(|r| &r.model).unwrap_or(&self.baseline)
    }

    /// Probe report of model `k`, where 0 is the baseline and `k` the model
    /// after round `k`.
    pub fn probe_of_model(&self, k: usize) -> Option<&ProbeReport> {
        if k < self.rounds.len() {
            self.rounds[k].probe_report.as_ref()
        } else if k == self.rounds.len() {
            self.final_probe.as_ref()
        } else {
            None
        }
    }
}
