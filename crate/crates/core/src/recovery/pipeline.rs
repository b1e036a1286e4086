//! Probe, select, prune and fine-tune, one round after another.

use std::collections::BTreeSet;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TeacherPolicy};
use crate::criterion::{contributions, select_prune_set, PruneSchedule};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{prunable_blocks, prune_blocks};
use crate::manifest::{ExperimentManifest, LossConfig, ModelRecord, RoundRecord, MANIFEST_FILE};
use crate::metrics::{acceleration_ratio, count_flops, evaluate_accuracy, flops_reduction_ratio, measure_latency, MetricsSummary};
use crate::network::Network;
use crate::probes::probe_report;
use crate::recovery::finetune::{finetune, FinetuneConfig};

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub manifest: ExperimentManifest,
    pub model: Checkpoint,
}

/// Loads the baseline checkpoint and dataset named in `config` and runs it.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutcome> {
    let path = config
        .baseline_checkpoint
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("a baseline checkpoint is required".into()))?;
    let baseline = Checkpoint::load(path)?;
    let dataset = config.dataset.load()?;
    run_pipeline_with(&baseline, &dataset, config)
}

fn model_record(ckpt: &Checkpoint, dataset: &Dataset, config: &RunConfig, dir: Option<&Path>) -> Result<ModelRecord> {
    let net = Network::new(&ckpt.graph, &ckpt.weights)?;
    let latency = match config.latency {
        Some(s) => Some(measure_latency(&net, s)?),
        None => None,
    };
    Ok(ModelRecord {
        accuracy: evaluate_accuracy(&net, &dataset.test)?,
        flops: count_flops(&ckpt.graph),
        block_count: ckpt.graph.len(),
        unit_count: ckpt.graph.unit_count(),
        latency,
        checkpoint: dir.map(Path::to_path_buf),
    })
}

/// Runs the configured mode on an in-memory baseline. Round checkpoints
/// and the manifest are written when `config.output_dir` is set.
pub fn run_pipeline_with(baseline: &Checkpoint, dataset: &Dataset, config: &RunConfig) -> Result<PipelineOutcome> {
    let mode = config.mode;
    baseline.graph.validate()?;
    let n_prunable = prunable_blocks(&baseline.graph).len();
    let schedule = if mode.iterative() {
        PruneSchedule::new(n_prunable, config.schedule.global_ratio, config.schedule.rounds)?
    } else {
        PruneSchedule::one_shot(n_prunable, config.schedule.global_ratio)?
    };
    let per_round = config.finetune_epochs_per_round();
    // One-shot modes get the whole iterative budget in their single round.
    let finetune_epochs = if mode.iterative() { per_round } else { per_round * config.schedule.rounds };
    let alpha = if mode.uses_mimic() { config.recovery.alpha } else { 0.0 };
    let out_dir = config.output_dir.as_deref();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let base_record = model_record(baseline, dataset, config, config.baseline_checkpoint.as_deref())?;
    info!(
        "{mode}: baseline acc {:.4}, {} FLOPs, schedule {:?}",
        base_record.accuracy, base_record.flops, schedule.round_counts
    );

    let mut current = baseline.clone();
    let mut rounds = Vec::with_capacity(schedule.round_counts.len());
    for (r, &requested) in schedule.round_counts.iter().enumerate() {
        let round = r + 1;
        let record = run_round(
            &current,
            baseline,
            dataset,
            config,
            round,
            requested,
            finetune_epochs,
            alpha,
            &base_record,
        )
        .map_err(|e| e.in_round(round))?;
        let (next, record) = record;
        if let Some(dir) = out_dir {
            let ckpt_dir = dir.join(format!("round_{round}"));
            next.save(&ckpt_dir).map_err(|e| e.in_round(round))?;
        }
        current = next;
        rounds.push(record);
    }
    if let Some(dir) = out_dir {
        for rec in &mut rounds {
            rec.model.checkpoint = Some(dir.join(format!("round_{}", rec.round)));
        }
    }

    let final_probe = if config.probe_final {
        Some(probe_report(
            &current.graph,
            &current.weights,
            dataset,
            &config.probe,
            config.seed.wrapping_add(rounds.len() as u64 + 1),
        )?)
    } else {
        None
    };

    let final_model = rounds.last().map(|r| r.model.clone()).unwrap_or_else(|| base_record.clone());
    let summary = MetricsSummary {
        accuracy: final_model.accuracy,
        flops: final_model.flops,
        frr: flops_reduction_ratio(base_record.flops as f64, final_model.flops as f64)?,
        ar: match (&base_record.latency, &final_model.latency) {
            (Some(b), Some(p)) => Some(acceleration_ratio(b.mean_ms, p.mean_ms)?),
            _ => None,
        },
        mean_ms: final_model.latency.as_ref().map(|l| l.mean_ms),
    };
    let manifest = ExperimentManifest {
        mode,
        dataset_id: config.dataset.id(),
        arch_family: config.arch.family().to_string(),
        config: config.clone(),
        loss: LossConfig {
            mimic: mode.uses_mimic(),
            alpha,
            teacher: config.recovery.teacher,
        },
        schedule,
        baseline: base_record,
        rounds,
        final_probe,
        summary,
    };
    if let Some(dir) = out_dir {
        manifest.save(&dir.join(MANIFEST_FILE))?;
    }
    Ok(PipelineOutcome {
        manifest,
        model: current,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_round(
    current: &Checkpoint,
    baseline: &Checkpoint,
    dataset: &Dataset,
    config: &RunConfig,
    round: usize,
    requested: usize,
    finetune_epochs: usize,
    alpha: f64,
    base_record: &ModelRecord,
) -> Result<(Checkpoint, RoundRecord)> {
    let mode = config.mode;
    let prunable = prunable_blocks(&current.graph);
    let round_seed = config.seed.wrapping_add(round as u64);

    let (probe, table, selected) = if mode.random_selection() {
        if requested > prunable.len() {
            return Err(Error::CountTooLarge {
                requested,
                available: prunable.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(round_seed ^ 0x5EED_0000_0000_0000);
        let mut candidates: Vec<usize> = prunable.iter().copied().collect();
        candidates.shuffle(&mut rng);
        let chosen: BTreeSet<usize> = candidates.into_iter().take(requested).collect();
        (None, None, chosen)
    } else {
        let report = probe_report(&current.graph, &current.weights, dataset, &config.probe, round_seed)?;
        let table = contributions(&report, &prunable)?;
        let chosen = select_prune_set(&table, requested)?;
        (Some(report), Some(table), chosen)
    };

    let pruned_names = selected.iter().map(|&id| current.graph.blocks[id].name.clone()).collect();
    let pruned = prune_blocks(&current.graph, &current.weights, &selected)?;
    let student = Checkpoint::new(pruned.graph, pruned.weights);
    let accuracy_before_finetune = evaluate_accuracy(&Network::new(&student.graph, &student.weights)?, &dataset.test)?;

    let epochs = if selected.is_empty() { 0 } else { finetune_epochs };
    let teacher = match config.recovery.teacher {
        TeacherPolicy::PreviousRound => current,
        TeacherPolicy::Original => baseline,
    };
    let ft_cfg = FinetuneConfig {
        epochs,
        alpha,
        batch_size: config.baseline.batch_size,
        augmentation: config.baseline.augmentation,
        seed: config.seed.wrapping_mul(1000).wrapping_add(round as u64),
    };
    let outcome = finetune(
        (&student.graph, &student.weights),
        (&teacher.graph, &teacher.weights),
        dataset,
        &ft_cfg,
    )?;
    let tuned = Checkpoint::new(student.graph, outcome.weights);
    let model = model_record(&tuned, dataset, config, None)?;
    let frr = flops_reduction_ratio(base_record.flops as f64, model.flops as f64)?;
    let ar = match (&base_record.latency, &model.latency) {
        (Some(b), Some(p)) => Some(acceleration_ratio(b.mean_ms, p.mean_ms)?),
        _ => None,
    };
    info!(
        "round {round}: pruned {:?}, acc {:.4} -> {:.4}, FRR {:.4}",
        selected, accuracy_before_finetune, model.accuracy, frr
    );
    let record = RoundRecord {
        round,
        probe_report: probe,
        contributions: table,
        requested,
        pruned_ids: selected.into_iter().collect(),
        pruned_names,
        id_map: pruned.id_map,
        finetune_epochs: epochs,
        accuracy_before_finetune,
        model,
        frr,
        ar,
        finetune_log: outcome.log,
    };
    Ok((tuned, record))
}
