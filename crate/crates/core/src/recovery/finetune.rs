use serde::{Deserialize, Serialize};

use crate::backbone::{check_dataset, fit, EpochLog, TrainSchedule};
use crate::data::{Augmentation, Dataset};
use crate::error::{Error, Result};
use crate::graph::BlockGraph;
use crate::network::Network;
use crate::recovery::loss::{cross_entropy_with_grad, mimic_ce_with_grad};
use crate::weights::WeightStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub augmentation: Augmentation,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub weights: WeightStore,
    pub log: Vec<EpochLog>,
}

/// Trains the student with the mimic + cross-entropy objective. Teacher
/// logits come from an eval-mode forward of the teacher on the same
/// augmented batch; the teacher itself is never updated.
pub fn finetune(
    student: (&BlockGraph, &WeightStore),
    teacher: (&BlockGraph, &WeightStore),
    dataset: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let (s_graph, s_weights) = student;
    let (t_graph, t_weights) = teacher;
    if s_graph.dataset_meta.num_classes != t_graph.dataset_meta.num_classes {
        return Err(Error::InvalidArgument(
            "teacher and student disagree on the number of classes".into(),
        ));
    }
    check_dataset(s_graph, dataset)?;
    if cfg.epochs == 0 {
        return Ok(FinetuneOutcome {
            weights: s_weights.clone(),
            log: Vec::new(),
        });
    }
    let teacher_net = Network::new(t_graph, t_weights)?;
    let mut net = Network::new(s_graph, s_weights)?;
    let schedule = TrainSchedule::finetune(cfg.epochs, cfg.batch_size, cfg.augmentation);
    let alpha = cfg.alpha;
    let log = fit(&mut net, dataset, &schedule, cfg.seed, &mut |x, labels, logits| {
        if alpha == 0.0 {
            return cross_entropy_with_grad(logits, labels);
        }
        let teacher_logits = teacher_net.forward(x)?;

        mimic_ce_with_grad(&teacher_logits, logits, labels, alpha)
    })?;
    Ok(FinetuneOutcome {
        weights: net.to_weights(),
        log,
    })
}
