//! Linear probes on the output of every block of a frozen backbone.
//!
//! The classifier head's output (the logits) gets a probe as well so every
//! block id has an accuracy; the stem probe anchors the first unit's
//! contribution.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::BlockGraph;
use crate::network::Network;
use crate::ops;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Flatten,
    GlobalAveragePool,
}

impl Reduction {
    pub fn feature_dim(self, shape: [usize; 3]) -> usize {
        match self {
            Reduction::Flatten => shape.iter().product(),
            Reduction::GlobalAveragePool => shape[0],
        }
    }

    /// Reduces a block output (`[n, c, h, w]`, or `[n, d]` for logits) to `[n, dim]`.
    fn apply(self, x: &Tensor) -> Tensor {
        match (self, x.shape().len()) {
            (_, 2) => x.clone(),
            (Reduction::Flatten, _) => {
                let n = x.shape()[0];
                x.clone().reshape(&[n, x.item_len()]).expect("flatten")
            }
            (Reduction::GlobalAveragePool, _) => ops::global_avg_pool(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub reduction: Reduction,
    /// Learning rate of each epoch; its length is the epoch count.
    pub epoch_lrs: Vec<f32>,
    pub momentum: f32,
    pub batch_size: usize,
    /// Largest accepted probe input dimension.
    pub feature_cap: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            reduction: Reduction::Flatten,
            epoch_lrs: vec![0.1, 0.01, 0.001],
            momentum: 0.9,
            batch_size: 128,
            feature_cap: 1 << 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub block: usize,
    /// `[num_classes, feature_dim]`.
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSet {
    pub reduction: Reduction,
    pub probes: Vec<Probe>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracies: BTreeMap<usize, f64>,
    pub eval_split_size: usize,
    pub seed: u64,
    pub reduction: Reduction,
}

impl ProbeReport {
    pub fn accuracy(&self, id: usize) -> Result<f64> {
        self.accuracies.get(&id).copied().ok_or(Error::MissingBlock(id))
    }
}

/// Zero-initialized probes, one per block.
pub fn attach_probes(graph: &BlockGraph, reduction: Reduction, feature_cap: usize) -> Result<ProbeSet> {
    let classes = graph.dataset_meta.num_classes;
    let mut probes = Vec::with_capacity(graph.len());
    for block in &graph.blocks {
        let dim = reduction.feature_dim(block.out_shape);
        if dim > feature_cap {
            return Err(Error::FeatureCap {
                block: block.id,
                dim,
                cap: feature_cap,
            });
        }
        probes.push(Probe {
            block: block.id,
            weight: Tensor::zeros(&[classes, dim]),
            bias: vec![0.0; classes],
        });
    }
    Ok(ProbeSet { reduction, probes })
}

fn check_probe_set(graph: &BlockGraph, probes: &ProbeSet) -> Result<()> {
    let classes = graph.dataset_meta.num_classes;
    if probes.probes.len() != graph.len() {
        return Err(Error::InvalidArgument(format!(
            "{} probes for {} blocks",
            probes.probes.len(),
            graph.len()
        )));
    }
    for (probe, block) in probes.probes.iter().zip(&graph.blocks) {
        let dim = probes.reduction.feature_dim(block.out_shape);
        if probe.block != block.id || probe.weight.shape() != [classes, dim] {
            return Err(Error::ShapeMismatch {
                expected: vec![classes, dim],
                got: probe.weight.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Trains every probe on the un-augmented training split with the backbone
/// frozen in eval mode. Each batch's block outputs are computed once and
/// shared by all probes.
pub fn train_probes(
    graph: &BlockGraph,
    weights: &WeightStore,
    probes: &ProbeSet,
    dataset: &Dataset,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeSet> {
    check_probe_set(graph, probes)?;
    if cfg.batch_size == 0 || cfg.epoch_lrs.is_empty() {
        return Err(Error::InvalidArgument("probe batch size and epochs must be positive".into()));
    }
    let net = Network::new(graph, weights)?;
    let mut trained = probes.clone();
    let mut velocity: Vec<(Vec<f32>, Vec<f32>)> = trained
        .probes
        .iter()
        .map(|p| (vec![0.0; p.weight.len()], vec![0.0; p.bias.len()]))
        .collect();
    let n = dataset.train.len();
    for (epoch, &lr) in cfg.epoch_lrs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xA24B_AED4_963E_E407).wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let (x, labels) = dataset.train.batch(idx);
            let outputs = net.block_outputs(&x)?;
            for ((probe, vel), out) in trained.probes.iter_mut().zip(&mut velocity).zip(&outputs) {
                let feats = probes.reduction.apply(out);
                let logits = ops::linear(&feats, &probe.weight, &probe.bias);
                let (loss, dlogits) = crate::recovery::loss::cross_entropy_with_grad(&logits, &labels)?;
                if !loss.is_finite() {
                    return Err(Error::ProbeDiverged { block: probe.block });
                }
                let mut dw = vec![0.0; probe.weight.len()];
                let mut db = vec![0.0; probe.bias.len()];
                ops::linear_backward(&feats, &probe.weight, &dlogits, &mut dw, &mut db);
                for ((w, g), v) in probe.weight.data_mut().iter_mut().zip(&dw).zip(&mut vel.0) {
                    *v = cfg.momentum * *v + g;
                    *w -= lr * *v;
                }
                for ((b, g), v) in probe.bias.iter_mut().zip(&db).zip(&mut vel.1) {
                    *v = cfg.momentum * *v + g;
                    *b -= lr * *v;
                }
                if !probe.weight.all_finite() {
                    return Err(Error::ProbeDiverged { block: probe.block });
                }
            }
        }
    }
    Ok(trained)
}

/// Top-1 accuracy of every probe over the whole split.
pub fn eval_probes(
    graph: &BlockGraph,
    weights: &WeightStore,
    probes: &ProbeSet,
    split: &Split,
    seed: u64,
) -> Result<ProbeReport> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    check_probe_set(graph, probes)?;
    let net = Network::new(graph, weights)?;
    let mut correct = vec![0usize; graph.len()];
    for (x, labels) in split.chunks(256) {
        let outputs = net.block_outputs(&x)?;
        for ((probe, out), hits) in probes.probes.iter().zip(&outputs).zip(&mut correct) {
            let logits = ops::linear(&probes.reduction.apply(out), &probe.weight, &probe.bias);
            let classes = logits.shape()[1];
            *hits += logits
                .data()
                .chunks(classes)
                .zip(&labels)
                .filter(|(row, &l)| ops::argmax(row) == l)
                .count();
        }
    }
    let accuracies = graph
        .blocks
        .iter()
        .zip(&correct)
        .map(|(b, &c)| (b.id, c as f64 / split.len() as f64))
        .collect();
    Ok(ProbeReport {
        accuracies,
        eval_split_size: split.len(),
        seed,
        reduction: probes.reduction,
    })
}

/// Attach, train and evaluate in one call; evaluation uses the test split.
pub fn probe_report(
    graph: &BlockGraph,
    weights: &WeightStore,
    dataset: &Dataset,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    let probes = attach_probes(graph, cfg.reduction, cfg.feature_cap)?;
    let trained = train_probes(graph, weights, &probes, dataset, cfg, seed)?;
    eval_probes(graph, weights, &trained, &dataset.test, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_weights;
    use crate::data::{synthetic_dataset, SyntheticSpec};
    use crate::graph::{ArchDesc, DatasetMeta};

    fn cifar_meta() -> DatasetMeta {
        DatasetMeta {
            num_classes: 10,
            input_shape: [3, 32, 32],
        }
    }

    #[test]
    fn flatten_probe_shape_counts_every_activation() {
        let g = BlockGraph::from_arch(&ArchDesc::resnet(20), cifar_meta()).unwrap();
        let set = attach_probes(&g, Reduction::Flatten, 1 << 16).unwrap();
        assert_eq!(set.probes.len(), g.len());
        assert_eq!(set.probes[1].weight.shape(), &[10, 16 * 32 * 32]);
        let pooled = attach_probes(&g, Reduction::GlobalAveragePool, 1 << 16).unwrap();
        assert_eq!(pooled.probes[1].weight.shape(), &[10, 16]);
        assert!(set.probes.iter().all(|p| p.weight.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn dense_probe_sees_the_running_concatenation() {
        let arch = ArchDesc::Dense {
            units_per_stage: vec![3],
            growth: 5,
            stem_channels: 8,
        };
        let g = BlockGraph::from_arch(&arch, cifar_meta()).unwrap();
        let set = attach_probes(&g, Reduction::Flatten, 1 << 16).unwrap();
        for j in 1..=3 {
            assert_eq!(set.probes[j].weight.shape()[1], (8 + 5 * j) * 32 * 32);
        }
    }

    #[test]
    fn feature_cap_is_enforced() {
        let g = BlockGraph::from_arch(&ArchDesc::resnet(20), cifar_meta()).unwrap();
        assert!(matches!(
            attach_probes(&g, Reduction::Flatten, 1000),
            Err(Error::FeatureCap { block: 0, .. })
        ));
    }

    #[test]
    fn empty_split_is_an_error() {
        let meta = DatasetMeta {
            num_classes: 2,
            input_shape: [3, 8, 8],
        };
        let g = BlockGraph::from_arch(&ArchDesc::Chain { units: 1, width: 4 }, meta).unwrap();
        let w = init_weights(&g, 0);
        let probes = attach_probes(&g, Reduction::Flatten, 1 << 16).unwrap();
        let empty = Split {
            images: Tensor::zeros(&[0, 3, 8, 8]),
            labels: vec![],
        };
        assert!(matches!(eval_probes(&g, &w, &probes, &empty, 0), Err(Error::EmptySplit)));
    }

    #[test]
    fn training_leaves_backbone_untouched_and_is_deterministic() {
        let spec = SyntheticSpec::new(3, 90, 45, [3, 8, 8], 5);
        let ds = synthetic_dataset(&spec).unwrap();
        let meta = DatasetMeta {
            num_classes: 3,
            input_shape: [3, 8, 8],
        };
        let g = BlockGraph::from_arch(&ArchDesc::Residual { depth: 8, width: 4 }, meta).unwrap();
        let w = init_weights(&g, 2);
        let before = w.digest();
        let cfg = ProbeConfig {
            batch_size: 32,
            ..Default::default()
        };
        let a = probe_report(&g, &w, &ds, &cfg, 4).unwrap();
        assert_eq!(w.digest(), before);
        let b = probe_report(&g, &w, &ds, &cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.accuracies.len(), g.len());
        assert!(a.accuracies.values().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
