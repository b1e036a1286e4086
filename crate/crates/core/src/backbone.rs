//! Weight initialization and the supervised training loop shared by
//! baseline training and fine-tuning.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{augment, Augmentation, Dataset};
use crate::error::{Error, Result};
use crate::graph::{BlockGraph, LayerSpec, ParamRole};
use crate::metrics::evaluate_accuracy;
use crate::network::Network;
use crate::recovery::loss::cross_entropy_with_grad;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

/// Deterministic initializer: fan-out-scaled normal for convolutions,
/// unit scale / zero shift for batch norm, uniform ±1/√fan_in for the head.
pub fn init_weights(graph: &BlockGraph, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for layer in (0..graph.len()).flat_map(|i| graph.layers(i)) {
        let fan_in = match &layer {
            LayerSpec::Linear { in_features, .. } => *in_features,
            _ => 1,
        };
        for spec in layer.params() {
            let numel: usize = spec.shape.iter().product();
            let data: Vec<f32> = match spec.role {
                ParamRole::ConvWeight => {
                    let fan_out = spec.shape[0] * spec.shape[2] * spec.shape[3];
                    let normal = Normal::new(0.0, (2.0 / fan_out as f32).sqrt()).expect("positive std");
                    (0..numel).map(|_| normal.sample(&mut rng)).collect()
                }
                ParamRole::LinearWeight | ParamRole::LinearBias => {
                    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                    let uniform = Uniform::new_inclusive(-bound, bound);
                    (0..numel).map(|_| uniform.sample(&mut rng)).collect()
                }
                ParamRole::BnScale | ParamRole::BnVar => vec![1.0; numel],
                ParamRole::BnShift | ParamRole::BnMean => vec![0.0; numel],
            };
            store.insert(spec.name, Tensor::from_vec(&spec.shape, data).expect("spec shape"));
        }
    }
    store
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    /// `(first epoch, learning rate)` pairs; epochs are zero-based.
    pub lr_milestones: Vec<(usize, f32)>,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub augmentation: Augmentation,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr_milestones: vec![(0, 0.1), (30, 0.01), (45, 0.001)],
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            augmentation: Augmentation::PadCropFlip,
        }
    }
}

impl TrainSchedule {
    /// Constant 0.01, dropped ×0.1 at two thirds of the budget.
    pub fn finetune(epochs: usize, batch_size: usize, augmentation: Augmentation) -> Self {
        let drop = 2 * epochs / 3;
        let mut lr_milestones = vec![(0, 0.01)];
        if drop > 0 {
            lr_milestones.push((drop, 0.001));
        }
        Self {
            epochs,
            lr_milestones,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size,
            augmentation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSchedule(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs ≥ 1 required");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        match self.lr_milestones.first() {
            Some((0, _)) => {}
            _ => return bad("learning-rate milestones must start at epoch 0"),
        }
        for (e, lr) in &self.lr_milestones {
            if !(lr.is_finite() && *lr > 0.0) {
                return bad(&format!("learning rate at epoch {e} must be positive"));
            }
        }
        for pair in self.lr_milestones.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return bad("milestone epochs must be strictly increasing");
            }
            if pair[1].1 > pair[0].1 {
                return bad("learning rates must be non-increasing across milestones");
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight decay be non-negative");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        self.lr_milestones
            .iter()
            .take_while(|(e, _)| *e <= epoch)
            .last()
            .map(|(_, lr)| *lr)
            .unwrap_or(self.lr_milestones[0].1)
    }
}

/// SGD with momentum and L2 weight decay (PyTorch update convention).
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    buffers: HashMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: HashMap::new(),
        }
    }

    pub fn step(&mut self, net: &mut Network, lr: f32) {
        let (momentum, wd) = (self.momentum, self.weight_decay);
        let buffers = &mut self.buffers;
        net.for_each_param(|p| {
            let buf = buffers.entry(p.name).or_insert_with(|| vec![0.0; p.value.len()]);
            for ((w, g), v) in p.value.iter_mut().zip(p.grad.iter()).zip(buf.iter_mut()) {
                let d = g + wd * *w;
                *v = momentum * *v + d;
                *w -= lr * *v;
            }
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub lr: f32,
}

pub fn write_epoch_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,test_accuracy,lr\n");
    for row in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            row.epoch, row.train_loss, row.test_accuracy, row.lr
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Loss callback: `(augmented inputs, labels, student logits) -> (mean loss, dloss/dlogits)`.
pub type Objective<'a> = dyn FnMut(&Tensor, &[usize], &Tensor) -> Result<(f64, Tensor)> + 'a;

/// Runs `schedule` over `dataset.train`, logging test accuracy after each epoch.
/// Data order and augmentation depend only on `seed` and the epoch index.
pub fn fit(
    net: &mut Network,
    dataset: &Dataset,
    schedule: &TrainSchedule,
    seed: u64,
    objective: &mut Objective<'_>,
) -> Result<Vec<EpochLog>> {
    schedule.validate()?;
    let mut sgd = Sgd::new(schedule.momentum, schedule.weight_decay);
    let mut log = Vec::with_capacity(schedule.epochs);
    let n = dataset.train.len();
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for idx in order.chunks(schedule.batch_size) {
            let (x, labels) = dataset.train.batch(idx);
            let x = augment(&x, schedule.augmentation, &mut rng);
            let (logits, tape) = net.forward_train(&x)?;
            if !logits.all_finite() {
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
            let (loss, dlogits) = objective(&x, &labels, &logits)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            net.zero_grad();
            net.backward(tape, &dlogits);
            sgd.step(net, lr);
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        let test_accuracy = evaluate_accuracy(net, &dataset.test)?;
        let train_loss = loss_sum / seen.max(1) as f64;
        info!("epoch {epoch}: lr {lr} loss {train_loss:.4} test acc {test_accuracy:.4}");
        log.push(EpochLog {
            epoch,
            train_loss,
            test_accuracy,
            lr,
        });
    }
    Ok(log)
}

pub(crate) fn check_dataset(graph: &BlockGraph, dataset: &Dataset) -> Result<()> {
    let meta = graph.dataset_meta;
    if dataset.num_classes != meta.num_classes || dataset.image_shape() != meta.input_shape {
        return Err(Error::InvalidArgument(format!(
            "dataset ({} classes, {:?}) does not match graph ({} classes, {:?})",
            dataset.num_classes,
            dataset.image_shape(),
            meta.num_classes,
            meta.input_shape
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub weights: WeightStore,
    pub accuracy: f64,
    pub log: Vec<EpochLog>,
}

/// Cross-entropy training of the un-pruned model.
pub fn train_baseline(
    graph: &BlockGraph,
    weights: &WeightStore,
    dataset: &Dataset,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<BaselineOutcome> {
    schedule.validate()?;
    check_dataset(graph, dataset)?;
    let mut net = Network::new(graph, weights)?;
    let log = fit(&mut net, dataset, schedule, seed, &mut |_x, labels, logits| {
        cross_entropy_with_grad(logits, labels)
    })?;
    let accuracy = log.last().map(|l| l.test_accuracy).unwrap_or_default();
    Ok(BaselineOutcome {
        weights: net.to_weights(),
        accuracy,
        log,
    })
}
