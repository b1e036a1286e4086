//! FLOPs accounting, latency measurement, speedup ratios and accuracy.
//!
//! FLOPs count 2 per multiply-accumulate over convolution and linear layers
//! only; batch norm, activations, pooling and bias additions are excluded.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::graph::{BlockGraph, LayerSpec};
use crate::network::Network;
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub block: usize,
    pub layer: String,
    pub flops: u64,
}

/// FLOPs of every convolution and linear layer, in forward order.
pub fn layer_flops(graph: &BlockGraph) -> Vec<LayerFlops> {
    let mut out = Vec::new();
    for block in &graph.blocks {
        for layer in graph.layers(block.id) {
            let (name, flops) = match layer {
                LayerSpec::Conv {
                    prefix,
                    in_channels,
                    out_channels,
                    kernel,
                    out_hw: (h, w),
                    ..
                } => (prefix, 2 * (kernel * kernel * in_channels * out_channels * h * w) as u64),
                LayerSpec::Linear {
                    prefix,
                    in_features,
                    out_features,
                } => (prefix, 2 * (in_features * out_features) as u64),
                LayerSpec::BatchNorm { .. } => continue,
            };
            out.push(LayerFlops {
                block: block.id,
                layer: name,
                flops,
            });
        }
    }
    out
}

pub fn block_flops(graph: &BlockGraph, id: usize) -> u64 {
    layer_flops(graph).iter().filter(|l| l.block == id).map(|l| l.flops).sum()
}

/// Forward-pass FLOPs for one image.
pub fn count_flops(graph: &BlockGraph) -> u64 {
    layer_flops(graph).iter().map(|l| l.flops).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Mean wall-clock milliseconds per image.
    pub mean_ms: f64,
    pub std_ms: f64,
    pub n_samples: usize,
    pub batch_size: usize,
    pub warmup: usize,
    pub thread_count: usize,
    pub hardware_note: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySettings {
    pub n: usize,
    pub batch: usize,
    pub warmup: usize,
}

impl Default for LatencySettings {
    fn default() -> Self {
        Self {
            n: 100,
            batch: 1,
            warmup: 10,
        }
    }
}

fn hardware_note() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu}; {} {}; {cores} logical cores", std::env::consts::OS, std::env::consts::ARCH)
}

/// Times `settings.n` forwards of `settings.batch` images after
/// `settings.warmup` untimed ones. Inference is single-threaded.
pub fn measure_latency(model: &Network, settings: LatencySettings) -> Result<LatencyReport> {
    if settings.n == 0 || settings.batch == 0 {
        return Err(Error::InvalidArgument("latency needs n ≥ 1 and batch ≥ 1".into()));
    }
    let [c, h, w] = model.graph().dataset_meta.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = (0..settings.batch * c * h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
    let input = Tensor::from_vec(&[settings.batch, c, h, w], data)?;
    for _ in 0..settings.warmup {
        std::hint::black_box(model.forward(&input)?);
    }
    let mut samples = Vec::with_capacity(settings.n);
    for _ in 0..settings.n {
        let start = Instant::now();
        std::hint::black_box(model.forward(std::hint::black_box(&input))?);
        samples.push(start.elapsed().as_secs_f64() * 1e3 / settings.batch as f64);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / samples.len() as f64;
    Ok(LatencyReport {
        mean_ms: mean.max(f64::MIN_POSITIVE),
        std_ms: var.sqrt(),
        n_samples: settings.n,
        batch_size: settings.batch,
        warmup: settings.warmup,
        thread_count: 1,
        hardware_note: hardware_note(),
    })
}

/// `Time_o / Time_p`.
pub fn acceleration_ratio(time_original_ms: f64, time_pruned_ms: f64) -> Result<f64> {
    if !(time_original_ms > 0.0 && time_pruned_ms > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "inference times must be positive, got {time_original_ms} and {time_pruned_ms}"
        )));
    }
    Ok(time_original_ms / time_pruned_ms)
}

/// `1 − pruned / original`.
pub fn flops_reduction_ratio(flops_original: f64, flops_pruned: f64) -> Result<f64> {
    if !(flops_pruned > 0.0 && flops_original >= flops_pruned) {
        return Err(Error::InvalidArgument(format!(
            "need original ≥ pruned > 0, got {flops_original} and {flops_pruned}"
        )));
    }
    Ok(1.0 - flops_pruned / flops_original)
}

/// Eval-mode top-1 accuracy over the full split.
pub fn evaluate_accuracy(model: &Network, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut correct = 0;
    for (x, labels) in split.chunks(256) {
        let logits = model.forward(&x)?;
        let classes = logits.shape()[1];
        correct += logits
            .data()
            .chunks(classes)
            .zip(&labels)
            .filter(|(row, &l)| ops::argmax(row) == l)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub accuracy: f64,
    pub flops: u64,
    pub frr: f64,
    pub ar: Option<f64>,
    pub mean_ms: Option<f64>,
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ArchDesc, DatasetMeta};

    #[test]
    fn ratio_examples() {
        assert!((acceleration_ratio(126.97, 79.35).unwrap() - 1.60).abs() < 5e-3);
        assert_eq!(acceleration_ratio(100.0, 100.0).unwrap(), 1.0);
        assert_eq!(acceleration_ratio(100.0, 50.0).unwrap(), 2.0);
        assert!(acceleration_ratio(0.0, 1.0).is_err());
        assert_eq!(flops_reduction_ratio(100.0, 50.0).unwrap(), 0.5);
        assert_eq!(flops_reduction_ratio(7.0, 7.0).unwrap(), 0.0);
        assert!((flops_reduction_ratio(1000.0, 465.9).unwrap() - 0.5341).abs() < 1e-12);
        assert!(flops_reduction_ratio(50.0, 100.0).is_err());
    }

    #[test]
    fn stem_plus_head_flops() {
        let arch = ArchDesc::Dense {
            units_per_stage: vec![0],
            growth: 12,
            stem_channels: 16,
        };
        let meta = DatasetMeta {
            num_classes: 10,
            input_shape: [3, 32, 32],
        };
        let g = BlockGraph::from_arch(&arch, meta).unwrap();
        let stem = 2 * 9 * 3 * 16 * 32 * 32;
        let head = 2 * 16 * 10;
        assert_eq!(count_flops(&g), stem + head);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1., 2., 3.], &[10., 20., 30.]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1., 2., 3.], &[3., 2., 1.]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1., 2., 3.], &[5., 5., 5.]), 0.0);
    }

    #[test]
    fn zero_samples_is_an_error() {
        let meta = DatasetMeta {
            num_classes: 2,
            input_shape: [3, 8, 8],
        };
        let g = BlockGraph::from_arch(&ArchDesc::Chain { units: 1, width: 4 }, meta).unwrap();
        let net = Network::new(&g, &crate::backbone::init_weights(&g, 0)).unwrap();
        let settings = LatencySettings { n: 0, ..Default::default() };
        assert!(measure_latency(&net, settings).is_err());
    }
}
