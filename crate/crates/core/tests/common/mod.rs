//! Reference implementations shared by the integration tests. Everything
//! here is written with plain loops and does not call into `blockprune::ops`.
#![allow(dead_code)]

use std::collections::BTreeSet;

use blockprune::backbone::init_weights;
use blockprune::graph::{BlockKind, BlockGraph, DatasetMeta};
use blockprune::{Tensor, WeightStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;

pub fn meta(classes: usize, c: usize, hw: usize) -> DatasetMeta {
    DatasetMeta {
        num_classes: classes,
        input_shape: [c, hw, hw],
    }
}

pub fn random_input(n: usize, shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * shape.iter().product::<usize>();
    let data = (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(&[n, shape[0], shape[1], shape[2]], data).unwrap()
}

/// Initial weights with non-trivial batch-norm statistics, so surgery
/// mistakes cannot hide behind identity normalization.
pub fn random_weights(graph: &BlockGraph, seed: u64) -> WeightStore {
    let mut w = init_weights(graph, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB17E);
    let names: Vec<String> = w.names().map(str::to_string).collect();
    for name in names {
        let range = if name.ends_with("running_var") || (name.contains("bn") && name.ends_with(".weight")) {
            Some(0.5f32..1.5)
        } else if name.ends_with("running_mean") || (name.contains("bn") && name.ends_with(".bias")) {
            Some(-0.2f32..0.2)
        } else {
            None
        };
        if let Some(range) = range {
            for v in w.get_mut(&name).unwrap().data_mut() {
                *v = rng.gen_range(range.clone());
            }
        }
    }
    w
}

fn param(w: &WeightStore, name: &str) -> Vec<f64> {
    w.get(name).unwrap().data().iter().map(|&v| v as f64).collect()
}

/// Feature map of one image: `[channel][y][x]` flattened per channel.
#[derive(Clone)]
struct Fmap {
    c: Vec<Vec<f64>>,
    h: usize,
    w: usize,
}

fn conv(x: &Fmap, w: &WeightStore, name: &str, k: usize, stride: usize) -> Fmap {
    let t = w.get(name).unwrap();
    let shape = t.shape();
    let (o, i) = (shape[0], shape[1]);
    assert_eq!(i, x.c.len(), "{name}");
    let wt = param(w, name);
    let pad = k / 2;
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut out = vec![vec![0.0; oh * ow]; o];
    for (oc, plane) in out.iter_mut().enumerate() {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0;
                for ic in 0..i {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            acc += wt[((oc * i + ic) * k + ky) * k + kx] * x.c[ic][iy as usize * x.w + ix as usize];
                        }
                    }
                }
                plane[y * ow + xx] = acc;
            }
        }
    }
    Fmap { c: out, h: oh, w: ow }
}

fn bn_relu(x: &Fmap, w: &WeightStore, prefix: &str, relu: bool) -> Fmap {
    let g = param(w, &format!("{prefix}.weight"));
    let b = param(w, &format!("{prefix}.bias"));
    let m = param(w, &format!("{prefix}.running_mean"));
    let v = param(w, &format!("{prefix}.running_var"));
    assert_eq!(g.len(), x.c.len(), "{prefix}");
    let c = x
        .c
        .iter()
        .enumerate()
        .map(|(ch, plane)| {
            plane
                .iter()
                .map(|&p| {
                    let y = (p - m[ch]) / (v[ch] + BN_EPS).sqrt() * g[ch] + b[ch];
                    if relu {
                        y.max(0.0)
                    } else {
                        y
                    }
                })
                .collect()
        })
        .collect();
    Fmap { c, h: x.h, w: x.w }
}

fn head(x: &Fmap, w: &WeightStore) -> Vec<f64> {
    let pooled: Vec<f64> = x.c.iter().map(|p| p.iter().sum::<f64>() / p.len() as f64).collect();
    let fw = param(w, "head.fc.weight");
    let fb = param(w, "head.fc.bias");
    fb.iter()
        .enumerate()
        .map(|(o, &bias)| bias + pooled.iter().enumerate().map(|(i, p)| fw[o * pooled.len() + i] * p).sum::<f64>())
        .collect()
}

fn image(x: &Tensor, n: usize) -> Fmap {
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let item = x.item(n);
    Fmap {
        c: (0..c).map(|ch| item[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).collect()).collect(),
        h,
        w,
    }
}

/// Eval-mode logits of the original dense network with the channels of every
/// unit in `masked` zeroed after each consumer's BN-ReLU. This is what the
/// network computes if those units' outputs are cut out of every concat.
pub fn masked_dense_forward(graph: &BlockGraph, w: &WeightStore, x: &Tensor, masked: &BTreeSet<usize>) -> Vec<Vec<f64>> {
    (0..x.shape()[0])
        .map(|n| {
            let mut feat = Fmap { c: Vec::new(), h: 0, w: 0 };
            let mut owner: Vec<Option<usize>> = Vec::new();
            let zero_masked = |a: &mut Fmap, owner: &[Option<usize>]| {
                for (plane, o) in a.c.iter_mut().zip(owner) {
                    if o.is_some_and(|o| masked.contains(&o)) {
                        plane.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            };
            for b in &graph.blocks {
                let p = &b.name;
                match b.kind {
                    BlockKind::Stem => {
                        feat = conv(&image(x, n), w, &format!("{p}.conv.weight"), 3, 1);
                        owner = vec![None; feat.c.len()];
                    }
                    BlockKind::DenseUnit => {
                        let mut a = bn_relu(&feat, w, &format!("{p}.bn"), true);
                        zero_masked(&mut a, &owner);
                        let y = conv(&a, w, &format!("{p}.conv.weight"), 3, 1);
                        owner.extend(std::iter::repeat_n(Some(b.id), y.c.len()));
                        feat.c.extend(y.c);
                    }
                    BlockKind::Transition => {
                        let mut a = bn_relu(&feat, w, &format!("{p}.bn"), true);
                        zero_masked(&mut a, &owner);
                        let y = conv(&a, w, &format!("{p}.conv.weight"), 1, 1);
                        let (h2, w2) = (y.h / 2, y.w / 2);
                        let c = y
                            .c
                            .iter()
                            .map(|pl| {
                                let mut out = vec![0.0; h2 * w2];
                                for yy in 0..h2 {
                                    for xx in 0..w2 {
                                        let at = |dy: usize, dx: usize| pl[(2 * yy + dy) * y.w + 2 * xx + dx];
                                        out[yy * w2 + xx] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
                                    }
                                }
                                out
                            })
                            .collect::<Vec<_>>();
                        owner = vec![None; c.len()];
                        feat = Fmap { c, h: h2, w: w2 };
                    }
                    BlockKind::ClassifierHead => {
                        let mut a = bn_relu(&feat, w, &format!("{p}.bn"), true);
                        zero_masked(&mut a, &owner);
                        return head(&a, w);
                    }
                    other => panic!("not a dense block: {other:?}"),
                }
            }
            unreachable!("graph has a head")
        })
        .collect()
}

pub fn max_dev(a: &Tensor, b: &[Vec<f64>]) -> f64 {
    let classes = a.shape()[1];
    a.data()
        .chunks(classes)
        .zip(b)
        .flat_map(|(r, s)| r.iter().zip(s).map(|(&x, &y)| (x as f64 - y).abs()))
        .fold(0.0, f64::max)
}

/// FLOPs recomputed from the stored weight shapes and each block's spatial
/// size: `2 · numel(weight) · H_out · W_out` per convolution and
/// `2 · numel(weight)` per linear layer.
pub fn flops_from_weights(graph: &BlockGraph, w: &WeightStore) -> u64 {
    let mut total = 0u64;
    for b in &graph.blocks {
        // Transitions convolve before pooling.
        let [_, h, wd] = if b.kind == BlockKind::Transition { b.in_shape } else { b.out_shape };
        for name in &b.param_names {
            let t = w.get(name).unwrap();
            let numel = t.len() as u64;
            match t.shape().len() {
                4 => total += 2 * numel * (h * wd) as u64,
                2 => total += 2 * numel,
                _ => {}
            }
        }
    }
    total
}

/// Prune-set selection by counting, for each candidate, how many others
/// come strictly before it (smaller contribution, or equal and deeper).
pub fn select_by_rank(entries: &[(usize, f64)], count: usize) -> BTreeSet<usize> {
    entries
        .iter()
        .filter(|&&(id, c)| {
            let before = entries
                .iter()
                .filter(|&&(id2, c2)| c2 < c || (c2 == c && id2 > id))
                .count();
            before < count
        })
        .map(|&(id, _)| id)
        .collect()
}
