//! Executable form of a [`BlockGraph`] plus its [`WeightStore`].
//!
//! The network owns copies of its tensors and their gradients so the
//! training loop can update them in place; [`Network::to_weights`] exports
//! them back into the container representation.

use crate::error::{Error, Result};
use crate::graph::{BlockGraph, BlockKind, Topology};
use crate::ops::{self, BnCache};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct Conv {
    name: String,
    w: Tensor,
    dw: Vec<f32>,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn load(weights: &WeightStore, prefix: &str, stride: usize) -> Result<Self> {
        let name = format!("{prefix}.weight");
        let w = weights.get(&name)?.clone();
        let pad = w.shape()[2] / 2;
        Ok(Self {
            dw: vec![0.0; w.len()],
            name,
            w,
            stride,
            pad,
        })
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        ops::conv2d(x, &self.w, self.stride, self.pad)
    }

    fn backward(&mut self, x: &Tensor, dy: &Tensor, want_dx: bool) -> Option<Tensor> {
        ops::conv2d_backward(x, &self.w, dy, self.stride, self.pad, &mut self.dw, want_dx)
    }
}

#[derive(Clone, Debug)]
struct BatchNorm {
    prefix: String,
    gamma: Vec<f32>,
    beta: Vec<f32>,
    mean: Vec<f32>,
    var: Vec<f32>,
    dgamma: Vec<f32>,
    dbeta: Vec<f32>,
}

impl BatchNorm {
    fn load(weights: &WeightStore, prefix: &str) -> Result<Self> {
        let get = |s: &str| -> Result<Vec<f32>> { Ok(weights.get(&format!("{prefix}.{s}"))?.data().to_vec()) };
        let gamma = get("weight")?;
        let c = gamma.len();
        Ok(Self {
            prefix: prefix.to_string(),
            beta: get("bias")?,
            mean: get("running_mean")?,
            var: get("running_var")?,
            gamma,
            dgamma: vec![0.0; c],
            dbeta: vec![0.0; c],
        })
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> (Tensor, Option<BnCache>) {
        match mode {
            Mode::Eval => (self.eval(x), None),
            Mode::Train => {
                let (y, cache) = ops::batch_norm_train(x, &self.gamma, &self.beta, &mut self.mean, &mut self.var);
                (y, Some(cache))
            }
        }
    }

    fn eval(&self, x: &Tensor) -> Tensor {
        ops::batch_norm_eval(x, &self.gamma, &self.beta, &self.mean, &self.var)
    }

    fn backward(&mut self, dy: &Tensor, cache: &BnCache) -> Tensor {
        ops::batch_norm_backward(dy, cache, &self.gamma, &mut self.dgamma, &mut self.dbeta)
    }
}

#[derive(Clone, Debug)]
struct Linear {
    prefix: String,
    w: Tensor,
    b: Vec<f32>,
    dw: Vec<f32>,
    db: Vec<f32>,
}

impl Linear {
    fn load(weights: &WeightStore, prefix: &str) -> Result<Self> {
        let w = weights.get(&format!("{prefix}.weight"))?.clone();
        let b = weights.get(&format!("{prefix}.bias"))?.data().to_vec();
        Ok(Self {
            prefix: prefix.to_string(),
            dw: vec![0.0; w.len()],
            db: vec![0.0; b.len()],
            w,
            b,
        })
    }
}

#[derive(Clone, Debug)]
enum Unit {
    Stem {
        conv: Conv,
        bn: Option<BatchNorm>,
    },
    Chain {
        conv: Conv,
        bn: BatchNorm,
    },
    Residual {
        conv1: Conv,
        bn1: BatchNorm,
        conv2: Conv,
        bn2: BatchNorm,
        shortcut: Option<(Conv, BatchNorm)>,
    },
    Dense {
        bn: BatchNorm,
        conv: Conv,
    },
    Transition {
        bn: BatchNorm,
        conv: Conv,
    },
    Head {
        bn: Option<BatchNorm>,
        fc: Linear,
    },
}

/// Activations a unit keeps for its backward pass.
enum Cache {
    Stem {
        x: Tensor,
        bn: Option<(BnCache, Tensor)>,
    },
    Chain {
        x: Tensor,
        bn: BnCache,
        out: Tensor,
    },
    Residual {
        x: Tensor,
        bn1: BnCache,
        r1: Tensor,
        bn2: BnCache,
        shortcut_bn: Option<BnCache>,
        out: Tensor,
    },
    Dense {
        in_channels: usize,
        bn: BnCache,
        r: Tensor,
    },
    Transition {
        bn: BnCache,
        r: Tensor,
        conv_shape: Vec<usize>,
    },
    Head {
        bn: Option<(BnCache, Tensor)>,
        pooled_from: Vec<usize>,
        pooled: Tensor,
    },
}

/// Per-batch record of the forward pass, consumed by [`Network::backward`].
pub struct Tape {
    caches: Vec<Cache>,
}

fn relu(mut t: Tensor) -> Tensor {
    ops::relu_inplace(&mut t);
    t
}

impl Unit {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> (Tensor, Option<Cache>) {
        let train = mode == Mode::Train;
        match self {
            Unit::Stem { conv, bn } => {
                let a = conv.forward(x);
                match bn {
                    Some(bn) => {
                        let (b, c) = bn.forward(&a, mode);
                        let out = relu(b);
                        let cache = c.map(|c| Cache::Stem {
                            x: x.clone(),
                            bn: Some((c, out.clone())),
                        });
                        (out, cache)
                    }
                    None => (a, train.then(|| Cache::Stem { x: x.clone(), bn: None })),
                }
            }
            Unit::Chain { conv, bn } => {
                let (b, c) = bn.forward(&conv.forward(x), mode);
                let out = relu(b);
                let cache = c.map(|bn| Cache::Chain {
                    x: x.clone(),
                    bn,
                    out: out.clone(),
                });
                (out, cache)
            }
            Unit::Residual {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            } => {
                let (b1, c1) = bn1.forward(&conv1.forward(x), mode);
                let r1 = relu(b1);
                let (mut s, c2) = bn2.forward(&conv2.forward(&r1), mode);
                let shortcut_bn = match shortcut {
                    Some((conv, bn)) => {
                        let (sc, c) = bn.forward(&conv.forward(x), mode);
                        ops::add_inplace(&mut s, &sc);
                        c
                    }
                    None => {
                        ops::add_inplace(&mut s, x);
                        None
                    }
                };
                let out = relu(s);
                let cache = train.then(|| Cache::Residual {
                    x: x.clone(),
                    bn1: c1.expect("train mode"),
                    r1,
                    bn2: c2.expect("train mode"),
                    shortcut_bn,
                    out: out.clone(),
                });
                (out, cache)
            }
            Unit::Dense { bn, conv } => {
                let (b, c) = bn.forward(x, mode);
                let r = relu(b);
                let y = conv.forward(&r);
                let out = ops::concat_channels(x, &y);
                let cache = c.map(|bn| Cache::Dense {
                    in_channels: x.shape()[1],
                    bn,
                    r,
                });
                (out, cache)
            }
            Unit::Transition { bn, conv } => {
                let (b, c) = bn.forward(x, mode);
                let r = relu(b);
                let a = conv.forward(&r);
                let out = ops::avg_pool2(&a);
                let cache = c.map(|bn| Cache::Transition {
                    bn,
                    r,
                    conv_shape: a.shape().to_vec(),
                });
                (out, cache)
            }
            Unit::Head { bn, fc } => {
                let (r, bn_cache) = match bn {
                    Some(bn) => {
                        let (b, c) = bn.forward(x, mode);
                        let r = relu(b);
                        let cache = c.map(|c| (c, r.clone()));
                        (r, cache)
                    }
                    None => (x.clone(), None),
                };
                let pooled = ops::global_avg_pool(&r);
                let logits = ops::linear(&pooled, &fc.w, &fc.b);
                let cache = train.then(|| Cache::Head {
                    bn: bn_cache,
                    pooled_from: r.shape().to_vec(),
                    pooled,
                });
                (logits, cache)
            }
        }
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        match self {
            Unit::Stem { conv, bn } => {
                let a = conv.forward(x);
                match bn {
                    Some(bn) => relu(bn.eval(&a)),
                    None => a,
                }
            }
            Unit::Chain { conv, bn } => relu(bn.eval(&conv.forward(x))),
            Unit::Residual {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            } => {
                let r1 = relu(bn1.eval(&conv1.forward(x)));
                let mut s = bn2.eval(&conv2.forward(&r1));
                match shortcut {
                    Some((conv, bn)) => ops::add_inplace(&mut s, &bn.eval(&conv.forward(x))),
                    None => ops::add_inplace(&mut s, x),
                }
                relu(s)
            }
            Unit::Dense { bn, conv } => {
                let y = conv.forward(&relu(bn.eval(x)));
                ops::concat_channels(x, &y)
            }
            Unit::Transition { bn, conv } => ops::avg_pool2(&conv.forward(&relu(bn.eval(x)))),
            Unit::Head { bn, fc } => {
                let r = match bn {
                    Some(bn) => relu(bn.eval(x)),
                    None => x.clone(),
                };
                ops::linear(&ops::global_avg_pool(&r), &fc.w, &fc.b)
            }
        }
    }

    fn backward(&mut self, cache: Cache, dy: &Tensor, want_dx: bool) -> Option<Tensor> {
        match (self, cache) {
            (Unit::Stem { conv, bn }, Cache::Stem { x, bn: bn_cache }) => {
                let da = match (bn, bn_cache) {
                    (Some(bn), Some((c, out))) => bn.backward(&ops::relu_backward(dy, &out), &c),
                    _ => dy.clone(),
                };
                conv.backward(&x, &da, want_dx)
            }
            (Unit::Chain { conv, bn }, Cache::Chain { x, bn: c, out }) => {
                let da = bn.backward(&ops::relu_backward(dy, &out), &c);
                conv.backward(&x, &da, want_dx)
            }
            (
                Unit::Residual {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    shortcut,
                },
                Cache::Residual {
                    x,
                    bn1: c1,
                    r1,
                    bn2: c2,
                    shortcut_bn,
                    out,
                },
            ) => {
                let ds = ops::relu_backward(dy, &out);
                let da2 = bn2.backward(&ds, &c2);
                let dr1 = conv2.backward(&r1, &da2, true).expect("dx requested");
                let da1 = bn1.backward(&ops::relu_backward(&dr1, &r1), &c1);
                let mut dx = conv1.backward(&x, &da1, want_dx);
                let d_short = match (shortcut, shortcut_bn) {
                    (Some((conv, bn)), Some(c)) => {
                        let dsa = bn.backward(&ds, &c);
                        conv.backward(&x, &dsa, want_dx)
                    }
                    _ => want_dx.then_some(ds),
                };
                if let (Some(dx), Some(d)) = (dx.as_mut(), d_short) {
                    ops::add_inplace(dx, &d);
                }
                dx
            }
            (Unit::Dense { bn, conv }, Cache::Dense { in_channels, bn: c, r }) => {
                let (d_pass, d_new) = ops::split_channels(dy, in_channels);
                let dr = conv.backward(&r, &d_new, true).expect("dx requested");
                let mut dx = bn.backward(&ops::relu_backward(&dr, &r), &c);
                ops::add_inplace(&mut dx, &d_pass);
                Some(dx)
            }
            (Unit::Transition { bn, conv }, Cache::Transition { bn: c, r, conv_shape }) => {
                let da = ops::avg_pool2_backward(dy, &conv_shape);
                let dr = conv.backward(&r, &da, true).expect("dx requested");
                Some(bn.backward(&ops::relu_backward(&dr, &r), &c))
            }
            (
                Unit::Head { bn, fc },
                Cache::Head {
                    bn: bn_cache,
                    pooled_from,
                    pooled,
                },
            ) => {
                let dp = ops::linear_backward(&pooled, &fc.w, dy, &mut fc.dw, &mut fc.db);
                let dr = ops::global_avg_pool_backward(&dp, &pooled_from);
                match (bn, bn_cache) {
                    (Some(bn), Some((c, r))) => Some(bn.backward(&ops::relu_backward(&dr, &r), &c)),
                    _ => Some(dr),
                }
            }
            _ => unreachable!("cache does not belong to this unit"),
        }
    }

    fn batch_norms(&self) -> Vec<&BatchNorm> {
        match self {
            Unit::Stem { bn, .. } | Unit::Head { bn, .. } => bn.iter().collect(),
            Unit::Chain { bn, .. } | Unit::Dense { bn, .. } | Unit::Transition { bn, .. } => vec![bn],
            Unit::Residual { bn1, bn2, shortcut, .. } => {
                let mut v = vec![bn1, bn2];
                if let Some((_, bn)) = shortcut {
                    v.push(bn);
                }
                v
            }
        }
    }
}

/// Mutable view of one trainable tensor and its accumulated gradient.
pub struct ParamMut<'a> {
    pub name: String,
    pub value: &'a mut [f32],
    pub grad: &'a mut [f32],
}

#[derive(Clone, Debug)]
pub struct Network {
    graph: BlockGraph,
    units: Vec<Unit>,
}

impl Network {
    pub fn new(graph: &BlockGraph, weights: &WeightStore) -> Result<Self> {
        graph.check_weights(weights)?;
        let mut units = Vec::with_capacity(graph.len());
        for block in &graph.blocks {
            let p = &block.name;
            let unit = match block.kind {
                BlockKind::Stem => Unit::Stem {
                    conv: Conv::load(weights, &format!("{p}.conv"), 1)?,
                    bn: if graph.topology == Topology::Dense {
                        None
                    } else {
                        Some(BatchNorm::load(weights, &format!("{p}.bn"))?)
                    },
                },
                BlockKind::ConvBnReluChainUnit => Unit::Chain {
                    conv: Conv::load(weights, &format!("{p}.conv"), 1)?,
                    bn: BatchNorm::load(weights, &format!("{p}.bn"))?,
                },
                BlockKind::ResidualUnit => {
                    let stride = block.in_shape[1] / block.out_shape[1];
                    let shortcut = if block.in_shape != block.out_shape {
                        Some((
                            Conv::load(weights, &format!("{p}.shortcut.conv"), stride)?,
                            BatchNorm::load(weights, &format!("{p}.shortcut.bn"))?,
                        ))
                    } else {
                        None
                    };
                    Unit::Residual {
                        conv1: Conv::load(weights, &format!("{p}.conv1"), stride)?,
                        bn1: BatchNorm::load(weights, &format!("{p}.bn1"))?,
                        conv2: Conv::load(weights, &format!("{p}.conv2"), 1)?,
                        bn2: BatchNorm::load(weights, &format!("{p}.bn2"))?,
                        shortcut,
                    }
                }
                BlockKind::DenseUnit => Unit::Dense {
                    bn: BatchNorm::load(weights, &format!("{p}.bn"))?,
                    conv: Conv::load(weights, &format!("{p}.conv"), 1)?,
                },
                BlockKind::Transition => Unit::Transition {
                    bn: BatchNorm::load(weights, &format!("{p}.bn"))?,
                    conv: Conv::load(weights, &format!("{p}.conv"), 1)?,
                },
                BlockKind::ClassifierHead => Unit::Head {
                    bn: if graph.topology == Topology::Dense {
                        Some(BatchNorm::load(weights, &format!("{p}.bn"))?)
                    } else {
                        None
                    },
                    fc: Linear::load(weights, &format!("{p}.fc"))?,
                },
            };
            units.push(unit);
        }
        Ok(Self {
            graph: graph.clone(),
            units,
        })
    }

    pub fn graph(&self) -> &BlockGraph {
        &self.graph
    }

    pub fn num_classes(&self) -> usize {
        self.graph.dataset_meta.num_classes
    }

    pub fn check_input(&self, batch: &Tensor) -> Result<()> {
        let [c, h, w] = self.graph.dataset_meta.input_shape;
        let s = batch.shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            let mut expected = vec![s.first().copied().unwrap_or(0)];
            expected.extend([c, h, w]);
            return Err(Error::ShapeMismatch {
                expected,
                got: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Eval-mode logits; running statistics are used and nothing is mutated.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        Ok(self.units.iter().fold(batch.clone(), |x, u| u.forward_eval(&x)))
    }

    /// Eval-mode output of every block in order; the last entry is the logits.
    pub fn block_outputs(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(batch)?;
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.units.len());
        for unit in &self.units {
            let next = unit.forward_eval(outs.last().unwrap_or(batch));
            outs.push(next);
        }
        Ok(outs)
    }

    /// Training-mode forward: batch statistics, running statistics updated.
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<(Tensor, Tape)> {
        self.check_input(batch)?;
        let mut caches = Vec::with_capacity(self.units.len());
        let mut x = batch.clone();
        for unit in &mut self.units {
            let (y, cache) = unit.forward(&x, Mode::Train);
            caches.push(cache.expect("train mode records a cache"));
            x = y;
        }
        Ok((x, Tape { caches }))
    }

    /// Accumulates parameter gradients for `dlogits` into the network.
    pub fn backward(&mut self, tape: Tape, dlogits: &Tensor) {
        let mut grad = dlogits.clone();
        for (i, cache) in tape.caches.into_iter().enumerate().rev() {
            match self.units[i].backward(cache, &grad, i > 0) {
                Some(g) => grad = g,
                None => break,
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.for_each_param(|p| p.grad.fill(0.0));
    }

    /// Visits every trainable tensor (running statistics excluded).
    pub fn for_each_param(&mut self, mut f: impl FnMut(ParamMut<'_>)) {
        fn conv(f: &mut impl FnMut(ParamMut<'_>), c: &mut Conv) {
            f(ParamMut {
                name: c.name.clone(),
                value: c.w.data_mut(),
                grad: &mut c.dw,
            });
        }
        fn bn(f: &mut impl FnMut(ParamMut<'_>), b: &mut BatchNorm) {
            f(ParamMut {
                name: format!("{}.weight", b.prefix),
                value: &mut b.gamma,
                grad: &mut b.dgamma,
            });
            f(ParamMut {
                name: format!("{}.bias", b.prefix),
                value: &mut b.beta,
                grad: &mut b.dbeta,
            });
        }
        for unit in &mut self.units {
            match unit {
                Unit::Stem { conv: c, bn: b } => {
                    conv(&mut f, c);
                    if let Some(b) = b {
                        bn(&mut f, b);
                    }
                }
                Unit::Chain { conv: c, bn: b } => {
                    conv(&mut f, c);
                    bn(&mut f, b);
                }
                Unit::Residual {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    shortcut,
                } => {
                    conv(&mut f, conv1);
                    bn(&mut f, bn1);
                    conv(&mut f, conv2);
                    bn(&mut f, bn2);
                    if let Some((c, b)) = shortcut {
                        conv(&mut f, c);
                        bn(&mut f, b);
                    }
                }
                Unit::Dense { bn: b, conv: c } | Unit::Transition { bn: b, conv: c } => {
                    bn(&mut f, b);
                    conv(&mut f, c);
                }
                Unit::Head { bn: b, fc } => {
                    if let Some(b) = b {
                        bn(&mut f, b);
                    }
                    f(ParamMut {
                        name: format!("{}.weight", fc.prefix),
                        value: fc.w.data_mut(),
                        grad: &mut fc.dw,
                    });
                    f(ParamMut {
                        name: format!("{}.bias", fc.prefix),
                        value: &mut fc.b,
                        grad: &mut fc.db,
                    });
                }
            }
        }
    }

    pub fn to_weights(&self) -> WeightStore {
        let mut store = WeightStore::new();
        let put_bn = |store: &mut WeightStore, b: &BatchNorm| {
            let c = b.gamma.len();
            for (suffix, v) in [
                ("weight", &b.gamma),
                ("bias", &b.beta),
                ("running_mean", &b.mean),
                ("running_var", &b.var),
            ] {
                store.insert(
                    format!("{}.{suffix}", b.prefix),
                    Tensor::from_vec(&[c], v.clone()).expect("bn shape"),
                );
            }
        };
        for unit in &self.units {
            match unit {
                Unit::Stem { conv, .. }
                | Unit::Chain { conv, .. }
                | Unit::Dense { conv, .. }
                | Unit::Transition { conv, .. } => {
                    store.insert(conv.name.clone(), conv.w.clone());
                }
                Unit::Residual {
                    conv1, conv2, shortcut, ..
                } => {
                    store.insert(conv1.name.clone(), conv1.w.clone());
                    store.insert(conv2.name.clone(), conv2.w.clone());
                    if let Some((c, _)) = shortcut {
                        store.insert(c.name.clone(), c.w.clone());
                    }
                }
                Unit::Head { fc, .. } => {
                    store.insert(format!("{}.weight", fc.prefix), fc.w.clone());
                    let classes = fc.b.len();
                    store.insert(
                        format!("{}.bias", fc.prefix),
                        Tensor::from_vec(&[classes], fc.b.clone()).expect("bias shape"),
                    );
                }
            }
            for b in unit.batch_norms() {
                put_bn(&mut store, b);
            }
        }
        store
    }
}

/// One-shot forward over `(graph, weights)`. Train mode normalizes with
/// batch statistics but never persists running-statistic updates.
pub fn forward(graph: &BlockGraph, weights: &WeightStore, batch: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut net = Network::new(graph, weights)?;
    match mode {
        Mode::Eval => net.forward(batch),
        Mode::Train => net.forward_train(batch).map(|(logits, _)| logits),
    }
}
