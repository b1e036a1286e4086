//! Block-level network description and block-removal surgery.
//!
//! A network is an ordered list of blocks. Every block maps the running
//! activation state to a new state: plain and residual units keep the shape
//! (or downsample, for stage-entry units), dense units append
//! `produces_channels` channels to the running concatenation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

/// `(channels, height, width)`.
pub type Shape3 = [usize; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    ConvBnReluChainUnit,
    ResidualUnit,
    DenseUnit,
    Stem,
    Transition,
    ClassifierHead,
}

impl BlockKind {
    pub fn is_unit(self) -> bool {
        matches!(
            self,
            BlockKind::ConvBnReluChainUnit | BlockKind::ResidualUnit | BlockKind::DenseUnit
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Sequential,
    Residual,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub id: usize,
    pub kind: BlockKind,
    /// Stable parameter prefix; survives re-indexing.
    pub name: String,
    pub in_shape: Shape3,
    pub out_shape: Shape3,
    pub param_names: Vec<String>,
    pub produces_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Sequential,
    IdentitySkip,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub input_shape: Shape3,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGraph {
    pub topology: Topology,
    pub blocks: Vec<Block>,
    pub edges: Vec<Edge>,
    pub dataset_meta: DatasetMeta,
}

/// Supported architecture families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ArchDesc {
    /// Stem followed by `units` channel- and resolution-preserving conv-bn-relu units.
    Chain { units: usize, width: usize },
    /// CIFAR-style residual network of depth `6n + 2`, stage widths `w, 2w, 4w`.
    Residual { depth: usize, width: usize },
    /// Dense network without bottlenecks; each unit is BN-ReLU-Conv3x3.
    Dense {
        units_per_stage: Vec<usize>,
        growth: usize,
        stem_channels: usize,
    },
}

impl ArchDesc {
    pub fn resnet(depth: usize) -> Self {
        ArchDesc::Residual { depth, width: 16 }
    }

    pub fn densenet_default() -> Self {
        ArchDesc::Dense {
            units_per_stage: vec![12, 12, 12],
            growth: 12,
            stem_channels: 16,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            ArchDesc::Chain { .. } => "chain",
            ArchDesc::Residual { .. } => "residual",
            ArchDesc::Dense { .. } => "dense",
        }
    }
}

/// Learnable or running-statistic tensor a layer owns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    BnScale,
    BnShift,
    BnMean,
    BnVar,
    LinearWeight,
    LinearBias,
}

impl ParamRole {
    /// Running statistics are state, not trained parameters.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::BnMean | ParamRole::BnVar)
    }
}

/// Geometry of one layer inside a block, in forward order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        prefix: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    },
    BatchNorm {
        prefix: String,
        channels: usize,
    },
    Linear {
        prefix: String,
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn params(&self) -> Vec<ParamSpec> {
        let p = |prefix: &str, suffix: &str, shape: Vec<usize>, role| ParamSpec {
            name: format!("{prefix}.{suffix}"),
            shape,
            role,
        };
        match self {
            LayerSpec::Conv {
                prefix,
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![p(
                prefix,
                "weight",
                vec![*out_channels, *in_channels, *kernel, *kernel],
                ParamRole::ConvWeight,
            )],
            LayerSpec::BatchNorm { prefix, channels } => vec![
                p(prefix, "weight", vec![*channels], ParamRole::BnScale),
                p(prefix, "bias", vec![*channels], ParamRole::BnShift),
                p(prefix, "running_mean", vec![*channels], ParamRole::BnMean),
                p(prefix, "running_var", vec![*channels], ParamRole::BnVar),
            ],
            LayerSpec::Linear {
                prefix,
                in_features,
                out_features,
            } => vec![
                p(
                    prefix,
                    "weight",
                    vec![*out_features, *in_features],
                    ParamRole::LinearWeight,
                ),
                p(prefix, "bias", vec![*out_features], ParamRole::LinearBias),
            ],
        }
    }
}

/// A single invariant violation found by [`validate_graph`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub block: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.block {
            Some(id) => write!(f, "block {id}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Result of [`prune_blocks`]: the new graph, its weights and the
/// old-id → new-id map for surviving blocks.
#[derive(Clone, Debug)]
pub struct Pruned {
    pub graph: BlockGraph,
    pub weights: WeightStore,
    pub id_map: BTreeMap<usize, usize>,
}

struct Builder {
    blocks: Vec<Block>,
    topology: Topology,
}

impl Builder {
    fn push(&mut self, kind: BlockKind, name: String, in_shape: Shape3, out_shape: Shape3, produces: usize) -> Shape3 {
        self.blocks.push(Block {
            id: self.blocks.len(),
            kind,
            name,
            in_shape,
            out_shape,
            param_names: Vec::new(),
            produces_channels: produces,
        });
        out_shape
    }
}

impl BlockGraph {
    /// Builds the block structure for `arch`; weights are created separately.
    pub fn from_arch(arch: &ArchDesc, meta: DatasetMeta) -> Result<Self> {
        let [in_c, h, w] = meta.input_shape;
        if in_c == 0 || h == 0 || w == 0 || meta.num_classes == 0 {
            return Err(Error::InvalidArch(format!(
                "input shape {:?} with {} classes",
                meta.input_shape, meta.num_classes
            )));
        }
        let topology = match arch {
            ArchDesc::Chain { .. } => Topology::Sequential,
            ArchDesc::Residual { .. } => Topology::Residual,
            ArchDesc::Dense { .. } => Topology::Dense,
        };
        let mut b = Builder {
            blocks: Vec::new(),
            topology,
        };
        let mut shape;
        match arch {
            ArchDesc::Chain { units, width } => {
                if *width == 0 {
                    return Err(Error::InvalidArch("chain width must be positive".into()));
                }
                shape = b.push(BlockKind::Stem, "stem".into(), meta.input_shape, [*width, h, w], 0);
                for u in 0..*units {
                    shape = b.push(BlockKind::ConvBnReluChainUnit, format!("u{u}"), shape, shape, 0);
                }
            }
            ArchDesc::Residual { depth, width } => {
                if *depth < 8 || (depth - 2) % 6 != 0 || (depth - 2) / 6 > 18 {
                    return Err(Error::DepthNotRealizable(format!(
                        "residual depth {depth} is not 6n+2 with n in [1, 18]"
                    )));
                }
                if *width == 0 || h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::InvalidArch(format!(
                        "residual nets need a positive width and spatial dims divisible by 4, got width {width}, {h}x{w}"
                    )));
                }
                let n = (depth - 2) / 6;
                shape = b.push(BlockKind::Stem, "stem".into(), meta.input_shape, [*width, h, w], 0);
                for stage in 0..3 {
                    let channels = width << stage;
                    for u in 0..n {
                        let stride = if stage > 0 && u == 0 { 2 } else { 1 };
                        let out = [channels, shape[1] / stride, shape[2] / stride];
                        shape = b.push(
                            BlockKind::ResidualUnit,
                            format!("s{}.u{u}", stage + 1),
                            shape,
                            out,
                            0,
                        );
                    }
                }
            }
            ArchDesc::Dense {
                units_per_stage,
                growth,
                stem_channels,
            } => {
                let stages = units_per_stage.len();
                if stages == 0 || *growth == 0 || *stem_channels == 0 {
                    return Err(Error::InvalidArch(
                        "dense nets need at least one stage, positive growth and stem width".into(),
                    ));
                }
                let factor = 1usize << (stages - 1);
                if h % factor != 0 || w % factor != 0 {
                    return Err(Error::InvalidArch(format!(
                        "{stages} dense stages need spatial dims divisible by {factor}"
                    )));
                }
                shape = b.push(BlockKind::Stem, "stem".into(), meta.input_shape, [*stem_channels, h, w], 0);
                for (s, &units) in units_per_stage.iter().enumerate() {
                    for u in 0..units {
                        let out = [shape[0] + growth, shape[1], shape[2]];
                        shape = b.push(BlockKind::DenseUnit, format!("d{}.u{u}", s + 1), shape, out, *growth);
                    }
                    if s + 1 < stages {
                        let out = [shape[0], shape[1] / 2, shape[2] / 2];
                        shape = b.push(BlockKind::Transition, format!("t{}", s + 1), shape, out, 0);
                    }
                }
            }
        }
        b.push(
            BlockKind::ClassifierHead,
            "head".into(),
            shape,
            [meta.num_classes, 1, 1],
            0,
        );
        let mut graph = BlockGraph {
            topology: b.topology,
            blocks: b.blocks,
            edges: Vec::new(),
            dataset_meta: meta,
        };
        for i in 0..graph.blocks.len() {
            graph.blocks[i].param_names = graph.param_specs(i).into_iter().map(|p| p.name).collect();
        }
        graph.edges = derive_edges(&graph.blocks);
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn head_id(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn unit_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.kind.is_unit()).count()
    }

    /// Layers of block `id` in forward order.
    pub fn layers(&self, id: usize) -> Vec<LayerSpec> {
        let block = &self.blocks[id];
        let p = &block.name;
        let [in_c, in_h, in_w] = block.in_shape;
        let [out_c, out_h, out_w] = block.out_shape;
        let conv = |suffix: &str, i: usize, o: usize, kernel: usize, stride: usize, hw: (usize, usize)| LayerSpec::Conv {
            prefix: format!("{p}.{suffix}"),
            in_channels: i,
            out_channels: o,
            kernel,
            stride,
            pad: kernel / 2,
            out_hw: hw,
        };
        let bn = |suffix: &str, c: usize| LayerSpec::BatchNorm {
            prefix: format!("{p}.{suffix}"),
            channels: c,
        };
        match block.kind {
            BlockKind::Stem => {
                let mut layers = vec![conv("conv", in_c, out_c, 3, 1, (out_h, out_w))];
                if self.topology != Topology::Dense {
                    layers.push(bn("bn", out_c));
                }
                layers
            }
            BlockKind::ConvBnReluChainUnit => {
                vec![conv("conv", in_c, out_c, 3, 1, (out_h, out_w)), bn("bn", out_c)]
            }
            BlockKind::ResidualUnit => {
                let stride = in_h / out_h;
                let mut layers = vec![
                    conv("conv1", in_c, out_c, 3, stride, (out_h, out_w)),
                    bn("bn1", out_c),
                    conv("conv2", out_c, out_c, 3, 1, (out_h, out_w)),
                    bn("bn2", out_c),
                ];
                if block.in_shape != block.out_shape {
                    layers.push(conv("shortcut.conv", in_c, out_c, 1, stride, (out_h, out_w)));
                    layers.push(bn("shortcut.bn", out_c));
                }
                layers
            }
            BlockKind::DenseUnit => vec![
                bn("bn", in_c),
                conv("conv", in_c, block.produces_channels, 3, 1, (in_h, in_w)),
            ],
            BlockKind::Transition => vec![bn("bn", in_c), conv("conv", in_c, out_c, 1, 1, (in_h, in_w))],
            BlockKind::ClassifierHead => {
                let mut layers = Vec::new();
                if self.topology == Topology::Dense {
                    layers.push(bn("bn", in_c));
                }
                layers.push(LayerSpec::Linear {
                    prefix: format!("{p}.fc"),
                    in_features: in_c,
                    out_features: out_c,
                });
                layers
            }
        }
    }

    /// Every tensor block `id` owns, with its expected shape.
    pub fn param_specs(&self, id: usize) -> Vec<ParamSpec> {
        self.layers(id).iter().flat_map(LayerSpec::params).collect()
    }

    pub fn all_param_specs(&self) -> Vec<ParamSpec> {
        (0..self.blocks.len()).flat_map(|i| self.param_specs(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let violations = validate_graph(self);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidGraph(violations.iter().map(ToString::to_string).collect()))
        }
    }

    /// Checks that `weights` holds exactly the tensors the graph declares.
    pub fn check_weights(&self, weights: &WeightStore) -> Result<()> {
        let mut problems = Vec::new();
        let specs = self.all_param_specs();
        for spec in &specs {
            match weights.get(&spec.name) {
                Ok(t) if t.shape() != spec.shape.as_slice() => problems.push(format!(
                    "`{}` has shape {:?}, graph declares {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )),
                Ok(_) => {}
                Err(_) => problems.push(format!("missing `{}`", spec.name)),
            }
        }
        let declared: BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        for name in weights.names() {
            if !declared.contains(name) {
                problems.push(format!("`{name}` is not owned by any block"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidGraph(problems))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn derive_edges(blocks: &[Block]) -> Vec<Edge> {
    let mut edges = Vec::new();
    for pair in blocks.windows(2) {
        let (src, dst) = (pair[0].id, pair[1].id);
        edges.push(Edge {
            src,
            dst,
            kind: EdgeKind::Sequential,
        });
        match pair[1].kind {
            BlockKind::ResidualUnit => edges.push(Edge {
                src,
                dst,
                kind: EdgeKind::IdentitySkip,
            }),
            BlockKind::DenseUnit => edges.push(Edge {
                src,
                dst,
                kind: EdgeKind::Concat,
            }),
            _ => {}
        }
    }
    edges
}

/// Builds the graph and initializes its weights from `seed`.
pub fn build_graph(arch: &ArchDesc, meta: DatasetMeta, seed: u64) -> Result<(BlockGraph, WeightStore)> {
    let graph = BlockGraph::from_arch(arch, meta)?;
    graph.validate()?;
    let weights = crate::backbone::init_weights(&graph, seed);
    Ok((graph, weights))
}

/// Ids of blocks whose removal leaves every remaining tensor shape compatible.
pub fn prunable_blocks(graph: &BlockGraph) -> BTreeSet<usize> {
    graph
        .blocks
        .iter()
        .filter(|b| match b.kind {
            BlockKind::ResidualUnit | BlockKind::ConvBnReluChainUnit => b.in_shape == b.out_shape,
            BlockKind::DenseUnit => true,
            _ => false,
        })
        .map(|b| b.id)
        .collect()
}

fn remove_channel_range(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let dim = shape[axis];
    let mut data = Vec::with_capacity(t.len() / dim * (dim - len));
    for o in 0..outer {
        let base = o * dim * inner;
        data.extend_from_slice(&t.data()[base..base + start * inner]);
        data.extend_from_slice(&t.data()[base + (start + len) * inner..base + dim * inner]);
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] -= len;
    Tensor::from_vec(&new_shape, data).expect("sliced shape")
}

/// Deletes the input channels `[start, start + len)` from every layer of a
/// consumer block that reads the running concatenation directly.
fn slice_consumer_inputs(graph: &BlockGraph, id: usize, weights: &mut WeightStore, start: usize, len: usize) -> Result<()> {
    // Only the first BN and the first conv/linear read the concatenation.
    let mut saw_bn = false;
    for layer in graph.layers(id) {
        match &layer {
            LayerSpec::BatchNorm { .. } if !saw_bn => {
                saw_bn = true;
                for spec in layer.params() {
                    let t = weights.get(&spec.name)?;
                    let sliced = remove_channel_range(t, 0, start, len);
                    weights.insert(spec.name, sliced);
                }
            }
            LayerSpec::Conv { prefix, .. } | LayerSpec::Linear { prefix, .. } => {
                let name = format!("{prefix}.weight");
                let sliced = remove_channel_range(weights.get(&name)?, 1, start, len);
                weights.insert(name, sliced);
                return Ok(());
            }
            _ => {}
        }
    }
    Ok(())
}

/// Removes the blocks in `ids`. Surviving weights are copied bit for bit,
/// except for the input-channel slices dense-unit removal deletes from
/// downstream consumers.
pub fn prune_blocks(graph: &BlockGraph, weights: &WeightStore, ids: &BTreeSet<usize>) -> Result<Pruned> {
    let prunable = prunable_blocks(graph);
    for &id in ids {
        if id >= graph.len() {
            return Err(Error::BlockOutOfRange { id, len: graph.len() });
        }
        if !prunable.contains(&id) {
            return Err(Error::NotPrunable(id));
        }
    }
    let mut g = graph.clone();
    let mut w = weights.clone();
    // Deepest first: earlier dense units' channel offsets stay valid.
    for &id in ids.iter().rev() {
        let removed = g.blocks[id].clone();
        for name in &removed.param_names {
            w.remove(name);
        }
        if removed.kind == BlockKind::DenseUnit {
            let start = removed.in_shape[0];
            let len = removed.produces_channels;
            for j in id + 1..g.blocks.len() {
                let kind = g.blocks[j].kind;
                slice_consumer_inputs(&g, j, &mut w, start, len)?;
                let block = &mut g.blocks[j];
                block.in_shape[0] -= len;
                if kind == BlockKind::DenseUnit {
                    block.out_shape[0] -= len;
                } else {
                    break;
                }
            }
        }
        g.blocks.remove(id);
    }
    let mut id_map = BTreeMap::new();
    for (new_id, block) in g.blocks.iter_mut().enumerate() {
        id_map.insert(block.id, new_id);
        block.id = new_id;
    }
    for i in 0..g.blocks.len() {
        g.blocks[i].param_names = g.param_specs(i).into_iter().map(|p| p.name).collect();
    }
    g.edges = derive_edges(&g.blocks);
    Ok(Pruned {
        graph: g,
        weights: w,
        id_map,
    })
}

/// Checks every structural invariant; an empty list means the graph is valid.
pub fn validate_graph(graph: &BlockGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |block: Option<usize>, message: String| out.push(Violation { block, message });
    let blocks = &graph.blocks;
    if blocks.is_empty() {
        push(None, "graph has no blocks".into());
        return out;
    }

    let stems: Vec<usize> = blocks.iter().filter(|b| b.kind == BlockKind::Stem).map(|b| b.id).collect();
    let heads: Vec<usize> = blocks
        .iter()
        .filter(|b| b.kind == BlockKind::ClassifierHead)
        .map(|b| b.id)
        .collect();
    if stems != [0] {
        push(None, format!("expected exactly one stem at id 0, found {stems:?}"));
    }
    if heads != [blocks.len() - 1] {
        push(None, format!("expected exactly one classifier head as the last block, found {heads:?}"));
    }

    for (pos, b) in blocks.iter().enumerate() {
        if b.id != pos {
            push(Some(b.id), format!("id {} at position {pos}; ids must be consecutive", b.id));
        }
    }

    let mut owner: HashMap<&str, usize> = HashMap::new();
    for b in blocks {
        for name in &b.param_names {
            if let Some(prev) = owner.insert(name, b.id) {
                push(Some(b.id), format!("param owned twice: `{name}` (also block {prev})"));
            }
        }
    }

    if blocks[0].in_shape != graph.dataset_meta.input_shape {
        push(Some(0), "stem input does not match the dataset input shape".into());
    }
    let last = &blocks[blocks.len() - 1];
    if last.kind == BlockKind::ClassifierHead && last.out_shape != [graph.dataset_meta.num_classes, 1, 1] {
        push(Some(last.id), "head output does not match num_classes".into());
    }
    for pair in blocks.windows(2) {
        if pair[1].in_shape != pair[0].out_shape {
            push(
                Some(pair[1].id),
                format!(
                    "input shape {:?} does not match predecessor output {:?}",
                    pair[1].in_shape, pair[0].out_shape
                ),
            );
        }
    }

    let has_edge = |src: usize, dst: usize, kind: EdgeKind| {
        graph
            .edges
            .iter()
            .any(|e| e.src == src && e.dst == dst && e.kind == kind)
    };
    for b in blocks.iter().skip(1) {
        if !has_edge(b.id - 1, b.id, EdgeKind::Sequential) {
            push(Some(b.id), "missing sequential edge from predecessor".into());
        }
        match b.kind {
            BlockKind::ResidualUnit if !has_edge(b.id - 1, b.id, EdgeKind::IdentitySkip) => {
                push(Some(b.id), "residual unit lacks an identity_skip edge".into())
            }
            BlockKind::DenseUnit if !has_edge(b.id - 1, b.id, EdgeKind::Concat) => {
                push(Some(b.id), "dense unit lacks a concat edge".into())
            }
            _ => {}
        }
    }
    match graph.topology {
        Topology::Dense => {
            let mut stage_base = 0;
            let mut produced = 0;
            for b in blocks {
                if matches!(b.kind, BlockKind::Transition | BlockKind::ClassifierHead)
                    && b.in_shape[0] != stage_base + produced
                {
                    push(
                        Some(b.id),
                        format!(
                            "in-channels {} disagree with surviving producers ({} + {})",
                            b.in_shape[0], stage_base, produced
                        ),
                    );
                }
                match b.kind {
                    BlockKind::Stem | BlockKind::Transition => {
                        stage_base = b.out_shape[0];
                        produced = 0;
                    }
                    BlockKind::DenseUnit => {
                        if b.in_shape[0] != stage_base + produced {
                            push(
                                Some(b.id),
                                format!(
                                    "in-channels {} disagree with surviving producers ({} + {})",
                                    b.in_shape[0], stage_base, produced
                                ),
                            );
                        }
                        if b.out_shape[0] != b.in_shape[0] + b.produces_channels {
                            push(Some(b.id), "out-channels must equal in-channels plus growth".into());
                        }
                        produced += b.produces_channels;
                    }
                    _ => {}
                }
            }
        }
        Topology::Residual | Topology::Sequential => {
            for b in blocks {
                if matches!(b.kind, BlockKind::DenseUnit | BlockKind::Transition) {
                    push(Some(b.id), format!("{:?} block in a non-dense graph", b.kind));
                }
                if b.produces_channels != 0 {
                    push(Some(b.id), "only dense units produce channels".into());
                }
            }
        }
    }
    if let Topology::Sequential = graph.topology {
        for b in blocks.iter().filter(|b| b.kind == BlockKind::ResidualUnit) {
            push(Some(b.id), "residual unit in a sequential graph".into());
        }
    }
    out
}
