//! Static-graph reverse-mode differentiation.
//!
//! A [`Graph`] is built once (node list in execution order) and executed
//! many times by a [`Tape`], which caches every intermediate value and the
//! auxiliaries the backward rules need. Trainable tensors and batch-norm
//! running statistics live in a [`ParamStore`] keyed by stable names.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::{self, BnCache, Mode};
use crate::{Error, Result, Scalar, Shape4, Tensor4};

pub type NodeId = usize;

/// Operation recorded at a graph node. Inputs are listed in [`Node::inputs`].
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Free input bound at forward time.
    Input { name: String },
    /// Tensor read from the parameter store.
    Param { name: String },
    /// Inputs `[x, w]` or `[x, w, b]`.
    Conv2d { stride: usize },
    /// Inputs `[x, w]`.
    DepthwiseConv2d { stride: usize },
    AvgPool2,
    BilinearUpsample2,
    /// Inputs `[x, gamma, beta]`; running statistics are `{prefix}.running_mean/var`.
    BatchNorm { prefix: String, eps: f64, momentum: f64 },
    LeakyRelu { alpha: f64 },
    Sigmoid,
    /// Inputs `[x, w]` or `[x, w, b]`.
    Dense,
    Concat,
    ChannelSlice { start: usize, end: usize },
    ChannelShuffle { groups: usize },
    Add,
    Mul,
    Square,
    /// Sum of every element into a `(1,1,1,1)` scalar.
    SumAll,
    /// Inputs `[prediction, target]`: batch mean of per-sample sum of squared errors.
    MseLoss,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Conv2d { .. } => "conv",
            Op::DepthwiseConv2d { .. } => "dwconv",
            Op::AvgPool2 => "avgpool",
            Op::BilinearUpsample2 => "upsample",
            Op::BatchNorm { .. } => "bn",
            Op::LeakyRelu { .. } => "leakyrelu",
            Op::Sigmoid => "sigmoid",
            Op::Dense => "dense",
            Op::Concat => "concat",
            Op::ChannelSlice { .. } => "slice",
            Op::ChannelShuffle { .. } => "shuffle",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Square => "square",
            Op::SumAll => "sum",
            Op::MseLoss => "mse",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Layer name used in reports, e.g. `enc.ecn1.conv`.
    pub label: String,
    /// Index into [`Graph::units`] of the building block this node belongs to.
    pub unit: Option<usize>,
}

/// A named building block (ECN, SN, ...) spanning a contiguous node range.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub name: String,
    pub kind: UnitKind,
    /// Node feeding the unit.
    pub input: NodeId,
    /// Node the unit produces.
    pub output: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Stem,
    Ecn,
    Dn,
    Sn,
    RefineNet,
    PoolingStructure,
    Head,
}

/// Ordered node list; every node's inputs precede it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    units: Vec<Unit>,
    output: NodeId,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Input { name } => Some(name.as_str()),
            _ => None,
        })
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Param { name } => Some(name.as_str()),
            _ => None,
        })
    }

    /// Shape of every node given the shapes of the free inputs.
    pub fn infer_shapes<T: Scalar>(&self, store: &ParamStore<T>, inputs: &[(&str, Shape4)]) -> Result<Vec<Shape4>> {
        let mut shapes: Vec<Shape4> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let s = |i: usize| shapes[node.inputs[i]];
            let shape = match &node.op {
                Op::Input { name } => inputs
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, s)| *s)
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?,
                Op::Param { name } => store.get(name)?.shape(),
                Op::Conv2d { stride } => {
                    let (x, w) = (s(0), s(1));
                    if x.c != w.c {
                        return Err(Error::Shape(format!("{}: {} input channels, weight {w}", node.label, x.c)));
                    }
                    let (ho, _, _) = layers::same_padding(x.h, w.h, *stride);
                    let (wo, _, _) = layers::same_padding(x.w, w.w, *stride);
                    Shape4::of(x.n, w.n, ho, wo)
                }
                Op::DepthwiseConv2d { stride } => {
                    let (x, w) = (s(0), s(1));
                    if x.c != w.n {
                        return Err(Error::Shape(format!("{}: {} channels, weight {w}", node.label, x.c)));
                    }
                    let (ho, _, _) = layers::same_padding(x.h, w.h, *stride);
                    let (wo, _, _) = layers::same_padding(x.w, w.w, *stride);
                    Shape4::of(x.n, x.c, ho, wo)
                }
                Op::AvgPool2 => {
                    let x = s(0);
                    if x.h % 2 != 0 || x.w % 2 != 0 {
                        return Err(Error::Shape(format!("{}: odd extent {x}", node.label)));
                    }
                    Shape4::of(x.n, x.c, x.h / 2, x.w / 2)
                }
                Op::BilinearUpsample2 => {
                    let x = s(0);
                    Shape4::of(x.n, x.c, 2 * x.h, 2 * x.w)
                }
                Op::Dense => Shape4::of(s(0).n, s(1).n, 1, 1),
                Op::Concat => {
                    let (a, b) = (s(0), s(1));
                    if a.with_c(1) != b.with_c(1) {
                        return Err(Error::Shape(format!("{}: cannot concatenate {a} and {b}", node.label)));
                    }
                    a.with_c(a.c + b.c)
                }
                Op::ChannelSlice { start, end } => s(0).with_c(end - start),
                Op::SumAll | Op::MseLoss => Shape4::scalar(),
                _ => s(0),
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }
}

/// Parameter or buffer entry in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor4<T>,
    /// `false` for batch-norm running statistics.
    pub trainable: bool,
}

/// Named tensors in registration (build) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self { entries: Vec::new(), index: BTreeMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor, or validates the shape of an existing one and keeps it.
    pub fn declare(&mut self, name: &str, trainable: bool, init: impl FnOnce() -> Tensor4<T>) -> Result<()> {
        if let Some(&i) = self.index.get(name) {
            let value = init();
            if self.entries[i].value.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "parameter '{name}' redeclared with shape {} (stored {})",
                    value.shape(),
                    self.entries[i].value.shape()
                )));
            }
            return Ok(());
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), value: init(), trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor4<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor4<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].value),
            None => Err(Error::UnknownParameter(name.to_string())),
        }
    }

    /// Replaces a value with one of identical shape.
    pub fn set(&mut self, name: &str, value: Tensor4<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        slot.expect_same_shape(&value)?;
        *slot = value;
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        self.index
            .get(name)
            .map(|&i| self.entries[i].trainable)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn trainable(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter().filter(|e| e.trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count of trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|e| e.value.data().len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Hyper-parameters shared by every batch-norm node a builder emits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self { eps: 1e-3, momentum: 0.99 }
    }
}

/// Weight initialization choice for a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    HeUniform,
    GlorotUniform,
}

/// Appends nodes to a [`Graph`] and declares their parameters in a store.
pub struct GraphBuilder<'s, T> {
    graph: Graph,
    store: &'s mut ParamStore<T>,
    rng: ChaCha8Rng,
    unit: Option<usize>,
}

impl<'s, T: Scalar> GraphBuilder<'s, T> {
    /// Parameters that are not yet in `store` are initialized from `seed`.
    pub fn new(store: &'s mut ParamStore<T>, seed: u64) -> Self {
        Self { graph: Graph::default(), store, rng: ChaCha8Rng::seed_from_u64(seed), unit: None }
    }

    pub fn finish(mut self, output: NodeId) -> Graph {
        self.graph.output = output;
        self.graph
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, label: &str) -> NodeId {
        self.graph.nodes.push(Node { op, inputs, label: label.to_string(), unit: self.unit });
        self.graph.nodes.len() - 1
    }

    /// Opens a named unit; nodes pushed until [`Self::end_unit`] belong to it.
    pub fn begin_unit(&mut self, name: &str, kind: UnitKind, input: NodeId) {
        self.graph.units.push(Unit { name: name.to_string(), kind, input, output: input });
        self.unit = Some(self.graph.units.len() - 1);
    }

    pub fn end_unit(&mut self, output: NodeId) {
        if let Some(u) = self.unit.take() {
            self.graph.units[u].output = output;
        }
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input { name: name.to_string() }, vec![], name)
    }

    /// Parameter node, initialized with `init` if the store lacks it.
    pub fn param(&mut self, name: &str, trainable: bool, init: impl FnOnce(&mut ChaCha8Rng) -> Tensor4<T>) -> Result<NodeId> {
        let rng = &mut self.rng;
        self.store.declare(name, trainable, || init(rng))?;
        Ok(self.push(Op::Param { name: name.to_string() }, vec![], name))
    }

    pub fn conv2d(&mut self, x: NodeId, name: &str, spec: layers::ConvSpec, init: Init) -> Result<NodeId> {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let fan_out = spec.out_channels * spec.kernel * spec.kernel;
        let w = self.param(&format!("{name}.weight"), true, |rng| match init {
            Init::HeUniform => layers::init::he_uniform(spec.weight_shape(), fan_in, rng),
            Init::GlorotUniform => layers::init::glorot_uniform(spec.weight_shape(), fan_in, fan_out, rng),
        })?;
        let mut inputs = vec![x, w];
        if spec.has_bias {
            inputs.push(self.param(&format!("{name}.bias"), true, |_| Tensor4::zeros(Shape4::of(1, spec.out_channels, 1, 1)))?);
        }
        Ok(self.push(Op::Conv2d { stride: spec.stride }, inputs, name))
    }

    pub fn depthwise_conv2d(&mut self, x: NodeId, name: &str, channels: usize, kernel: usize, stride: usize) -> Result<NodeId> {
        let w = self.param(&format!("{name}.weight"), true, |rng| {
            layers::init::he_uniform(Shape4::of(channels, 1, kernel, kernel), kernel * kernel, rng)
        })?;
        Ok(self.push(Op::DepthwiseConv2d { stride }, vec![x, w], name))
    }

    pub fn batch_norm(&mut self, x: NodeId, name: &str, channels: usize, cfg: BnConfig) -> Result<NodeId> {
        let shape = Shape4::of(1, channels, 1, 1);
        let one = T::one();
        let gamma = self.param(&format!("{name}.gamma"), true, |_| Tensor4::new(shape, one).expect("valid"))?;
        let beta = self.param(&format!("{name}.beta"), true, |_| Tensor4::zeros(shape))?;
        self.store.declare(&format!("{name}.running_mean"), false, || Tensor4::zeros(shape))?;
        self.store.declare(&format!("{name}.running_var"), false, || Tensor4::new(shape, one).expect("valid"))?;
        Ok(self.push(
            Op::BatchNorm { prefix: name.to_string(), eps: cfg.eps, momentum: cfg.momentum },
            vec![x, gamma, beta],
            name,
        ))
    }

    pub fn dense(&mut self, x: NodeId, name: &str, in_features: usize, out_features: usize, has_bias: bool) -> Result<NodeId> {
        let w = self.param(&format!("{name}.weight"), true, |rng| {
            layers::init::he_uniform(Shape4::of(out_features, in_features, 1, 1), in_features, rng)
        })?;
        let mut inputs = vec![x, w];
        if has_bias {
            inputs.push(self.param(&format!("{name}.bias"), true, |_| Tensor4::zeros(Shape4::of(1, out_features, 1, 1)))?);
        }
        Ok(self.push(Op::Dense, inputs, name))
    }

    pub fn avg_pool2(&mut self, x: NodeId, name: &str) -> NodeId {
        self.push(Op::AvgPool2, vec![x], name)
    }

    pub fn upsample2(&mut self, x: NodeId, name: &str) -> NodeId {
        self.push(Op::BilinearUpsample2, vec![x], name)
    }

    pub fn leaky_relu(&mut self, x: NodeId, name: &str, alpha: f64) -> NodeId {
        self.push(Op::LeakyRelu { alpha }, vec![x], name)
    }

    pub fn sigmoid(&mut self, x: NodeId, name: &str) -> NodeId {
        self.push(Op::Sigmoid, vec![x], name)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, name: &str) -> NodeId {
        self.push(Op::Concat, vec![a, b], name)
    }

    pub fn channel_slice(&mut self, x: NodeId, start: usize, end: usize, name: &str) -> NodeId {
        self.push(Op::ChannelSlice { start, end }, vec![x], name)
    }

    pub fn channel_shuffle(&mut self, x: NodeId, groups: usize, name: &str) -> NodeId {
        self.push(Op::ChannelShuffle { groups }, vec![x], name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, name: &str) -> NodeId {
        self.push(Op::Add, vec![a, b], name)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId, name: &str) -> NodeId {
        self.push(Op::Mul, vec![a, b], name)
    }

    pub fn square(&mut self, x: NodeId, name: &str) -> NodeId {
        self.push(Op::Square, vec![x], name)
    }

    pub fn sum_all(&mut self, x: NodeId, name: &str) -> NodeId {
        self.push(Op::SumAll, vec![x], name)
    }

    pub fn mse_loss(&mut self, prediction: NodeId, target: NodeId, name: &str) -> NodeId {
        self.push(Op::MseLoss, vec![prediction, target], name)
    }
}

/// Batch statistics one batch-norm node observed during a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate<T> {
    pub prefix: String,
    pub momentum: f64,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    /// Trainable parameter name to gradient (same shape as the parameter).
    pub params: BTreeMap<String, Tensor4<T>>,
    /// Free input name to gradient.
    pub inputs: BTreeMap<String, Tensor4<T>>,
}

/// Executes a [`Graph`], caching values for the backward pass.
pub struct Tape<'g, T> {
    graph: &'g Graph,
    values: Vec<Option<Tensor4<T>>>,
    bn: Vec<Option<BnCache<T>>>,
    trainable: Vec<bool>,
    macs: Vec<u64>,
    forwarded: bool,
}

impl<'g, T: Scalar> Tape<'g, T> {
    pub fn new(graph: &'g Graph) -> Self {
        let n = graph.nodes.len();
        Self {
            graph,
            values: vec![None; n],
            bn: vec![None; n],
            trainable: vec![false; n],
            macs: vec![0; n],
            forwarded: false,
        }
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    /// Runs every node; returns the graph output.
    pub fn forward(&mut self, store: &ParamStore<T>, inputs: &[(&str, &Tensor4<T>)], mode: Mode) -> Result<&Tensor4<T>> {
        self.run(store, inputs, mode, 0)
    }

    /// Re-runs nodes `start..` and keeps the cached values of earlier nodes.
    /// Valid when only parameters or inputs read at or after `start` changed.
    pub fn forward_from(&mut self, store: &ParamStore<T>, inputs: &[(&str, &Tensor4<T>)], mode: Mode, start: NodeId) -> Result<&Tensor4<T>> {
        if !self.forwarded {
            return Err(Error::InvalidArgument("forward_from needs a completed forward pass".into()));
        }
        self.run(store, inputs, mode, start)
    }

    fn run(&mut self, store: &ParamStore<T>, inputs: &[(&str, &Tensor4<T>)], mode: Mode, start: NodeId) -> Result<&Tensor4<T>> {
        self.forwarded = false;
        for id in start..self.graph.nodes.len() {
            let node = &self.graph.nodes[id];
            let mut macs = 0u64;
            let value = {
                let arg = |i: usize| self.values[node.inputs[i]].as_ref().expect("inputs precede node");
                match &node.op {
                    Op::Input { name } => {
                        let t = inputs
                            .iter()
                            .find(|(n, _)| n == name)
                            .map(|(_, t)| *t)
                            .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                        t.clone()
                    }
                    Op::Param { name } => {
                        self.trainable[id] = store.is_trainable(name)?;
                        store.get(name)?.clone()
                    }
                    Op::Conv2d { stride } => {
                        let bias = node.inputs.get(2).map(|_| arg(2));
                        layers::conv2d(arg(0), arg(1), bias, *stride, &mut macs).map_err(|e| at(node, e))?
                    }
                    Op::DepthwiseConv2d { stride } => {
                        layers::depthwise_conv2d(arg(0), arg(1), *stride, &mut macs).map_err(|e| at(node, e))?
                    }
                    Op::AvgPool2 => layers::avg_pool2(arg(0)).map_err(|e| at(node, e))?,
                    Op::BilinearUpsample2 => layers::bilinear_upsample2(arg(0)),
                    Op::BatchNorm { prefix, eps, .. } => {
                        let rm = store.get(&format!("{prefix}.running_mean"))?;
                        let rv = store.get(&format!("{prefix}.running_var"))?;
                        let (y, cache) = layers::batch_norm(
                            arg(0),
                            arg(1).data(),
                            arg(2).data(),
                            rm.data(),
                            rv.data(),
                            T::from_f64_lossy(*eps),
                            mode,
                        )
                        .map_err(|e| at(node, e))?;
                        self.bn[id] = Some(cache);
                        y
                    }
                    Op::LeakyRelu { alpha } => layers::leaky_relu(arg(0), T::from_f64_lossy(*alpha)),
                    Op::Sigmoid => layers::sigmoid(arg(0)),
                    Op::Dense => {
                        let bias = node.inputs.get(2).map(|_| arg(2));
                        layers::dense(arg(0), arg(1), bias, &mut macs).map_err(|e| at(node, e))?
                    }
                    Op::Concat => layers::concat_channels(arg(0), arg(1)).map_err(|e| at(node, e))?,
                    Op::ChannelSlice { start, end } => layers::channel_slice(arg(0), *start, *end).map_err(|e| at(node, e))?,
                    Op::ChannelShuffle { groups } => layers::channel_shuffle(arg(0), *groups).map_err(|e| at(node, e))?,
                    Op::Add => arg(0).add(arg(1)).map_err(|e| at(node, e))?,
                    Op::Mul => arg(0).mul(arg(1)).map_err(|e| at(node, e))?,
                    Op::Square => arg(0).map(|v| v * v),
                    Op::SumAll => Tensor4::scalar(T::from_f64_lossy(arg(0).data().iter().map(|v| v.as_f64()).sum::<f64>())),
                    Op::MseLoss => {
                        let (p, t) = (arg(0), arg(1));
                        p.expect_same_shape(t).map_err(|e| at(node, e))?;
                        let sse: f64 = p.data().iter().zip(t.data()).map(|(&a, &b)| { let d = a.as_f64() - b.as_f64(); d * d }).sum();
                        Tensor4::scalar(T::from_f64_lossy(sse / p.shape().n as f64))
                    }
                }
            };
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("output of node '{}' ({})", node.label, node.op.kind())));
            }
            self.macs[id] = macs;
            self.values[id] = Some(value);
        }
        self.forwarded = true;
        Ok(self.values[self.graph.output].as_ref().expect("output computed"))
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor4<T>> {
        self.values.get(id).and_then(|v| v.as_ref())
    }

    pub fn output(&self) -> Option<&Tensor4<T>> {
        self.value(self.graph.output)
    }

    /// Multiply–accumulates each node executed in the last forward pass.
    pub fn macs(&self) -> &[u64] {
        &self.macs
    }

    /// Batch statistics from the last training-mode forward pass, in node order.
    pub fn bn_updates(&self) -> Vec<BnUpdate<T>> {
        self.graph
            .nodes
            .iter()
            .zip(&self.bn)
            .filter_map(|(node, cache)| match (&node.op, cache) {
                (Op::BatchNorm { prefix, momentum, .. }, Some(c)) if c.mode == Mode::Train => Some(BnUpdate {
                    prefix: prefix.clone(),
                    momentum: *momentum,
                    batch_mean: c.batch_mean.clone(),
                    batch_var: c.batch_var.clone(),
                }),
                _ => None,
            })
            .collect()
    }

    /// Reverse pass from a scalar output node.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if !self.forwarded {
            return Err(Error::BackwardBeforeForward);
        }
        let out = self.values[self.graph.output].as_ref().expect("forwarded");
        if out.shape() != Shape4::scalar() {
            return Err(Error::NonScalarLoss(format!("{}", out.shape())));
        }
        self.backward_seeded(Tensor4::scalar(T::one()))
    }

    /// Reverse pass with an explicit output gradient.
    pub fn backward_seeded(&self, seed: Tensor4<T>) -> Result<Gradients<T>> {
        if !self.forwarded {
            return Err(Error::BackwardBeforeForward);
        }
        let n = self.graph.nodes.len();
        let out_id = self.graph.output;
        self.values[out_id].as_ref().expect("forwarded").expect_same_shape(&seed)?;
        let needs = self.needs_grad();
        let mut grads: Vec<Option<Tensor4<T>>> = vec![None; n];
        grads[out_id] = Some(seed);
        let mut result = Gradients { params: BTreeMap::new(), inputs: BTreeMap::new() };
        for id in (0..n).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.graph.nodes[id];
            let val = |i: usize| self.values[node.inputs[i]].as_ref().expect("forwarded");
            let push = |grads: &mut Vec<Option<Tensor4<T>>>, input: usize, g: Tensor4<T>| {
                let target = node.inputs[input];
                if !needs[target] {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&g).expect("gradient shape"),
                    slot => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Input { name } => {
                    result.inputs.insert(name.clone(), dy);
                }
                Op::Param { name } => {
                    if self.trainable[id] {
                        match result.params.get_mut(name) {
                            Some(acc) => acc.add_assign(&dy)?,
                            None => {
                                result.params.insert(name.clone(), dy);
                            }
                        }
                    }
                }
                Op::Conv2d { stride } => {
                    let (dx, dw, db) = layers::conv2d_backward(val(0), val(1), *stride, &dy, node.inputs.len() == 3)?;
                    push(&mut grads, 0, dx);
                    push(&mut grads, 1, dw);
                    if let Some(db) = db {
                        push(&mut grads, 2, db);
                    }
                }
                Op::DepthwiseConv2d { stride } => {
                    let (dx, dw) = layers::depthwise_conv2d_backward(val(0), val(1), *stride, &dy)?;
                    push(&mut grads, 0, dx);
                    push(&mut grads, 1, dw);
                }
                Op::AvgPool2 => push(&mut grads, 0, layers::avg_pool2_backward(val(0).shape(), &dy)),
                Op::BilinearUpsample2 => push(&mut grads, 0, layers::bilinear_upsample2_backward(val(0).shape(), &dy)),
                Op::BatchNorm { .. } => {
                    let cache = self.bn[id].as_ref().expect("forwarded");
                    let (dx, dgamma, dbeta) = layers::batch_norm_backward(&dy, val(1).data(), cache);
                    let ps = val(1).shape();
                    push(&mut grads, 0, dx);
                    push(&mut grads, 1, Tensor4::from_vec(ps, dgamma)?);
                    push(&mut grads, 2, Tensor4::from_vec(ps, dbeta)?);
                }
                Op::LeakyRelu { alpha } => {
                    push(&mut grads, 0, layers::leaky_relu_backward(val(0), &dy, T::from_f64_lossy(*alpha)))
                }
                Op::Sigmoid => {
                    let y = self.values[id].as_ref().expect("forwarded");
                    push(&mut grads, 0, layers::sigmoid_backward(y, &dy))
                }
                Op::Dense => {
                    let (dx, dw, db) = layers::dense_backward(val(0), val(1), &dy, node.inputs.len() == 3);
                    push(&mut grads, 0, dx);
                    push(&mut grads, 1, dw);
                    if let Some(db) = db {
                        push(&mut grads, 2, db);
                    }
                }
                Op::Concat => {
                    let ca = val(0).shape().c;
                    let (da, db) = layers::channel_split(&dy, ca)?;
                    push(&mut grads, 0, da);
                    push(&mut grads, 1, db);
                }
                Op::ChannelSlice { start, .. } => {
                    push(&mut grads, 0, layers::channel_slice_backward(val(0).shape(), *start, &dy))
                }
                Op::ChannelShuffle { groups } => push(&mut grads, 0, layers::channel_shuffle_backward(&dy, *groups)),
                Op::Add => {
                    push(&mut grads, 0, dy.clone());
                    push(&mut grads, 1, dy);
                }
                Op::Mul => {
                    push(&mut grads, 0, dy.mul(val(1))?);
                    push(&mut grads, 1, dy.mul(val(0))?);
                }
                Op::Square => {
                    let two = T::one() + T::one();
                    push(&mut grads, 0, dy.zip(val(0), |g, x| two * x * g)?);
                }
                Op::SumAll => {
                    let g = dy.data()[0];
                    push(&mut grads, 0, Tensor4::new(val(0).shape(), g)?);
                }
                Op::MseLoss => {
                    let (p, t) = (val(0), val(1));
                    let k = dy.data()[0] * T::from_f64_lossy(2.0 / p.shape().n as f64);
                    push(&mut grads, 0, p.zip(t, |a, b| k * (a - b))?);
                    push(&mut grads, 1, p.zip(t, |a, b| k * (b - a))?);
                }
            }
        }
        Ok(result)
    }

    /// Nodes whose gradient reaches a trainable parameter or a free input.
    fn needs_grad(&self) -> Vec<bool> {
        let mut needs: Vec<bool> = self
            .graph
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| matches!(n.op, Op::Input { .. }) || (matches!(n.op, Op::Param { .. }) && self.trainable[id]))
            .collect();
        for id in 0..needs.len() {
            if self.graph.nodes[id].inputs.iter().any(|&i| needs[i]) {
                needs[id] = true;
            }
        }
        needs
    }
}

fn at(node: &Node, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("{}: {m}", node.label)),
        other => other,
    }
}

/// Folds batch statistics into the running averages of the store.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) -> Result<()> {
    for u in updates {
        let m = T::from_f64_lossy(u.momentum);
        layers::update_running(store.get_mut(&format!("{}.running_mean", u.prefix))?.data_mut(), &u.batch_mean, m);
        layers::update_running(store.get_mut(&format!("{}.running_var", u.prefix))?.data_mut(), &u.batch_var, m);
    }
    Ok(())
}

/// Default central-difference step.
pub const GRAD_CHECK_EPS: f64 = 1e-5;
/// Default number of probed entries per parameter tensor.
pub const GRAD_CHECK_PROBES: usize = 32;

/// Outcome of [`grad_check`] for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub parameter: String,
    pub probes: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst probe.
    pub worst_index: usize,
    /// Analytic and finite-difference gradient at the worst probe.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Probes whose `±eps` step moved a leaky-ReLU input across zero.
    pub kinks: usize,
    /// Step reductions in exhaustive mode (see [`grad_check`]).
    pub reduced_steps: usize,
    /// Absolute gradient size below which the difference quotient is roundoff.
    pub noise_floor: f64,
    /// Probes whose discrepancy was within the roundoff bound.
    pub below_floor: usize,
    /// Largest `|a - n|` over the counted probes.
    pub max_abs_error: f64,
}

/// `L(plus) - L(minus)` for two forward passes of the same scalar graph.
/// Sum and mean-square outputs are differenced per element before summing,
/// which avoids cancelling two large nearly equal totals.
fn loss_difference(graph: &Graph, plus: &Tape<'_, f64>, minus: &Tape<'_, f64>) -> f64 {
    let value = |t: &Tape<'_, f64>, id: NodeId| t.values[id].as_ref().expect("forwarded").data().to_vec();
    let out = &graph.nodes[graph.output];
    match &out.op {
        Op::MseLoss => {
            let (p, q) = (out.inputs[0], out.inputs[1]);
            let (pp, pm, qp, qm) = (value(plus, p), value(minus, p), value(plus, q), value(minus, q));
            let n = plus.values[p].as_ref().expect("forwarded").shape().n as f64;
            let s: f64 = (0..pp.len())
                .map(|i| {
                    let (dp, dm) = (pp[i] - qp[i], pm[i] - qm[i]);
                    ((pp[i] - pm[i]) - (qp[i] - qm[i])) * (dp + dm)
                })
                .sum();
            s / n
        }
        Op::SumAll => {
            let x = out.inputs[0];
            match &graph.nodes[x].op {
                Op::Mul => {
                    let (a, b) = (graph.nodes[x].inputs[0], graph.nodes[x].inputs[1]);
                    let (ap, am, bp, bm) = (value(plus, a), value(minus, a), value(plus, b), value(minus, b));
                    (0..ap.len()).map(|i| (ap[i] - am[i]) * bp[i] + am[i] * (bp[i] - bm[i])).sum()
                }
                _ => value(plus, x).iter().zip(value(minus, x)).map(|(a, b)| a - b).sum(),
            }
        }
        _ => plus.output().expect("forwarded").data()[0] - minus.output().expect("forwarded").data()[0],
    }
}

/// Compares the analytic gradient of a scalar graph with central differences
/// `(L(theta + eps) - L(theta - eps)) / (2 eps)` at `probes` random entries of
/// `parameter`, returning the worst relative error
/// `|a - n| / max(|a|, |n|)`.
///
/// The roundoff of the difference quotient is bounded by
/// `floor = max(1e-12, 64 u |L| / eps)` (`u` the unit roundoff). A probe
/// with `|a - n| < floor` agrees to within what the quotient can resolve and
/// counts as error 0; otherwise the denominator is at least `floor`.
///
/// Entries whose perturbation flips the sign of any leaky-ReLU input are
/// redrawn, up to `8 * probes` draws in total; a tensor where every draw hits
/// a kink keeps the kinked probes. When `probes` covers the whole tensor every
/// entry is checked once instead, and a kinked entry is retried with the step
/// divided by 10, at most twice. Running statistics are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    graph: &Graph,
    store: &ParamStore<f64>,
    inputs: &[(&str, &Tensor4<f64>)],
    mode: Mode,
    parameter: &str,
    probes: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheck> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    if probes == 0 {
        return Err(Error::InvalidArgument("probe count must be positive".into()));
    }
    let base = store.get(parameter)?;
    let Some(start) = graph.nodes.iter().position(|n| matches!(&n.op, Op::Param { name } if name == parameter)) else {
        return Err(Error::UnknownParameter(parameter.to_string()));
    };
    let mut tape = Tape::new(graph);
    let loss = tape.forward(store, inputs, mode)?.data()[0];
    let grads = tape.backward()?;
    let analytic = grads
        .params
        .get(parameter)
        .cloned()
        .unwrap_or_else(|| Tensor4::zeros(base.shape()));
    let kink_nodes: Vec<NodeId> = (start..graph.nodes.len())
        .filter(|&id| matches!(graph.nodes[id].op, Op::LeakyRelu { .. }))
        .map(|id| graph.nodes[id].inputs[0])
        .collect();
    let crossed = |t: &Tape<'_, f64>| {
        kink_nodes.iter().any(|&id| {
            let (a, b) = (tape.values[id].as_ref(), t.values[id].as_ref());
            match (a, b) {
                (Some(a), Some(b)) => a.data().iter().zip(b.data()).any(|(&u, &v)| (u > 0.0) != (v > 0.0)),
                _ => false,
            }
        })
    };

    let len = base.data().len();
    let exhaustive = probes >= len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut plus_tape = Tape::new(graph);
    plus_tape.forward(store, inputs, mode)?;
    let mut minus_tape = Tape::new(graph);
    minus_tape.forward(store, inputs, mode)?;
    let noise_floor = (64.0 * f64::EPSILON * 0.5 * loss.abs() / eps).max(1e-12);
    let mut out = GradCheck {
        parameter: parameter.to_string(),
        probes: 0,
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        kinks: 0,
        reduced_steps: 0,
        below_floor: 0,
        noise_floor,
        max_abs_error: 0.0,
    };
    let mut kinked = Vec::new();
    let mut draws = 0;
    while out.probes < probes.min(len) && draws < 8 * probes {
        let idx = if exhaustive { draws } else { rng.gen_range(0..len) };
        draws += 1;
        if exhaustive && idx >= len {
            break;
        }
        let original = base.data()[idx];
        let mut step = eps;
        let (numeric, kink) = loop {
            work.get_mut(parameter)?.data_mut()[idx] = original + step;
            plus_tape.forward_from(&work, inputs, mode, start)?;
            work.get_mut(parameter)?.data_mut()[idx] = original - step;
            minus_tape.forward_from(&work, inputs, mode, start)?;
            work.get_mut(parameter)?.data_mut()[idx] = original;
            let kink = crossed(&plus_tape) || crossed(&minus_tape);
            let numeric = loss_difference(graph, &plus_tape, &minus_tape) / (2.0 * step);
            // Every entry must be checked, so a kinked one is retried closer in.
            if kink && exhaustive && step > eps * 1e-2 {
                out.reduced_steps += 1;
                step /= 10.0;
                continue;
            }
            break (numeric, kink);
        };
        let a = analytic.data()[idx];
        let diff = (a - numeric).abs();
        let floor = noise_floor * eps / step;
        let rel = if diff < floor {
            out.below_floor += 1;
            0.0
        } else {
            diff / a.abs().max(numeric.abs()).max(floor)
        };
        if kink {
            out.kinks += 1;
            if !exhaustive {
                kinked.push((idx, rel, a, numeric));
                continue;
            }
        }
        out.probes += 1;
        out.max_abs_error = out.max_abs_error.max(diff);
        if rel >= out.max_rel_error {
            (out.max_rel_error, out.worst_index, out.worst_analytic, out.worst_numeric) = (rel, idx, a, numeric);
        }
    }
    // Every draw crossed a kink: report those probes rather than nothing.
    if out.probes == 0 {
        for (idx, rel, a, numeric) in kinked {
            out.probes += 1;
            out.max_abs_error = out.max_abs_error.max((a - numeric).abs());
            if rel >= out.max_rel_error {
                (out.max_rel_error, out.worst_index, out.worst_analytic, out.worst_numeric) = (rel, idx, a, numeric);
            }
        }
    }
    Ok(out)
}
