//! A small static dataflow graph over the tensor primitives, with a
//! partial evaluator that can start from any set of seeded nodes.

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

use crate::tensor::{self, ConvSpec, Element, Tensor, TensorError};
use crate::weights::WeightStore;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Identity,
    /// Parameters live under `<node name>.weight` and `<node name>.bias`.
    Conv(ConvSpec),
    Relu,
    Sigmoid,
    FastSigmoid,
    GlobalAvgPool,
    /// Inputs `[features, per-channel scale]`.
    ScaleChannels,
    Add,
    Concat,
    PixelShuffle(usize),
    Bilinear(usize),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Identity => "identity",
            Op::Conv(_) => "conv",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::FastSigmoid => "fast_sigmoid",
            Op::GlobalAvgPool => "pool",
            Op::ScaleChannels => "scale",
            Op::Add => "add",
            Op::Concat => "concat",
            Op::PixelShuffle(_) => "shuffle",
            Op::Bilinear(_) => "bilinear",
        }
    }

    pub fn is_gate(&self) -> bool {
        matches!(self, Op::Sigmoid | Op::FastSigmoid)
    }
}

/// Spatial size of a node relative to the graph input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extent {
    /// `factor` times the input height and width.
    Grid(usize),
    /// Globally pooled, `1 x 1`.
    Pooled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub channels: usize,
    pub extent: Extent,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph construction: {0}")]
    Build(String),
    #[error("node `{node}`: {source}")]
    Tensor {
        node: String,
        #[source]
        source: TensorError,
    },
    #[error("missing weight `{0}`")]
    MissingWeight(String),
    #[error("no value available for node `{0}`")]
    MissingValue(String),
    #[error("node id {0} out of range")]
    UnknownNode(NodeId),
    #[error("seed for `{node}` has {found} channels, node carries {expected}")]
    SeedChannels {
        node: String,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.iter().map(|n| n.inputs.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Conv nodes in build order.
    pub fn convs(&self) -> impl Iterator<Item = (NodeId, &Node, &ConvSpec)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Conv(spec) => Some((i, n, spec)),
            _ => None,
        })
    }

    /// `mask[i]` is true when node `i` is `target` or feeds it.
    pub fn ancestors(&self, target: NodeId) -> Vec<bool> {
        self.reachable_from(&[target], &HashSet::new())
    }

    /// Backwards closure of `targets`, not descending through `stops`.
    fn reachable_from(&self, targets: &[NodeId], stops: &HashSet<NodeId>) -> Vec<bool> {
        let mut mask = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = targets.to_vec();
        while let Some(id) = stack.pop() {
            if mask[id] {
                continue;
            }
            mask[id] = true;
            if !stops.contains(&id) {
                stack.extend(self.nodes[id].inputs.iter().copied());
            }
        }
        mask
    }

    /// Node ids that consume `id`.
    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.contains(&id))
            .map(|(i, _)| i)
            .collect()
    }

    /// Evaluates `targets`, treating each seeded node as already computed.
    ///
    /// Only nodes on a path from a seed (or the input) to a target run. When
    /// `retain` is false, intermediate values are dropped as soon as their
    /// last consumer has run.
    pub fn evaluate<T: Element>(
        &self,
        weights: &WeightStore<T>,
        seeds: Vec<(NodeId, Tensor<T>)>,
        targets: &[NodeId],
        retain: bool,
    ) -> Result<Evaluation<T>, GraphError> {
        for &t in targets {
            if t >= self.nodes.len() {
                return Err(GraphError::UnknownNode(t));
            }
        }
        let mut values: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut stops = HashSet::new();
        for (id, t) in seeds {
            let node = self.nodes.get(id).ok_or(GraphError::UnknownNode(id))?;
            if t.c() != node.channels {
                return Err(GraphError::SeedChannels {
                    node: node.name.clone(),
                    expected: node.channels,
                    found: t.c(),
                });
            }
            stops.insert(id);
            values[id] = Some(t);
        }
        let needed = self.reachable_from(targets, &stops);

        let mut remaining = vec![0usize; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if needed[i] && !stops.contains(&i) {
                for &p in &n.inputs {
                    remaining[p] += 1;
                }
            }
        }
        let is_target: HashSet<NodeId> = targets.iter().copied().collect();
        let mut stats = ExecStats::default();

        for id in 0..self.nodes.len() {
            if !needed[id] || stops.contains(&id) {
                continue;
            }
            let node = &self.nodes[id];
            let out = {
                let mut args = Vec::with_capacity(node.inputs.len());
                for &p in &node.inputs {
                    args.push(
                        values[p]
                            .as_ref()
                            .ok_or_else(|| GraphError::MissingValue(self.nodes[p].name.clone()))?,
                    );
                }
                if matches!(node.op, Op::Input) {
                    return Err(GraphError::MissingValue(node.name.clone()));
                }
                apply(node, &args, weights, &mut stats)?
            };
            values[id] = Some(out);
            if !retain {
                for &p in &node.inputs {
                    remaining[p] -= 1;
                    if remaining[p] == 0 && !is_target.contains(&p) {
                        values[p] = None;
                    }
                }
            }
        }
        Ok(Evaluation { values, stats })
    }
}

fn apply<T: Element>(
    node: &Node,
    args: &[&Tensor<T>],
    weights: &WeightStore<T>,
    stats: &mut ExecStats,
) -> Result<Tensor<T>, GraphError> {
    let wrap = |source: TensorError| GraphError::Tensor {
        node: node.name.clone(),
        source,
    };
    let out = match &node.op {
        Op::Input => unreachable!("input nodes are always seeded"),
        Op::Identity => args[0].clone(),
        Op::Conv(spec) => {
            let (w, b) = conv_params(&node.name, spec, weights)?;
            let y = tensor::conv2d(args[0], spec, w, b).map_err(wrap)?;
            stats.conv_macs += spec.macs_per_pixel() * (y.n() * y.h() * y.w()) as u64;
            y
        }
        Op::Relu => tensor::relu(args[0]),
        Op::Sigmoid | Op::FastSigmoid => {
            let x = args[0];
            stats.gate_evaluations += (x.len() / x.n().max(1)) as u64;
            if matches!(node.op, Op::Sigmoid) {
                tensor::sigmoid(x)
            } else {
                tensor::fast_sigmoid(x)
            }
        }
        Op::GlobalAvgPool => tensor::global_avg_pool(args[0]).map_err(wrap)?,
        Op::ScaleChannels => tensor::scale_channels(args[0], args[1]).map_err(wrap)?,
        Op::Add => tensor::add(args[0], args[1]).map_err(wrap)?,
        Op::Concat => tensor::concat_channels(args).map_err(wrap)?,
        Op::PixelShuffle(s) => tensor::pixel_shuffle(args[0], *s).map_err(wrap)?,
        Op::Bilinear(s) => tensor::bilinear_resize(args[0], *s).map_err(wrap)?,
    };
    Ok(out)
}

pub(crate) fn conv_params<'a, T: Element>(
    name: &str,
    spec: &ConvSpec,
    weights: &'a WeightStore<T>,
) -> Result<(&'a Tensor<T>, Option<&'a Tensor<T>>), GraphError> {
    let wname = format!("{name}.weight");
    let w = weights
        .get(&wname)
        .ok_or_else(|| GraphError::MissingWeight(wname.clone()))?;
    let b = if spec.has_bias {
        let bname = format!("{name}.bias");
        Some(weights.get(&bname).ok_or(GraphError::MissingWeight(bname))?)
    } else {
        None
    };
    Ok((w, b))
}

/// Counters collected while a graph runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecStats {
    /// Gate activations evaluated, per batch item.
    pub gate_evaluations: u64,
    /// Convolution multiply-accumulates, summed over the batch.
    pub conv_macs: u64,
}

/// Values produced by [`Graph::evaluate`].
pub struct Evaluation<T: Element> {
    values: Vec<Option<Tensor<T>>>,
    pub stats: ExecStats,
}

impl<T: Element> Evaluation<T> {
    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.values.get(id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.values.get_mut(id).and_then(Option::take)
    }
}

impl<T: Element> fmt::Debug for Evaluation<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let live = self.values.iter().filter(|v| v.is_some()).count();
        write!(f, "Evaluation {{ live: {live}, stats: {:?} }}", self.stats)
    }
}

/// Incremental graph construction with shape propagation.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: Graph,
    names: HashSet<String>,
}

type BuildResult = Result<NodeId, GraphError>;

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finish(self) -> Graph {
        self.graph
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.graph.nodes[id].channels
    }

    fn push(
        &mut self,
        name: String,
        op: Op,
        inputs: Vec<NodeId>,
        channels: usize,
        extent: Extent,
    ) -> BuildResult {
        if !self.names.insert(name.clone()) {
            return Err(GraphError::Build(format!("duplicate node name `{name}`")));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.graph.nodes.len()) {
            return Err(GraphError::UnknownNode(bad));
        }
        self.graph.nodes.push(Node {
            name,
            op,
            inputs,
            channels,
            extent,
        });
        Ok(self.graph.nodes.len() - 1)
    }

    fn extent(&self, id: NodeId) -> Extent {
        self.graph.nodes[id].extent
    }

    pub fn input(&mut self, name: impl Into<String>, channels: usize) -> BuildResult {
        self.push(name.into(), Op::Input, vec![], channels, Extent::Grid(1))
    }

    pub fn identity(&mut self, name: impl Into<String>, x: NodeId) -> BuildResult {
        let (c, e) = (self.channels(x), self.extent(x));
        self.push(name.into(), Op::Identity, vec![x], c, e)
    }

    pub fn conv(&mut self, name: impl Into<String>, x: NodeId, spec: ConvSpec) -> BuildResult {
        let name = name.into();
        spec.validate().map_err(|e| GraphError::Build(format!("{name}: {e}")))?;
        if self.channels(x) != spec.in_channels {
            return Err(GraphError::Build(format!(
                "{name}: expects {} input channels, `{}` carries {}",
                spec.in_channels,
                self.graph.nodes[x].name,
                self.channels(x)
            )));
        }
        let extent = self.extent(x);
        if extent == Extent::Pooled && (spec.kernel != (1, 1) || spec.padding != 0) {
            return Err(GraphError::Build(format!(
                "{name}: only 1x1 unpadded convolutions apply to pooled features"
            )));
        }
        self.push(name, Op::Conv(spec), vec![x], spec.out_channels, extent)
    }

    fn unary(&mut self, name: impl Into<String>, op: Op, x: NodeId) -> BuildResult {
        let (c, e) = (self.channels(x), self.extent(x));
        self.push(name.into(), op, vec![x], c, e)
    }

    pub fn relu(&mut self, name: impl Into<String>, x: NodeId) -> BuildResult {
        self.unary(name, Op::Relu, x)
    }

    pub fn sigmoid(&mut self, name: impl Into<String>, x: NodeId) -> BuildResult {
        self.unary(name, Op::Sigmoid, x)
    }

    pub fn fast_sigmoid(&mut self, name: impl Into<String>, x: NodeId) -> BuildResult {
        self.unary(name, Op::FastSigmoid, x)
    }

    pub fn pool(&mut self, name: impl Into<String>, x: NodeId) -> BuildResult {
        let c = self.channels(x);
        self.push(name.into(), Op::GlobalAvgPool, vec![x], c, Extent::Pooled)
    }

    pub fn scale_channels(&mut self, name: impl Into<String>, x: NodeId, s: NodeId) -> BuildResult {
        let name = name.into();
        if self.extent(s) != Extent::Pooled || self.channels(s) != self.channels(x) {
            return Err(GraphError::Build(format!(
                "{name}: scale must be pooled with {} channels",
                self.channels(x)
            )));
        }
        let (c, e) = (self.channels(x), self.extent(x));
        self.push(name, Op::ScaleChannels, vec![x, s], c, e)
    }

    pub fn add(&mut self, name: impl Into<String>, a: NodeId, b: NodeId) -> BuildResult {
        let name = name.into();
        if self.channels(a) != self.channels(b) || self.extent(a) != self.extent(b) {
            return Err(GraphError::Build(format!(
                "{name}: operands differ ({} ch {:?} vs {} ch {:?})",
                self.channels(a),
                self.extent(a),
                self.channels(b),
                self.extent(b)
            )));
        }
        let (c, e) = (self.channels(a), self.extent(a));
        self.push(name, Op::Add, vec![a, b], c, e)
    }

    pub fn concat(&mut self, name: impl Into<String>, parts: &[NodeId]) -> BuildResult {
        let name = name.into();
        let first = *parts
            .first()
            .ok_or_else(|| GraphError::Build(format!("{name}: nothing to concatenate")))?;
        if parts.iter().any(|&p| self.extent(p) != self.extent(first)) {
            return Err(GraphError::Build(format!("{name}: spatial extents differ")));
        }
        let c = parts.iter().map(|&p| self.channels(p)).sum();
        let e = self.extent(first);
        self.push(name, Op::Concat, parts.to_vec(), c, e)
    }

    pub fn pixel_shuffle(&mut self, name: impl Into<String>, x: NodeId, s: usize) -> BuildResult {
        let name = name.into();
        let c = self.channels(x);
        let Extent::Grid(f) = self.extent(x) else {
            return Err(GraphError::Build(format!("{name}: cannot shuffle pooled features")));
        };
        if s == 0 || c % (s * s) != 0 {
            return Err(GraphError::Build(format!(
                "{name}: {c} channels not divisible by {s}^2"
            )));
        }
        self.push(name, Op::PixelShuffle(s), vec![x], c / (s * s), Extent::Grid(f * s))
    }

    pub fn bilinear(&mut self, name: impl Into<String>, x: NodeId, s: usize) -> BuildResult {
        let name = name.into();
        let Extent::Grid(f) = self.extent(x) else {
            return Err(GraphError::Build(format!("{name}: cannot resize pooled features")));
        };
        let c = self.channels(x);
        self.push(name, Op::Bilinear(s), vec![x], c, Extent::Grid(f * s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Graph, NodeId, NodeId, WeightStore<f32>) {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 2).unwrap();
        let c = b.conv("c", x, ConvSpec::same(2, 2, 1)).unwrap();
        let r = b.relu("r", c).unwrap();
        let out = b.add("out", r, x).unwrap();
        let mut w = WeightStore::new();
        w.insert("c.weight", Tensor::full([2, 2, 1, 1], 1.0));
        w.insert("c.bias", Tensor::zeros([2, 1, 1, 1]));
        (b.finish(), x, out, w)
    }

    #[test]
    fn evaluates_and_frees_intermediates() {
        let (g, x, out, w) = tiny();
        let input = Tensor::full([1, 2, 2, 2], 1.0);
        let ev = g.evaluate(&w, vec![(x, input)], &[out], false).unwrap();
        assert!(ev.value(out).unwrap().data().iter().all(|&v| v == 3.0));
        assert!(ev.value(1).is_none(), "conv output should be released");
    }

    #[test]
    fn seeding_a_middle_node_skips_its_producers() {
        let (g, x, out, w) = tiny();
        let r = g.find("r").unwrap();
        let seeds = vec![(x, Tensor::zeros([1, 2, 2, 2])), (r, Tensor::full([1, 2, 2, 2], 5.0))];
        let ev = g.evaluate(&w, seeds, &[out], true).unwrap();
        assert!(ev.value(1).is_none(), "conv must not run when relu is seeded");
        assert!(ev.value(out).unwrap().data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn missing_input_and_weights_are_reported() {
        let (g, _, out, w) = tiny();
        assert!(matches!(
            g.evaluate(&w, vec![], &[out], false),
            Err(GraphError::MissingValue(_))
        ));
        let empty = WeightStore::<f32>::new();
        let err = g
            .evaluate(&empty, vec![(0, Tensor::zeros([1, 2, 2, 2]))], &[out], false)
            .unwrap_err();
        assert!(matches!(err, GraphError::MissingWeight(ref n) if n == "c.weight"));
    }

    #[test]
    fn builder_rejects_inconsistent_shapes() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 3).unwrap();
        assert!(b.conv("bad", x, ConvSpec::same(4, 4, 3)).is_err());
        let c = b.conv("c", x, ConvSpec::same(3, 5, 3)).unwrap();
        assert!(b.add("sum", c, x).is_err());
        assert!(b.pixel_shuffle("ps", c, 2).is_err());
        assert!(b.identity("c", x).is_err(), "duplicate names are rejected");
    }
}
