//! Declarative residual-block graphs with execution, backpropagation and
//! exact static FLOPs counting.
//!
//! Four canonical constructions are provided. Counted with 1 MAC = 1 FLOP on
//! an input of `c` channels and `h x w` pixels they cost exactly:
//!
//! - `ifrnet_residual` — three 3x3 convs and a skip: `27 c^2 h w`
//! - `elan_original`   — channel-doubling split/transform/aggregate: `42 c^2 h w`
//! - `elan_lite`       — channel-splitting variant: `(25/3) c^2 h w`
//! - `elan_lite_x2`    — two stacked lite blocks: `(50/3) c^2 h w`, still
//!   below the ifrnet block.

use crate::error::{Error, Result};
use crate::tensor::{
    add, concat_channels, conv2d, conv2d_grad, prelu, prelu_grad, split_channels, ConvSpec, Scalar,
    Tensor,
};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// The canonical block families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    IfrnetResidual,
    ElanOriginal,
    ElanLite,
    ElanLiteX2,
}

impl BlockKind {
    pub const ALL: [BlockKind; 4] =
        [BlockKind::IfrnetResidual, BlockKind::ElanOriginal, BlockKind::ElanLite, BlockKind::ElanLiteX2];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::IfrnetResidual => "ifrnet_residual",
            BlockKind::ElanOriginal => "elan_original",
            BlockKind::ElanLite => "elan_lite",
            BlockKind::ElanLiteX2 => "elan_lite_x2",
        }
    }

    /// The designed cost in units of `c^2 h w`.
    pub fn flops_coefficient(self) -> Ratio<u64> {
        match self {
            BlockKind::IfrnetResidual => Ratio::from_integer(27),
            BlockKind::ElanOriginal => Ratio::from_integer(42),
            BlockKind::ElanLite => Ratio::new(25, 3),
            BlockKind::ElanLiteX2 => Ratio::new(50, 3),
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BlockKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown block kind `{s}`")))
    }
}

/// One graph node. `inputs` are indices of earlier nodes, which makes the
/// graph acyclic by construction.
#[derive(Clone, Debug)]
pub struct BlockNode {
    pub name: String,
    pub op: BlockOp,
    pub inputs: Vec<usize>,
}

#[derive(Clone, Debug)]
pub enum BlockOp {
    Input,
    Conv(ConvSpec),
    /// Learnable per-channel slope, stored as `<name>.slope`.
    Prelu,
    /// Channel slice `[c * start / den, c * end / den)` of the input node.
    Slice { start: usize, end: usize, den: usize },
    Concat,
    Add,
}

/// A single-input single-output DAG of convolution / split / concat / add /
/// activation nodes with matching input and output channel counts.
#[derive(Clone, Debug)]
pub struct BlockGraph {
    channels: usize,
    nodes: Vec<BlockNode>,
    node_channels: Vec<usize>,
}

impl BlockGraph {
    /// Input channel count (== output channel count).
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn nodes(&self) -> &[BlockNode] {
        &self.nodes
    }

    /// Graph with no operations: output equals input. Costs zero FLOPs.
    pub fn empty(channels: usize) -> Self {
        Self {
            channels,
            nodes: vec![BlockNode { name: "input".into(), op: BlockOp::Input, inputs: vec![] }],
            node_channels: vec![channels],
        }
    }
}

struct GraphBuilder {
    channels: usize,
    nodes: Vec<BlockNode>,
    node_channels: Vec<usize>,
}

impl GraphBuilder {
    fn new(channels: usize) -> Self {
        Self {
            channels,
            nodes: vec![BlockNode { name: "input".into(), op: BlockOp::Input, inputs: vec![] }],
            node_channels: vec![channels],
        }
    }

    fn push(&mut self, name: &str, op: BlockOp, inputs: Vec<usize>, out_ch: usize) -> usize {
        self.nodes.push(BlockNode { name: name.to_string(), op, inputs });
        self.node_channels.push(out_ch);
        self.nodes.len() - 1
    }

    fn conv(&mut self, name: &str, kernel: usize, input: usize, out_ch: usize) -> usize {
        let in_ch = self.node_channels[input];
        let spec = ConvSpec { kernel, in_ch, out_ch, stride: 1, bias: true };
        self.push(name, BlockOp::Conv(spec), vec![input], out_ch)
    }

    fn prelu(&mut self, name: &str, input: usize) -> usize {
        let ch = self.node_channels[input];
        self.push(name, BlockOp::Prelu, vec![input], ch)
    }

    fn slice(&mut self, name: &str, input: usize, start: usize, end: usize, den: usize) -> usize {
        let ch = self.node_channels[input];
        assert_eq!(ch * (end - start) % den, 0, "slice fractions must land on whole channels");
        let out = ch * (end - start) / den;
        self.push(name, BlockOp::Slice { start, end, den }, vec![input], out)
    }

    fn concat(&mut self, name: &str, inputs: Vec<usize>) -> usize {
        let out: usize = inputs.iter().map(|&i| self.node_channels[i]).sum();
        self.push(name, BlockOp::Concat, inputs, out)
    }

    fn add(&mut self, name: &str, a: usize, b: usize) -> usize {
        assert_eq!(self.node_channels[a], self.node_channels[b]);
        let ch = self.node_channels[a];
        self.push(name, BlockOp::Add, vec![a, b], ch)
    }

    fn finish(self) -> BlockGraph {
        assert_eq!(
            *self.node_channels.last().unwrap(),
            self.channels,
            "residual block must preserve the channel count"
        );
        BlockGraph { channels: self.channels, nodes: self.nodes, node_channels: self.node_channels }
    }
}

/// Appends a conv followed by its activation; returns the activation node.
fn conv_act(b: &mut GraphBuilder, name: &str, kernel: usize, input: usize, out_ch: usize) -> usize {
    let c = b.conv(name, kernel, input, out_ch);
    b.prelu(&format!("{name}_act"), c)
}

fn build_ifrnet_residual(c: usize) -> BlockGraph {
    let mut b = GraphBuilder::new(c);
    let a1 = conv_act(&mut b, "conv1", 3, 0, c);
    let a2 = conv_act(&mut b, "conv2", 3, a1, c);
    let c3 = b.conv("conv3", 3, a2, c);
    b.add("skip", c3, 0);
    b.finish()
}

fn build_elan_original(c: usize) -> BlockGraph {
    let mut b = GraphBuilder::new(c);
    // two point-wise stems double the working width to 2c
    let stem_a = conv_act(&mut b, "stem_a", 1, 0, c);
    let stem_b = conv_act(&mut b, "stem_b", 1, 0, c);
    // one stem runs through four 3x3 convs, tapped after every second
    let a1 = conv_act(&mut b, "conv1", 3, stem_b, c);
    let a2 = conv_act(&mut b, "conv2", 3, a1, c);
    let a3 = conv_act(&mut b, "conv3", 3, a2, c);
    let a4 = conv_act(&mut b, "conv4", 3, a3, c);
    let cat = b.concat("concat", vec![stem_a, stem_b, a2, a4]);
    let merge = b.conv("merge", 1, cat, c);
    b.add("skip", merge, 0);
    b.finish()
}

/// The lightweight variant: no channel doubling; a third of the input passes
/// through untouched while the remaining two thirds run a narrow 3x3 chain,
/// tapped after every second conv.
fn append_elan_lite(b: &mut GraphBuilder, prefix: &str, input: usize) -> usize {
    let c = b.node_channels[input];
    let pass = b.slice(&format!("{prefix}pass"), input, 0, 1, 3);
    let proc = b.slice(&format!("{prefix}proc"), input, 1, 3, 3);
    let third = c / 3;
    let a1 = conv_act(b, &format!("{prefix}conv1"), 3, proc, third);
    let a2 = conv_act(b, &format!("{prefix}conv2"), 3, a1, third);
    let a3 = conv_act(b, &format!("{prefix}conv3"), 3, a2, third);
    let a4 = conv_act(b, &format!("{prefix}conv4"), 3, a3, third);
    let a5 = conv_act(b, &format!("{prefix}conv5"), 3, a4, third);
    let a6 = conv_act(b, &format!("{prefix}conv6"), 3, a5, third);
    let cat = b.concat(&format!("{prefix}concat"), vec![pass, a2, a4, a6]);
    let merge = b.conv(&format!("{prefix}merge"), 1, cat, c);
    b.add(&format!("{prefix}skip"), merge, input)
}

fn build_elan_lite(c: usize) -> BlockGraph {
    let mut b = GraphBuilder::new(c);
    append_elan_lite(&mut b, "", 0);
    b.finish()
}

fn build_elan_lite_x2(c: usize) -> BlockGraph {
    let mut b = GraphBuilder::new(c);
    let first = append_elan_lite(&mut b, "b1.", 0);
    append_elan_lite(&mut b, "b2.", first);
    b.finish()
}

/// Builds the canonical graph for a block kind. `c` must be divisible by 6 so
/// the thirds split lands on whole channels.
pub fn build_block(kind: BlockKind, c: usize) -> Result<BlockGraph> {
    if c == 0 || c % 6 != 0 {
        return Err(Error::Config(format!("block channel count must be divisible by 6, got {c}")));
    }
    let g = match kind {
        BlockKind::IfrnetResidual => build_ifrnet_residual(c),
        BlockKind::ElanOriginal => build_elan_original(c),
        BlockKind::ElanLite => build_elan_lite(c),
        BlockKind::ElanLiteX2 => build_elan_lite_x2(c),
    };
    // Frozen contract: the counted cost matches the designed coefficient.
    let counted = count_flops(&g, 1, 1);
    let expected = kind.flops_coefficient() * Ratio::from_integer((c * c) as u64);
    assert_eq!(counted, expected, "{kind} graph cost drifted from its designed coefficient");
    Ok(g)
}

/// Exact FLOPs for one execution on an `h x w` input: the sum over conv nodes
/// of `k^2 * c_in * c_out * h_out * w_out`, as a rational so fractional
/// coefficients stay exact.
pub fn count_flops(graph: &BlockGraph, h: usize, w: usize) -> Ratio<u64> {
    let mut total = Ratio::from_integer(0u64);
    for node in &graph.nodes {
        if let BlockOp::Conv(spec) = &node.op {
            total += Ratio::from_integer(spec.flops(h, w));
        }
    }
    total
}

/// Parameter descriptors for every learnable tensor in a graph, in node order.
pub struct ParamSpec {
    /// Key suffix relative to a caller-chosen prefix, e.g. `conv1.w`.
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

pub enum ParamInit {
    /// Fan-in scaled normal.
    ConvWeight { fan_in: usize },
    Zero,
    /// PReLU slope, initialised to 0.25.
    Slope,
}

pub fn param_specs(graph: &BlockGraph) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for (i, node) in graph.nodes.iter().enumerate() {
        match &node.op {
            BlockOp::Conv(spec) => {
                out.push(ParamSpec {
                    name: format!("{}.w", node.name),
                    shape: spec.weight_shape().to_vec(),
                    init: ParamInit::ConvWeight { fan_in: spec.in_ch * spec.kernel * spec.kernel },
                });
                out.push(ParamSpec { name: format!("{}.b", node.name), shape: vec![spec.out_ch], init: ParamInit::Zero });
            }
            BlockOp::Prelu => {
                let ch = graph.node_channels[graph.nodes[i].inputs[0]];
                out.push(ParamSpec { name: format!("{}.slope", node.name), shape: vec![ch], init: ParamInit::Slope });
            }
            _ => {}
        }
    }
    out
}

pub(crate) fn lookup<'a, T: Scalar>(
    weights: &'a BTreeMap<String, Tensor<T>>,
    key: &str,
) -> Result<&'a Tensor<T>> {
    weights.get(key).ok_or_else(|| Error::MissingWeight(key.to_string()))
}

/// All node outputs of one forward pass, kept for backpropagation.
pub struct BlockCache<T> {
    values: Vec<Tensor<T>>,
}

fn eval_node<T: Scalar>(
    graph: &BlockGraph,
    idx: usize,
    values: &[Tensor<T>],
    weights: &BTreeMap<String, Tensor<T>>,
    prefix: &str,
) -> Result<Tensor<T>> {
    let node = &graph.nodes[idx];
    let arg = |i: usize| &values[node.inputs[i]];
    match &node.op {
        BlockOp::Input => unreachable!("input node is seeded before evaluation"),
        BlockOp::Conv(spec) => {
            let w = lookup(weights, &format!("{prefix}{}.w", node.name))?;
            let b = lookup(weights, &format!("{prefix}{}.b", node.name))?;
            conv2d(arg(0), spec, w, Some(b))
        }
        BlockOp::Prelu => {
            let s = lookup(weights, &format!("{prefix}{}.slope", node.name))?;
            prelu(arg(0), s)
        }
        BlockOp::Slice { start, end, den } => {
            let (c, _, _) = arg(0).dims3()?;
            let lo = c * start / den;
            let hi = c * end / den;
            let parts = split_channels(arg(0), &[lo, hi - lo, c - hi])?;
            Ok(parts.into_iter().nth(1).unwrap())
        }
        BlockOp::Concat => {
            let refs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &values[i]).collect();
            concat_channels(&refs)
        }
        BlockOp::Add => add(arg(0), arg(1)),
    }
}

/// Executes a block graph. The input's channel count must match the graph.
pub fn run_block<T: Scalar>(
    graph: &BlockGraph,
    input: &Tensor<T>,
    weights: &BTreeMap<String, Tensor<T>>,
    prefix: &str,
) -> Result<Tensor<T>> {
    Ok(run_block_cached(graph, input, weights, prefix)?.0)
}

pub fn run_block_cached<T: Scalar>(
    graph: &BlockGraph,
    input: &Tensor<T>,
    weights: &BTreeMap<String, Tensor<T>>,
    prefix: &str,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    let (c, _, _) = input.dims3()?;
    if c != graph.channels {
        return Err(Error::Shape {
            op: "run_block",
            detail: format!("input has {} channels, graph expects {}", c, graph.channels),
        });
    }
    let mut values: Vec<Tensor<T>> = Vec::with_capacity(graph.nodes.len());
    values.push(input.clone());
    for idx in 1..graph.nodes.len() {
        let v = eval_node(graph, idx, &values, weights, prefix)?;
        values.push(v);
    }
    let out = values.last().unwrap().clone();
    Ok((out, BlockCache { values }))
}

/// Backpropagates through a cached forward pass. Weight gradients are
/// accumulated into `grads` under `prefix`; the return value is the gradient
/// with respect to the block input.
pub fn block_backward<T: Scalar>(
    graph: &BlockGraph,
    cache: &BlockCache<T>,
    upstream: &Tensor<T>,
    weights: &BTreeMap<String, Tensor<T>>,
    prefix: &str,
    grads: &mut BTreeMap<String, Tensor<T>>,
) -> Result<Tensor<T>> {
    let n = graph.nodes.len();
    let mut node_grads: Vec<Option<Tensor<T>>> = vec![None; n];
    node_grads[n - 1] = Some(upstream.clone());

    let accumulate = |store: &mut Vec<Option<Tensor<T>>>, idx: usize, g: Tensor<T>| {
        match &mut store[idx] {
            Some(existing) => {
                crate::tensor::add_assign(existing, &g).expect("matching grad shapes");
            }
            slot @ None => *slot = Some(g),
        }
    };

    for idx in (1..n).rev() {
        let Some(g) = node_grads[idx].take() else { continue };
        let node = &graph.nodes[idx];
        match &node.op {
            BlockOp::Input => {}
            BlockOp::Conv(spec) => {
                let w = lookup(weights, &format!("{prefix}{}.w", node.name))?;
                let x = &cache.values[node.inputs[0]];
                let cg = conv2d_grad(x, spec, w, &g)?;
                merge_grad(grads, format!("{prefix}{}.w", node.name), cg.weights);
                if let Some(gb) = cg.bias {
                    merge_grad(grads, format!("{prefix}{}.b", node.name), gb);
                }
                accumulate(&mut node_grads, node.inputs[0], cg.input);
            }
            BlockOp::Prelu => {
                let s = lookup(weights, &format!("{prefix}{}.slope", node.name))?;
                let x = &cache.values[node.inputs[0]];
                let (gx, gs) = prelu_grad(x, s, &g)?;
                merge_grad(grads, format!("{prefix}{}.slope", node.name), gs);
                accumulate(&mut node_grads, node.inputs[0], gx);
            }
            BlockOp::Slice { start, end: _, den } => {
                let src = &cache.values[node.inputs[0]];
                let (c, h, w) = src.dims3()?;
                let lo = c * start / den;
                let mut padded = Tensor::zeros(&[c, h, w]);
                let hw = h * w;
                padded.data_mut()[lo * hw..lo * hw + g.len()].copy_from_slice(g.data());
                accumulate(&mut node_grads, node.inputs[0], padded);
            }
            BlockOp::Concat => {
                let sizes: Vec<usize> =
                    node.inputs.iter().map(|&i| cache.values[i].shape()[0]).collect();
                let parts = split_channels(&g, &sizes)?;
                for (&src, part) in node.inputs.iter().zip(parts) {
                    accumulate(&mut node_grads, src, part);
                }
            }
            BlockOp::Add => {
                accumulate(&mut node_grads, node.inputs[0], g.clone());
                accumulate(&mut node_grads, node.inputs[1], g);
            }
        }
    }

    Ok(node_grads[0].take().unwrap_or_else(|| Tensor::zeros(cache.values[0].shape())))
}

pub(crate) fn merge_grad<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, key: String, g: Tensor<T>) {
    match grads.get_mut(&key) {
        Some(existing) => crate::tensor::add_assign(existing, &g).expect("matching grad shapes"),
        None => {
            grads.insert(key, g);
        }
    }
}
