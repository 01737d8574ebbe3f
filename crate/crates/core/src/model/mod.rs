//! Framework-neutral model graph.
//!
//! A [`ModelGraph`] is a DAG of [`LayerNode`]s joined by slot-addressed
//! edges. Every transform in the crate (slicing, training, pruning) returns a
//! new graph; a loaded graph is never mutated in place.

mod builder;
mod io;
mod slice;

use std::collections::{BTreeMap, BinaryHeap};
use std::cmp::Reverse;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use builder::GraphBuilder;
pub use io::{load_model, save_model, MANIFEST_FILE, WEIGHTS_FILE};
pub use slice::{slice_param, ParamRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearAttrs {
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormAttrs {
    pub channels: usize,
    pub eps: f32,
    pub momentum: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolAttrs {
    pub kernel: usize,
    pub stride: usize,
}

/// The closed set of supported operations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "attrs")]
pub enum LayerKind {
    #[serde(rename = "input")]
    Input,
    #[serde(rename = "output")]
    Output,
    #[serde(rename = "conv2d")]
    Conv2d(ConvAttrs),
    #[serde(rename = "linear")]
    Linear(LinearAttrs),
    #[serde(rename = "batchnorm2d")]
    BatchNorm2d(BatchNormAttrs),
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d(PoolAttrs),
    #[serde(rename = "avgpool2d")]
    AvgPool2d(PoolAttrs),
    #[serde(rename = "globalavgpool")]
    GlobalAvgPool,
    #[serde(rename = "flatten")]
    Flatten,
    /// Residual elementwise sum of exactly two inputs.
    #[serde(rename = "add")]
    Add,
    /// Pass-through marker: its output is the logit tensor the loss is taken on.
    #[serde(rename = "softmax_ce_loss")]
    SoftmaxCeLoss,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Output => "output",
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::Linear(_) => "linear",
            LayerKind::BatchNorm2d(_) => "batchnorm2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d(_) => "maxpool2d",
            LayerKind::AvgPool2d(_) => "avgpool2d",
            LayerKind::GlobalAvgPool => "globalavgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Add => "add",
            LayerKind::SoftmaxCeLoss => "softmax_ce_loss",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Input => 0,
            LayerKind::Add => 2,
            _ => 1,
        }
    }

    /// Parameter names that may appear on this kind, and whether each is required.
    fn param_names(&self) -> &'static [(&'static str, bool)] {
        match self {
            LayerKind::Conv2d(_) | LayerKind::Linear(_) => &[("weight", true), ("bias", false)],
            LayerKind::BatchNorm2d(_) => &[
                ("gamma", true),
                ("beta", true),
                ("running_mean", true),
                ("running_var", true),
            ],
            _ => &[],
        }
    }
}

/// Names of batchnorm buffers that are stored with the parameters but never trained.
pub const BN_BUFFERS: [&str; 2] = ["running_mean", "running_var"];

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    pub params: BTreeMap<String, Tensor>,
}

impl LayerNode {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            id: id.into(),
            kind,
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, name: &str, t: Tensor) -> Self {
        self.params.insert(name.to_string(), t);
        self
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn weight(&self) -> Option<&Tensor> {
        self.param("weight")
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Checks parameter names and shapes against the attributes.
    pub fn check(&self) -> Result<()> {
        let allowed = self.kind.param_names();
        for name in self.params.keys() {
            if !allowed.iter().any(|(n, _)| n == name) {
                return Err(Error::node(
                    &self.id,
                    format!("unexpected parameter `{name}` on {}", self.kind.name()),
                ));
            }
        }
        for (name, required) in allowed {
            if *required && !self.params.contains_key(*name) {
                return Err(Error::node(&self.id, format!("missing parameter `{name}`")));
            }
        }
        let expect = |name: &str, shape: &[usize]| -> Result<()> {
            if let Some(t) = self.params.get(name) {
                if t.shape() != shape {
                    return Err(Error::shape(
                        &self.id,
                        format!("`{name}` has shape {:?}, attributes imply {shape:?}", t.shape()),
                    ));
                }
                if !t.is_finite() {
                    return Err(Error::node(&self.id, format!("`{name}` contains NaN or Inf")));
                }
            }
            Ok(())
        };
        match &self.kind {
            LayerKind::Conv2d(a) => {
                if a.kernel == 0 || a.stride == 0 {
                    return Err(Error::node(&self.id, "kernel and stride must be positive"));
                }
                expect("weight", &[a.out_channels, a.in_channels, a.kernel, a.kernel])?;
                expect("bias", &[a.out_channels])?;
            }
            LayerKind::Linear(a) => {
                expect("weight", &[a.out_features, a.in_features])?;
                expect("bias", &[a.out_features])?;
            }
            LayerKind::BatchNorm2d(a) => {
                if !(a.eps > 0.0) || !(0.0..=1.0).contains(&a.momentum) {
                    return Err(Error::node(&self.id, "batchnorm eps must be > 0, momentum in [0,1]"));
                }
                for n in ["gamma", "beta", "running_mean", "running_var"] {
                    expect(n, &[a.channels])?;
                }
                if self.params["running_var"].data().iter().any(|&v| v < 0.0) {
                    return Err(Error::node(&self.id, "negative running_var"));
                }
            }
            LayerKind::MaxPool2d(p) | LayerKind::AvgPool2d(p) => {
                if p.kernel == 0 || p.stride == 0 {
                    return Err(Error::node(&self.id, "pool kernel and stride must be positive"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    #[serde(default)]
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub nodes: IndexMap<String, LayerNode>,
    pub edges: Vec<Edge>,
}

/// Derived structure of a validated graph. Node references are indices into
/// `ModelGraph::nodes`.
#[derive(Debug, Clone)]
pub struct GraphInfo {
    /// Topological order; ties broken by node declaration order.
    pub order: Vec<usize>,
    /// Predecessors of each node, indexed by input slot.
    pub preds: Vec<Vec<usize>>,
    /// Successors of each node as `(node, slot)`, in edge order.
    pub succs: Vec<Vec<(usize, usize)>>,
    /// Per-sample output shape of every node.
    pub shapes: Vec<Vec<usize>>,
    pub input: usize,
    pub output: usize,
}

impl GraphInfo {
    /// Per-sample shape feeding input slot 0 of `node`.
    pub fn input_shape(&self, node: usize) -> &[usize] {
        &self.shapes[self.preds[node][0]]
    }
}

pub(crate) fn conv_out_extent(node: &str, size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(
            node,
            format!("negative output extent: input {size} + 2*pad {pad} < kernel {kernel}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

impl ModelGraph {
    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.nodes.get(id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.get_index_of(id)
    }

    pub fn param_count(&self) -> usize {
        self.nodes.values().map(LayerNode::param_count).sum()
    }

    /// Validates every invariant and returns the derived topology and shapes.
    pub fn analyze(&self) -> Result<GraphInfo> {
        let n = self.nodes.len();
        for (key, node) in &self.nodes {
            if key != &node.id {
                return Err(Error::node(key, format!("map key does not match node id `{}`", node.id)));
            }
            node.check()?;
        }

        let mut input = None;
        let mut output = None;
        for (i, node) in self.nodes.values().enumerate() {
            let slot = match node.kind {
                LayerKind::Input => &mut input,
                LayerKind::Output => &mut output,
                _ => continue,
            };
            if slot.replace(i).is_some() {
                return Err(Error::node(&node.id, format!("duplicate {} node", node.kind.name())));
            }
        }
        let input = input.ok_or_else(|| Error::Manifest("graph has no input node".into()))?;
        let output = output.ok_or_else(|| Error::Manifest("graph has no output node".into()))?;

        let mut preds: Vec<Vec<Option<usize>>> = self
            .nodes
            .values()
            .map(|nd| vec![None; nd.kind.arity()])
            .collect();
        let mut succs = vec![Vec::new(); n];
        for e in &self.edges {
            let s = self
                .index_of(&e.src)
                .ok_or_else(|| Error::Manifest(format!("edge source `{}` is not a node", e.src)))?;
            let d = self
                .index_of(&e.dst)
                .ok_or_else(|| Error::Manifest(format!("edge target `{}` is not a node", e.dst)))?;
            let slots = &mut preds[d];
            if e.slot >= slots.len() {
                return Err(Error::node(&e.dst, format!("input slot {} out of range", e.slot)));
            }
            if slots[e.slot].replace(s).is_some() {
                return Err(Error::node(&e.dst, format!("input slot {} connected twice", e.slot)));
            }
            succs[s].push((d, e.slot));
        }
        let preds: Vec<Vec<usize>> = preds
            .into_iter()
            .enumerate()
            .map(|(i, slots)| {
                slots
                    .into_iter()
                    .map(|s| s.ok_or_else(|| Error::node(&self.nodes[i].id, "unconnected input slot")))
                    .collect()
            })
            .collect::<Result<_>>()?;
        if !succs[output].is_empty() {
            return Err(Error::node(&self.nodes[output].id, "output node has successors"));
        }

        // Kahn's algorithm with a min-heap over declaration index for a stable order.
        let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
        let mut ready: BinaryHeap<Reverse<usize>> =
            (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = ready.pop() {
            order.push(i);
            for &(d, _) in &succs[i] {
                indeg[d] -= 1;
                if indeg[d] == 0 {
                    ready.push(Reverse(d));
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap();
            return Err(Error::Cyclic(self.nodes[stuck].id.clone()));
        }

        let mut shapes: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &i in &order {
            let node = &self.nodes[i];
            let ins: Vec<&Vec<usize>> = preds[i].iter().map(|&p| &shapes[p]).collect();
            shapes[i] = self.infer_shape(node, &ins)?;
        }
        // Feature-map outputs are allowed (backbones); flat outputs are class logits.
        let out_shape = &shapes[output];
        if out_shape.len() == 1 && out_shape[0] != self.num_classes {
            return Err(Error::shape(
                &self.nodes[output].id,
                format!("output shape {out_shape:?} does not match class count {}", self.num_classes),
            ));
        }

        Ok(GraphInfo {
            order,
            preds,
            succs,
            shapes,
            input,
            output,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.analyze().map(|_| ())
    }

    /// True when the output node emits a flat `[num_classes]` logit vector.
    pub fn emits_logits(&self, info: &GraphInfo) -> bool {
        info.shapes[info.output].as_slice() == [self.num_classes]
    }

    fn infer_shape(&self, node: &LayerNode, ins: &[&Vec<usize>]) -> Result<Vec<usize>> {
        let id = &node.id;
        let spatial = |s: &Vec<usize>| -> Result<(usize, usize, usize)> {
            match s.as_slice() {
                &[c, h, w] => Ok((c, h, w)),
                _ => Err(Error::shape(id, format!("expects a [C,H,W] input, got {s:?}"))),
            }
        };
        Ok(match &node.kind {
            LayerKind::Input => self.input_shape.to_vec(),
            LayerKind::Output | LayerKind::SoftmaxCeLoss | LayerKind::Relu => ins[0].clone(),
            LayerKind::Conv2d(a) => {
                let (c, h, w) = spatial(ins[0])?;
                if c != a.in_channels {
                    return Err(Error::shape(
                        id,
                        format!("in_channels {} but input has {c} channels", a.in_channels),
                    ));
                }
                vec![
                    a.out_channels,
                    conv_out_extent(id, h, a.kernel, a.stride, a.padding)?,
                    conv_out_extent(id, w, a.kernel, a.stride, a.padding)?,
                ]
            }
            LayerKind::Linear(a) => match ins[0].as_slice() {
                &[f] if f == a.in_features => vec![a.out_features],
                other => {
                    return Err(Error::shape(
                        id,
                        format!("in_features {} but input shape is {other:?}", a.in_features),
                    ))
                }
            },
            LayerKind::BatchNorm2d(a) => {
                let (c, _, _) = spatial(ins[0])?;
                if c != a.channels {
                    return Err(Error::shape(id, format!("channels {} but input has {c}", a.channels)));
                }
                ins[0].clone()
            }
            LayerKind::MaxPool2d(p) | LayerKind::AvgPool2d(p) => {
                let (c, h, w) = spatial(ins[0])?;
                vec![
                    c,
                    conv_out_extent(id, h, p.kernel, p.stride, 0)?,
                    conv_out_extent(id, w, p.kernel, p.stride, 0)?,
                ]
            }
            LayerKind::GlobalAvgPool => vec![spatial(ins[0])?.0],
            LayerKind::Flatten => vec![ins[0].iter().product()],
            LayerKind::Add => {
                if ins[0] != ins[1] {
                    return Err(Error::shape(
                        id,
                        format!("add operands differ: {:?} vs {:?}", ins[0], ins[1]),
                    ));
                }
                ins[0].clone()
            }
        })
    }

    /// Returns a copy with one node replaced. The node id must already exist.
    pub fn with_node(&self, node: LayerNode) -> ModelGraph {
        let mut g = self.clone();
        g.replace_node(node);
        g
    }

    pub(crate) fn replace_node(&mut self, node: LayerNode) {
        let slot = self
            .nodes
            .get_mut(&node.id)
            .expect("replace_node called with unknown id");
        *slot = node;
    }
}
