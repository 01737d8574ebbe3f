use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    conv_out_extent, BatchNormAttrs, ConvAttrs, Edge, LayerKind, LayerNode, LinearAttrs,
    ModelGraph, PoolAttrs,
};
use crate::error::Result;
use crate::tensor::Tensor;

/// Incremental constructor for hand-written models.
///
/// Tracks per-node output shapes so layer widths can be inferred from the
/// producer. Weights use He-uniform initialisation from a seeded ChaCha8 stream.
pub struct GraphBuilder {
    graph: ModelGraph,
    shapes: HashMap<String, Vec<usize>>,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(name: &str, input_shape: [usize; 3], num_classes: usize, seed: u64) -> Self {
        let mut b = Self {
            graph: ModelGraph {
                name: name.to_string(),
                input_shape,
                num_classes,
                nodes: IndexMap::new(),
                edges: Vec::new(),
            },
            shapes: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.push(LayerNode::new("input", LayerKind::Input), &[], input_shape.to_vec());
        b
    }

    pub fn shape(&self, id: &str) -> &[usize] {
        &self.shapes[id]
    }

    fn push(&mut self, node: LayerNode, from: &[&str], shape: Vec<usize>) -> String {
        let id = node.id.clone();
        for (slot, src) in from.iter().enumerate() {
            self.graph.edges.push(Edge {
                src: src.to_string(),
                dst: id.clone(),
                slot,
            });
        }
        self.shapes.insert(id.clone(), shape);
        self.graph.nodes.insert(id.clone(), node);
        id
    }

    fn uniform(&mut self, shape: Vec<usize>, bound: f32) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
    }

    fn channels(&self, from: &str) -> (usize, usize, usize) {
        match self.shapes[from].as_slice() {
            &[c, h, w] => (c, h, w),
            s => panic!("`{from}` has non-spatial shape {s:?}"),
        }
    }

    pub fn conv(
        &mut self,
        id: &str,
        from: &str,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> String {
        let (c, h, w) = self.channels(from);
        let attrs = ConvAttrs {
            in_channels: c,
            out_channels,
            kernel,
            stride,
            padding,
        };
        let bound = (6.0 / (c * kernel * kernel) as f32).sqrt();
        let mut node = LayerNode::new(id, LayerKind::Conv2d(attrs)).with_param(
            "weight",
            self.uniform(vec![out_channels, c, kernel, kernel], bound),
        );
        if bias {
            node = node.with_param("bias", Tensor::zeros(vec![out_channels]));
        }
        let oh = conv_out_extent(id, h, kernel, stride, padding).expect("conv geometry");
        let ow = conv_out_extent(id, w, kernel, stride, padding).expect("conv geometry");
        self.push(node, &[from], vec![out_channels, oh, ow])
    }

    pub fn linear(&mut self, id: &str, from: &str, out_features: usize, bias: bool) -> String {
        let f = match self.shapes[from].as_slice() {
            &[f] => f,
            s => panic!("`{from}` has non-flat shape {s:?}"),
        };
        let bound = (6.0 / f as f32).sqrt();
        let mut node = LayerNode::new(
            id,
            LayerKind::Linear(LinearAttrs {
                in_features: f,
                out_features,
            }),
        )
        .with_param("weight", self.uniform(vec![out_features, f], bound));
        if bias {
            node = node.with_param("bias", Tensor::zeros(vec![out_features]));
        }
        self.push(node, &[from], vec![out_features])
    }

    pub fn bn(&mut self, id: &str, from: &str) -> String {
        let (c, h, w) = self.channels(from);
        let node = LayerNode::new(
            id,
            LayerKind::BatchNorm2d(BatchNormAttrs {
                channels: c,
                eps: 1e-5,
                momentum: 0.1,
            }),
        )
        .with_param("gamma", Tensor::filled(vec![c], 1.0))
        .with_param("beta", Tensor::zeros(vec![c]))
        .with_param("running_mean", Tensor::zeros(vec![c]))
        .with_param("running_var", Tensor::filled(vec![c], 1.0));
        self.push(node, &[from], vec![c, h, w])
    }

    pub fn relu(&mut self, id: &str, from: &str) -> String {
        let s = self.shapes[from].clone();
        self.push(LayerNode::new(id, LayerKind::Relu), &[from], s)
    }

    pub fn maxpool(&mut self, id: &str, from: &str, kernel: usize, stride: usize) -> String {
        self.pool(id, from, LayerKind::MaxPool2d(PoolAttrs { kernel, stride }), kernel, stride)
    }

    pub fn avgpool(&mut self, id: &str, from: &str, kernel: usize, stride: usize) -> String {
        self.pool(id, from, LayerKind::AvgPool2d(PoolAttrs { kernel, stride }), kernel, stride)
    }

    fn pool(&mut self, id: &str, from: &str, kind: LayerKind, k: usize, s: usize) -> String {
        let (c, h, w) = self.channels(from);
        let oh = conv_out_extent(id, h, k, s, 0).expect("pool geometry");
        let ow = conv_out_extent(id, w, k, s, 0).expect("pool geometry");
        self.push(LayerNode::new(id, kind), &[from], vec![c, oh, ow])
    }

    pub fn gap(&mut self, id: &str, from: &str) -> String {
        let (c, _, _) = self.channels(from);
        self.push(LayerNode::new(id, LayerKind::GlobalAvgPool), &[from], vec![c])
    }

    pub fn flatten(&mut self, id: &str, from: &str) -> String {
        let n = self.shapes[from].iter().product();
        self.push(LayerNode::new(id, LayerKind::Flatten), &[from], vec![n])
    }

    pub fn add(&mut self, id: &str, a: &str, b: &str) -> String {
        let s = self.shapes[a].clone();
        self.push(LayerNode::new(id, LayerKind::Add), &[a, b], s)
    }

    pub fn loss(&mut self, id: &str, from: &str) -> String {
        let s = self.shapes[from].clone();
        self.push(LayerNode::new(id, LayerKind::SoftmaxCeLoss), &[from], s)
    }

    /// Conv → batchnorm → relu, named `{prefix}`, `bn_{prefix}`, `relu_{prefix}`.
    pub fn conv_bn_relu(
        &mut self,
        prefix: &str,
        from: &str,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> String {
        let c = self.conv(prefix, from, out_channels, kernel, stride, kernel / 2, false);
        let b = self.bn(&format!("bn_{prefix}"), &c);
        self.relu(&format!("relu_{prefix}"), &b)
    }

    pub fn finish(mut self, from: &str) -> Result<ModelGraph> {
        let s = self.shapes[from].clone();
        self.push(LayerNode::new("output", LayerKind::Output), &[from], s);
        self.graph.validate()?;
        Ok(self.graph)
    }
}
