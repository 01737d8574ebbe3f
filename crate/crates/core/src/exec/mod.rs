//! Forward/backward execution over a model graph, plus a small SGD trainer.
//!
//! The executor is generic over the storage scalar so the same code runs in
//! 32-bit (normal use) and 64-bit (gradient checks). Reductions accumulate in
//! `f64` and iterate in a fixed order, so results are bit-reproducible.

mod data;
pub(crate) mod kernels;
mod train;

use std::collections::BTreeMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelGraph, BN_BUFFERS};
use crate::tensor::Tensor;

pub use data::{CalibrationBatch, Dataset, DATA_FILE, LABELS_FILE, META_FILE};
pub use train::{evaluate, predict, train, EpochMetrics, GradHook, TrainConfig, TrainOutcome};

use kernels::{BnStats, ConvGeom, PoolGeom};

pub trait Scalar: Copy + Default + PartialOrd + Send + Sync + std::fmt::Debug + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBuf<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl ParamBuf<f32> {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.clone()).expect("param buffer shape")
    }
}

/// Named parameter storage, `layer id → param name → buffer`, in graph order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamTable<T> {
    layers: IndexMap<String, BTreeMap<String, ParamBuf<T>>>,
}

impl<T: Scalar> ParamTable<T> {
    fn insert(&mut self, layer: &str, name: &str, t: &Tensor) {
        self.layers.entry(layer.to_string()).or_default().insert(
            name.to_string(),
            ParamBuf {
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
            },
        );
    }

    /// Trainable parameters of `m` (batchnorm running statistics excluded).
    pub fn from_model(m: &ModelGraph) -> Self {
        Self::collect(m, false)
    }

    fn collect(m: &ModelGraph, buffers: bool) -> Self {
        let mut t = ParamTable::default();
        for node in m.nodes.values() {
            for (name, v) in &node.params {
                if BN_BUFFERS.contains(&name.as_str()) == buffers {
                    t.insert(&node.id, name, v);
                }
            }
        }
        t
    }

    pub fn get(&self, layer: &str, name: &str) -> Option<&ParamBuf<T>> {
        self.layers.get(layer)?.get(name)
    }

    pub fn get_mut(&mut self, layer: &str, name: &str) -> Option<&mut ParamBuf<T>> {
        self.layers.get_mut(layer)?.get_mut(name)
    }

    pub fn layer(&self, layer: &str) -> Option<&BTreeMap<String, ParamBuf<T>>> {
        self.layers.get(layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &ParamBuf<T>)> {
        self.layers
            .iter()
            .flat_map(|(l, ps)| ps.iter().map(move |(n, p)| (l.as_str(), n.as_str(), p)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &str, &mut ParamBuf<T>)> {
        self.layers
            .iter_mut()
            .flat_map(|(l, ps)| ps.iter_mut().map(move |(n, p)| (l.as_str(), n.as_str(), p)))
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, _, p) in out.iter_mut() {
            p.data.fill(T::default());
        }
        out
    }

    pub fn numel(&self) -> usize {
        self.iter().map(|(_, _, p)| p.data.len()).sum()
    }

    /// Elementwise `self += other * scale`, accumulated in f64.
    pub fn add_scaled(&mut self, other: &ParamTable<T>, scale: f64) {
        for (l, n, p) in self.iter_mut() {
            let o = other.get(l, n).expect("tables share layout");
            for (a, b) in p.data.iter_mut().zip(&o.data) {
                *a = T::from_f64(a.to_f64() + scale * b.to_f64());
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, _, p)| p.data.iter().all(|v| v.to_f64().is_finite()))
    }
}

/// Everything a backward pass needs, plus what criteria read back.
#[derive(Debug, Clone)]
pub struct ExecutionRecord<T = f32> {
    pub mode: Mode,
    pub batch: usize,
    pub labels: Vec<u32>,
    /// Mean softmax cross-entropy over the batch.
    pub loss: f64,
    node_ids: Vec<String>,
    output: usize,
    shapes: Vec<Vec<usize>>,
    acts: Vec<Vec<T>>,
    bn_stats: Vec<Option<BnStats>>,
    argmax: Vec<Option<Vec<u32>>>,
    probs: Vec<f64>,
}

impl<T: Scalar> ExecutionRecord<T> {
    /// Output of node `id`, shaped `[B, ..per-sample shape]`.
    pub fn activation(&self, id: &str) -> Option<(Vec<usize>, &[T])> {
        let i = self.node_ids.iter().position(|n| n == id)?;
        let mut shape = vec![self.batch];
        shape.extend(&self.shapes[i]);
        Some((shape, &self.acts[i]))
    }

    /// Class logits `[B, K]` (the output node's values).
    pub fn logits(&self) -> &[T] {
        &self.acts[self.output]
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }
}

impl ExecutionRecord<f32> {
    pub fn activation_tensor(&self, id: &str) -> Option<Tensor> {
        let (shape, data) = self.activation(id)?;
        Tensor::new(shape, data.to_vec()).ok()
    }
}

/// Gradients of one forward/backward pass, optionally split per sample.
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    pub batch: ParamTable<T>,
    pub per_sample: Option<Vec<ParamTable<T>>>,
}

/// A model compiled for execution at scalar type `T`.
#[derive(Debug, Clone)]
pub struct Executor<T: Scalar = f32> {
    graph: ModelGraph,
    order: Vec<usize>,
    preds: Vec<Vec<usize>>,
    shapes: Vec<Vec<usize>>,
    input: usize,
    output: usize,
    params: ParamTable<T>,
    buffers: ParamTable<T>,
}

impl<T: Scalar> Executor<T> {
    pub fn new(m: &ModelGraph) -> Result<Self> {
        let info = m.analyze()?;
        let out_shape = &info.shapes[info.output];
        if out_shape.len() != 1 || out_shape[0] != m.num_classes {
            return Err(Error::shape(
                &m.nodes[info.output].id,
                format!(
                    "execution needs [{}] class logits at the output, got {out_shape:?}",
                    m.num_classes
                ),
            ));
        }
        let params = ParamTable::collect(m, false);
        let buffers = ParamTable::collect(m, true);
        Ok(Executor {
            graph: m.clone(),
            order: info.order,
            preds: info.preds,
            shapes: info.shapes,
            input: info.input,
            output: info.output,
            params,
            buffers,
        })
    }

    pub fn params(&self) -> &ParamTable<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamTable<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamTable<T> {
        &self.buffers
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn num_classes(&self) -> usize {
        self.graph.num_classes
    }

    /// Writes the current parameters and buffers back into a model graph.
    pub fn to_graph(&self) -> ModelGraph {
        let mut m = self.graph.clone();
        for table in [&self.params, &self.buffers] {
            for (l, n, p) in table.iter() {
                let data = p.data.iter().map(|v| v.to_f64() as f32).collect();
                m.nodes[l]
                    .params
                    .insert(n.to_string(), Tensor::new(p.shape.clone(), data).expect("shape"));
            }
        }
        m
    }

    fn p(&self, layer: &str, name: &str) -> Option<&[T]> {
        self.params.get(layer, name).map(|b| b.data.as_slice())
    }

    fn sample_len(&self) -> usize {
        self.graph.input_shape.iter().product()
    }

    /// Runs the graph on `x` (`B` samples laid out `[B,C,H,W]`).
    pub fn forward(&self, x: &[T], labels: &[u32], mode: Mode) -> Result<ExecutionRecord<T>> {
        let batch = labels.len();
        if batch == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        if x.len() != batch * self.sample_len() {
            return Err(Error::shape(
                "input",
                format!(
                    "expected {batch} samples of {:?} ({} values), got {} values",
                    self.graph.input_shape,
                    batch * self.sample_len(),
                    x.len()
                ),
            ));
        }
        let k = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Dataset(format!("label {bad} out of range for {k} classes")));
        }
        let n = self.graph.nodes.len();
        let mut acts: Vec<Vec<T>> = vec![Vec::new(); n];
        let mut bn_stats = vec![None; n];
        let mut argmax = vec![None; n];
        for &i in &self.order {
            let node = &self.graph.nodes[i];
            let id = node.id.as_str();
            let ins = self.input_dims(i);
            let out = match &node.kind {
                LayerKind::Input => x.to_vec(),
                LayerKind::Output | LayerKind::SoftmaxCeLoss | LayerKind::Flatten => {
                    acts[self.preds[i][0]].clone()
                }
                LayerKind::Conv2d(a) => {
                    let g = self.conv_geom(i, a.kernel, a.stride, a.padding, a.out_channels);
                    let w = self.p(id, "weight").expect("conv weight");
                    kernels::conv2d_forward(&acts[self.preds[i][0]], batch, w, self.p(id, "bias"), &g)
                }
                LayerKind::Linear(a) => {
                    let w = self.p(id, "weight").expect("linear weight");
                    kernels::linear_forward(
                        &acts[self.preds[i][0]],
                        batch,
                        w,
                        self.p(id, "bias"),
                        a.in_features,
                        a.out_features,
                    )
                }
                LayerKind::BatchNorm2d(a) => {
                    let (c, hw) = (ins[0], ins[1..].iter().product());
                    let xin = &acts[self.preds[i][0]];
                    let stats = match mode {
                        Mode::Train => kernels::bn_batch_stats(xin, batch, c, hw, a.eps as f64),
                        Mode::Eval => self.running_stats(id, a.eps as f64),
                    };
                    let y = kernels::bn_forward(
                        xin,
                        batch,
                        c,
                        hw,
                        &stats,
                        self.p(id, "gamma").expect("gamma"),
                        self.p(id, "beta").expect("beta"),
                    );
                    bn_stats[i] = Some(stats);
                    y
                }
                LayerKind::Relu => acts[self.preds[i][0]]
                    .iter()
                    .map(|&v| if v > T::default() { v } else { T::default() })
                    .collect(),
                LayerKind::MaxPool2d(p) => {
                    let g = self.pool_geom(i, p.kernel, p.stride);
                    let (y, arg) = kernels::maxpool_forward(&acts[self.preds[i][0]], batch, &g);
                    argmax[i] = Some(arg);
                    y
                }
                LayerKind::AvgPool2d(p) => {
                    let g = self.pool_geom(i, p.kernel, p.stride);
                    kernels::avgpool_forward(&acts[self.preds[i][0]], batch, &g)
                }
                LayerKind::GlobalAvgPool => {
                    kernels::gap_forward(&acts[self.preds[i][0]], batch, ins[0], ins[1] * ins[2])
                }
                LayerKind::Add => {
                    let (a, b) = (&acts[self.preds[i][0]], &acts[self.preds[i][1]]);
                    a.iter().zip(b).map(|(x, y)| T::from_f64(x.to_f64() + y.to_f64())).collect()
                }
            };
            if out.iter().any(|v| !v.to_f64().is_finite()) {
                return Err(Error::Numerical(format!("non-finite activation at `{id}`")));
            }
            acts[i] = out;
        }

        let logits = &acts[self.output];
        let mut probs = Vec::with_capacity(batch * k);
        let mut loss = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let row: Vec<f64> = logits[b * k..(b + 1) * k].iter().map(|v| v.to_f64()).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            loss += z.ln() + mx - row[y as usize];
            probs.extend(row.iter().map(|v| (v - mx).exp() / z));
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical("non-finite loss".into()));
        }
        Ok(ExecutionRecord {
            mode,
            batch,
            labels: labels.to_vec(),
            loss,
            node_ids: self.graph.nodes.keys().cloned().collect(),
            output: self.output,
            shapes: self.shapes.clone(),
            acts,
            bn_stats,
            argmax,
            probs,
        })
    }

    /// Gradients of the mean loss recorded in `rec` with respect to every parameter.
    pub fn backward(&self, rec: &ExecutionRecord<T>) -> Result<ParamTable<T>> {
        let n = self.graph.nodes.len();
        if rec.acts.len() != n || rec.node_ids.iter().ne(self.graph.nodes.keys()) {
            return Err(Error::Config("execution record does not belong to this model".into()));
        }
        let batch = rec.batch;
        let k = self.num_classes();
        let mut grads = self.params.zeros_like();
        let mut dacts: Vec<Option<Vec<T>>> = vec![None; n];

        let mut dlogits = Vec::with_capacity(batch * k);
        for (b, &y) in rec.labels.iter().enumerate() {
            for c in 0..k {
                let onehot = if c == y as usize { 1.0 } else { 0.0 };
                dlogits.push(T::from_f64((rec.probs[b * k + c] - onehot) / batch as f64));
            }
        }
        dacts[self.output] = Some(dlogits);

        let accumulate = |dacts: &mut Vec<Option<Vec<T>>>, j: usize, g: Vec<T>| match &mut dacts[j] {
            Some(prev) => {
                for (p, v) in prev.iter_mut().zip(&g) {
                    *p = T::from_f64(p.to_f64() + v.to_f64());
                }
            }
            slot @ None => *slot = Some(g),
        };

        for &i in self.order.iter().rev() {
            let Some(dy) = dacts[i].take() else { continue };
            let node = &self.graph.nodes[i];
            let id = node.id.as_str();
            let ins = self.input_dims(i);
            let src = |slot: usize| self.preds[i][slot];
            let wants = |j: usize| j != self.input;
            match &node.kind {
                LayerKind::Input => {}
                LayerKind::Output | LayerKind::SoftmaxCeLoss | LayerKind::Flatten => {
                    accumulate(&mut dacts, src(0), dy)
                }
                LayerKind::Conv2d(a) => {
                    let g = self.conv_geom(i, a.kernel, a.stride, a.padding, a.out_channels);
                    let w = self.p(id, "weight").expect("conv weight");
                    let r = kernels::conv2d_backward(&rec.acts[src(0)], &dy, batch, w, &g, wants(src(0)));
                    self.store(&mut grads, id, "weight", r.dw);
                    self.store(&mut grads, id, "bias", r.db);
                    if let Some(dx) = r.dx {
                        accumulate(&mut dacts, src(0), dx);
                    }
                }
                LayerKind::Linear(a) => {
                    let w = self.p(id, "weight").expect("linear weight");
                    let r = kernels::linear_backward(
                        &rec.acts[src(0)],
                        &dy,
                        batch,
                        w,
                        a.in_features,
                        a.out_features,
                        wants(src(0)),
                    );
                    self.store(&mut grads, id, "weight", r.dw);
                    self.store(&mut grads, id, "bias", r.db);
                    if let Some(dx) = r.dx {
                        accumulate(&mut dacts, src(0), dx);
                    }
                }
                LayerKind::BatchNorm2d(_) => {
                    let (c, hw) = (ins[0], ins[1..].iter().product());
                    let stats = rec.bn_stats[i].as_ref().expect("bn stats recorded");
                    let r = kernels::bn_backward(
                        &rec.acts[src(0)],
                        &dy,
                        batch,
                        c,
                        hw,
                        stats,
                        self.p(id, "gamma").expect("gamma"),
                        rec.mode == Mode::Train,
                    );
                    self.store(&mut grads, id, "gamma", r.dgamma);
                    self.store(&mut grads, id, "beta", r.dbeta);
                    if wants(src(0)) {
                        accumulate(&mut dacts, src(0), r.dx);
                    }
                }
                LayerKind::Relu => {
                    let y = &rec.acts[i];
                    let dx = dy
                        .iter()
                        .zip(y)
                        .map(|(&d, &v)| if v > T::default() { d } else { T::default() })
                        .collect();
                    accumulate(&mut dacts, src(0), dx);
                }
                LayerKind::MaxPool2d(_) => {
                    let arg = rec.argmax[i].as_ref().expect("argmax recorded");
                    let dx = kernels::maxpool_backward(&dy, arg, rec.acts[src(0)].len());
                    accumulate(&mut dacts, src(0), dx);
                }
                LayerKind::AvgPool2d(p) => {
                    let g = self.pool_geom(i, p.kernel, p.stride);
                    accumulate(&mut dacts, src(0), kernels::avgpool_backward(&dy, batch, &g));
                }
                LayerKind::GlobalAvgPool => {
                    accumulate(&mut dacts, src(0), kernels::gap_backward(&dy, ins[1] * ins[2]));
                }
                LayerKind::Add => {
                    accumulate(&mut dacts, src(1), dy.clone());
                    accumulate(&mut dacts, src(0), dy);
                }
            }
        }
        Ok(grads)
    }

    /// Batch gradient plus, when `per_sample`, one gradient set per sample
    /// obtained by re-running forward and backward with batch size 1.
    pub fn gradients(&self, x: &[T], labels: &[u32], mode: Mode, per_sample: bool) -> Result<(ExecutionRecord<T>, Gradients<T>)> {
        let rec = self.forward(x, labels, mode)?;
        let batch = self.backward(&rec)?;
        let per = if per_sample {
            let len = self.sample_len();
            let mut out = Vec::with_capacity(labels.len());
            for (b, &y) in labels.iter().enumerate() {
                let r = self.forward(&x[b * len..(b + 1) * len], &[y], mode)?;
                out.push(self.backward(&r)?);
            }
            Some(out)
        } else {
            None
        };
        Ok((rec, Gradients { batch, per_sample: per }))
    }

    /// Folds train-mode batch statistics into the running estimates:
    /// `running = (1 - momentum) * running + momentum * batch` (unbiased variance).
    pub fn update_running_stats(&mut self, rec: &ExecutionRecord<T>) {
        if rec.mode != Mode::Train {
            return;
        }
        for (i, node) in self.graph.nodes.values().enumerate() {
            let (LayerKind::BatchNorm2d(a), Some(stats)) = (&node.kind, &rec.bn_stats[i]) else {
                continue;
            };
            let mom = a.momentum as f64;
            for (name, batch_vals) in [("running_mean", &stats.mean), ("running_var", &stats.var_unbiased)] {
                let buf = self.buffers.get_mut(&node.id, name).expect("bn buffer");
                for (r, &v) in buf.data.iter_mut().zip(batch_vals.iter()) {
                    *r = T::from_f64((1.0 - mom) * r.to_f64() + mom * v);
                }
            }
        }
    }

    fn store(&self, grads: &mut ParamTable<T>, layer: &str, name: &str, g: Vec<T>) {
        if let Some(buf) = grads.get_mut(layer, name) {
            buf.data = g;
        }
    }

    fn running_stats(&self, id: &str, eps: f64) -> BnStats {
        let mean: Vec<f64> = self.buffers.get(id, "running_mean").expect("running_mean").data.iter().map(|v| v.to_f64()).collect();
        let var = &self.buffers.get(id, "running_var").expect("running_var").data;
        BnStats {
            inv_std: var.iter().map(|v| 1.0 / (v.to_f64() + eps).sqrt()).collect(),
            var_unbiased: Vec::new(),
            mean,
        }
    }

    fn input_dims(&self, i: usize) -> &[usize] {
        match self.preds[i].first() {
            Some(&p) => &self.shapes[p],
            None => &self.shapes[i],
        }
    }

    fn conv_geom(&self, i: usize, k: usize, stride: usize, pad: usize, o: usize) -> ConvGeom {
        let ins = self.input_dims(i);
        let out = &self.shapes[i];
        ConvGeom {
            c: ins[0],
            h: ins[1],
            w: ins[2],
            o,
            k,
            stride,
            pad,
            oh: out[1],
            ow: out[2],
        }
    }

    fn pool_geom(&self, i: usize, k: usize, stride: usize) -> PoolGeom {
        let ins = self.input_dims(i);
        let out = &self.shapes[i];
        PoolGeom {
            c: ins[0],
            h: ins[1],
            w: ins[2],
            k,
            stride,
            oh: out[1],
            ow: out[2],
        }
    }
}

/// One-shot forward pass on a calibration batch.
pub fn forward(m: &ModelGraph, batch: &CalibrationBatch, mode: Mode) -> Result<ExecutionRecord> {
    let ex = Executor::<f32>::new(m)?;
    ex.forward(batch.inputs().data(), batch.labels(), mode)
}

/// One-shot forward and backward pass; `per_sample` adds per-sample gradients.
pub fn backward(m: &ModelGraph, batch: &CalibrationBatch, mode: Mode, per_sample: bool) -> Result<(ExecutionRecord, Gradients)> {
    let ex = Executor::<f32>::new(m)?;
    ex.gradients(batch.inputs().data(), batch.labels(), mode, per_sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GraphBuilder, LayerNode};
    use crate::zoo;

    fn set(m: &ModelGraph, layer: &str, name: &str, t: Tensor) -> ModelGraph {
        let node: LayerNode = m.node(layer).unwrap().clone().with_param(name, t);
        m.with_node(node)
    }

    #[test]
    fn identity_conv_reproduces_constant_input() {
        let mut b = GraphBuilder::new("id", [2, 3, 3], 18, 0);
        b.conv("conv", "input", 2, 1, 1, 0, false);
        b.flatten("flat", "conv");
        let m = b.finish("flat").unwrap();
        let eye = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = set(&m, "conv", "weight", eye);
        let x: Vec<f32> = (0..18).map(|i| if i < 9 { 0.75 } else { -2.5 }).collect();
        let rec = Executor::<f32>::new(&m).unwrap().forward(&x, &[0], Mode::Eval).unwrap();
        assert_eq!(rec.logits(), x.as_slice());
    }

    #[test]
    fn eval_batchnorm_with_unit_stats_is_identity() {
        let mut b = GraphBuilder::new("bn", [3, 2, 2], 12, 0);
        b.bn("bn", "input");
        b.flatten("flat", "bn");
        let m = b.finish("flat").unwrap();
        let x: Vec<f32> = (0..24).map(|i| i as f32 * 0.37 - 4.0).collect();
        let rec = Executor::<f32>::new(&m).unwrap().forward(&x, &[1, 2], Mode::Eval).unwrap();
        for (a, b) in rec.logits().iter().zip(&x) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn mlp_loss_matches_hand_arithmetic() {
        // x = [1, 2]; h = relu(W1 x + b1); z = W2 h + b2.
        let mut b = GraphBuilder::new("mlp2", [2, 1, 1], 2, 0);
        b.flatten("flat", "input");
        b.linear("fc1", "flat", 2, true);
        b.relu("relu", "fc1");
        b.linear("fc2", "relu", 2, true);
        let m = b.finish("fc2").unwrap();
        let m = set(&m, "fc1", "weight", Tensor::new(vec![2, 2], vec![0.5, -1.0, 1.5, 0.25]).unwrap());
        let m = set(&m, "fc1", "bias", Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
        let m = set(&m, "fc2", "weight", Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap());
        let m = set(&m, "fc2", "bias", Tensor::new(vec![2], vec![0.0, 0.3]).unwrap());
        // h1 = relu(0.5 - 2 + 0.1) = 0; h2 = relu(1.5 + 0.5 - 0.2) = 1.8
        // z = [3.6, 0.9 + 0.3] = [3.6, 1.2]; label 1 → loss = ln(e^3.6 + e^1.2) - 1.2
        let expect = ((3.6f64).exp() + (1.2f64).exp()).ln() - 1.2;
        let rec = Executor::<f32>::new(&m).unwrap().forward(&[1.0, 2.0], &[1], Mode::Eval).unwrap();
        assert!((rec.loss - expect).abs() < 1e-6, "{} vs {expect}", rec.loss);
    }

    #[test]
    fn dead_branch_gets_exact_zero_gradient() {
        let mut b = GraphBuilder::new("dead", [1, 4, 4], 3, 1);
        b.conv("conv", "input", 2, 3, 1, 1, true);
        b.relu("relu", "conv");
        b.conv("conv_dead", "relu", 2, 3, 1, 1, true);
        b.relu("relu_dead", "conv_dead");
        b.add("sum", "relu", "relu_dead");
        b.gap("gap", "sum");
        b.linear("fc", "gap", 3, true);
        let m = b.finish("fc").unwrap();
        // A bias of -1e3 keeps relu_dead at zero for every input, so conv_dead
        // never influences the output.
        let m = set(&m, "conv_dead", "bias", Tensor::filled(vec![2], -1e3));
        let ex = Executor::<f32>::new(&m).unwrap();
        let x: Vec<f32> = (0..32).map(|i| (i as f32 * 0.1).sin()).collect();
        let rec = ex.forward(&x, &[0, 2], Mode::Train).unwrap();
        let g = ex.backward(&rec).unwrap();
        assert!(g.get("conv_dead", "weight").unwrap().data.iter().all(|&v| v == 0.0));
        assert!(g.get("conv_dead", "bias").unwrap().data.iter().all(|&v| v == 0.0));
        assert!(g.get("conv", "weight").unwrap().data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn per_sample_gradients_average_to_batch_gradient() {
        let m = zoo::vgg_cnn(3);
        let ex = Executor::<f32>::new(&m).unwrap();
        for bsz in [1usize, 3, 5] {
            let x: Vec<f32> = (0..bsz * 192).map(|i| ((i * 7919) % 101) as f32 / 50.0 - 1.0).collect();
            let labels: Vec<u32> = (0..bsz as u32).map(|i| i % 4).collect();
            let (_, g) = ex.gradients(&x, &labels, Mode::Eval, true).unwrap();
            let per = g.per_sample.unwrap();
            assert_eq!(per.len(), bsz);
            for (l, n, p) in g.batch.iter() {
                let scale = p.data.iter().map(|v| v.abs() as f64).fold(0.0, f64::max).max(1e-12);
                for (j, &v) in p.data.iter().enumerate() {
                    let mean: f64 = per.iter().map(|t| t.get(l, n).unwrap().data[j] as f64).sum::<f64>() / bsz as f64;
                    assert!((mean - v as f64).abs() <= 1e-5 * scale, "{l}.{n}[{j}] {mean} vs {v}");
                }
            }
        }
    }

    #[test]
    fn running_stats_follow_momentum_rule() {
        let m = zoo::chain_cnn(0);
        let mut ex = Executor::<f32>::new(&m).unwrap();
        let x: Vec<f32> = (0..2 * 192).map(|i| (i as f32 * 0.05).cos() * 2.0 + 0.5).collect();
        let rec = ex.forward(&x, &[0, 1], Mode::Train).unwrap();
        ex.update_running_stats(&rec);
        let (_, conv1) = rec.activation("conv1").unwrap();
        let n = 2 * 64;
        let c0: Vec<f64> = (0..2).flat_map(|b| conv1[b * 512..b * 512 + 64].iter().map(|&v| v as f64)).collect();
        let mean = c0.iter().sum::<f64>() / n as f64;
        let var = c0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let rm = ex.buffers().get("bn1", "running_mean").unwrap().data[0] as f64;
        let rv = ex.buffers().get("bn1", "running_var").unwrap().data[0] as f64;
        assert!((rm - 0.1 * mean).abs() < 1e-6);
        assert!((rv - (0.9 + 0.1 * var)).abs() < 1e-5);
    }

    #[test]
    fn graph_round_trip_preserves_weights() {
        let m = zoo::residual_cnn(4);
        let back = Executor::<f32>::new(&m).unwrap().to_graph();
        assert_eq!(back, m);
    }

    #[test]
    fn feature_map_output_is_rejected_for_execution() {
        assert!(Executor::<f32>::new(&zoo::single_conv(0)).is_err());
    }

    #[test]
    fn bad_input_length_and_label() {
        let ex = Executor::<f32>::new(&zoo::chain_cnn(0)).unwrap();
        assert!(matches!(ex.forward(&[0.0; 10], &[0], Mode::Eval), Err(Error::Shape { .. })));
        assert!(ex.forward(&[0.0; 192], &[9], Mode::Eval).is_err());
    }
}
