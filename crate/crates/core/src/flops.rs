//! Parameter and FLOP accounting. One multiply-accumulate counts as one FLOP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{conv_out_extent, LayerKind, LayerNode, ModelGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub params: u64,
    pub flops: u64,
    /// Output spatial extent; `(1, 1)` for flat outputs.
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCostEntry {
    pub id: String,
    pub kind: String,
    #[serde(flatten)]
    pub cost: LayerCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCostEntry>,
    pub total_params: u64,
    pub total_flops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRatio {
    pub params: f64,
    pub flops: f64,
}

impl CostReport {
    pub fn ratio_to(&self, baseline: &CostReport) -> CostRatio {
        CostRatio {
            params: self.total_params as f64 / baseline.total_params.max(1) as f64,
            flops: self.total_flops as f64 / baseline.total_flops.max(1) as f64,
        }
    }

    pub fn layer(&self, id: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.id == id).map(|l| &l.cost)
    }

    /// Plain-text table, one row per costed layer.
    pub fn to_table(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:<14} {:>12} {:>14} {:>9}", "layer", "kind", "params", "flops", "out HxW");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<20} {:<14} {:>12} {:>14} {:>9}",
                l.id,
                l.kind,
                l.cost.params,
                l.cost.flops,
                format!("{}x{}", l.cost.out_h, l.cost.out_w)
            );
        }
        let _ = writeln!(s, "{:<35} {:>12} {:>14}", "total", self.total_params, self.total_flops);
        s
    }
}

/// Cost of one layer given its per-sample input shape (`[C,H,W]` or `[F]`).
pub fn layer_cost(layer: &LayerNode, input: &[usize]) -> Result<LayerCost> {
    let params = layer.param_count() as u64;
    let (h, w) = match input {
        &[_, h, w] => (h, w),
        _ => (1, 1),
    };
    let elems = |c: usize, oh: usize, ow: usize| (c * oh * ow) as u64;
    let cost = |flops: u64, out_h: usize, out_w: usize| LayerCost {
        params,
        flops,
        out_h,
        out_w,
    };
    Ok(match &layer.kind {
        LayerKind::Conv2d(a) => {
            let oh = conv_out_extent(&layer.id, h, a.kernel, a.stride, a.padding)?;
            let ow = conv_out_extent(&layer.id, w, a.kernel, a.stride, a.padding)?;
            let macs = (a.in_channels * a.out_channels * oh * ow * a.kernel * a.kernel) as u64;
            cost(macs, oh, ow)
        }
        LayerKind::Linear(a) => cost((a.in_features * a.out_features) as u64, 1, 1),
        LayerKind::BatchNorm2d(a) => cost(2 * elems(a.channels, h, w), h, w),
        LayerKind::MaxPool2d(p) | LayerKind::AvgPool2d(p) => {
            let oh = conv_out_extent(&layer.id, h, p.kernel, p.stride, 0)?;
            let ow = conv_out_extent(&layer.id, w, p.kernel, p.stride, 0)?;
            cost(elems(input[0], oh, ow), oh, ow)
        }
        LayerKind::Relu | LayerKind::Add => {
            let n: usize = input.iter().product();
            cost(n as u64, h, w)
        }
        LayerKind::GlobalAvgPool => cost(input[0] as u64, 1, 1),
        LayerKind::Flatten => cost(0, 1, 1),
        LayerKind::Input | LayerKind::Output | LayerKind::SoftmaxCeLoss => cost(0, h, w),
    })
}

pub fn model_cost(m: &ModelGraph) -> Result<CostReport> {
    let info = m.analyze()?;
    let mut layers = Vec::new();
    for &i in &info.order {
        let node = &m.nodes[i];
        let input: &[usize] = match node.kind {
            LayerKind::Input => &info.shapes[i],
            _ => info.input_shape(i),
        };
        let cost = layer_cost(node, input)?;
        if !matches!(node.kind, LayerKind::Input | LayerKind::Output) {
            layers.push(LayerCostEntry {
                id: node.id.clone(),
                kind: node.kind.name().to_string(),
                cost,
            });
        }
    }
    Ok(CostReport {
        total_params: layers.iter().map(|l| l.cost.params).sum(),
        total_flops: layers.iter().map(|l| l.cost.flops).sum(),
        layers,
    })
}

/// FLOPs allowed at `speedup`, where speedup = original / pruned FLOPs.
pub fn flops_budget(original: &CostReport, speedup: f64) -> Result<u64> {
    if !(speedup >= 1.0) || !speedup.is_finite() {
        return Err(Error::Config(format!("speedup must be >= 1, got {speedup}")));
    }
    Ok((original.total_flops as f64 / speedup).floor() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GraphBuilder;

    fn conv_model(c: usize, out: usize, k: usize, hw: usize, stride: usize, pad: usize) -> ModelGraph {
        let mut b = GraphBuilder::new("c", [c, hw, hw], 1, 0);
        b.conv("conv", "input", out, k, stride, pad, true);
        b.finish("conv").unwrap()
    }

    #[test]
    fn conv_cost_matches_hand_count() {
        let m = conv_model(3, 8, 3, 16, 1, 1);
        let c = layer_cost(m.node("conv").unwrap(), &[3, 16, 16]).unwrap();
        assert_eq!(c.params, 216 + 8);
        assert_eq!(c.flops, 55_296);
        assert_eq!((c.out_h, c.out_w), (16, 16));
    }

    #[test]
    fn strided_conv_extent() {
        let m = conv_model(1, 1, 3, 8, 2, 1);
        let c = layer_cost(m.node("conv").unwrap(), &[1, 8, 8]).unwrap();
        assert_eq!((c.out_h, c.out_w), (4, 4));
    }

    #[test]
    fn linear_cost() {
        let mut b = GraphBuilder::new("l", [10, 1, 1], 1, 0);
        b.flatten("f", "input");
        b.linear("fc", "f", 1, true);
        let m = b.finish("fc").unwrap();
        let c = layer_cost(m.node("fc").unwrap(), &[10]).unwrap();
        assert_eq!((c.params, c.flops), (11, 10));
    }

    #[test]
    fn budget() {
        let r = CostReport {
            layers: vec![],
            total_params: 1,
            total_flops: 556_000_000,
        };
        assert_eq!(flops_budget(&r, 4.0).unwrap(), 139_000_000);
        assert_eq!(flops_budget(&r, 1.0).unwrap(), 556_000_000);
        assert!(flops_budget(&r, 0.5).is_err());
        let conv = model_cost(&conv_model(3, 8, 3, 16, 1, 1)).unwrap();
        assert_eq!(flops_budget(&conv, 2.0).unwrap(), 27_648);
    }

    #[test]
    fn sequential_convs_add_up() {
        let mut b = GraphBuilder::new("two", [4, 6, 6], 1, 0);
        b.conv("a", "input", 4, 3, 1, 1, false);
        b.conv("b", "a", 4, 3, 1, 1, false);
        let m = b.finish("b").unwrap();
        let r = model_cost(&m).unwrap();
        assert_eq!(r.total_flops, 2 * r.layer("a").unwrap().flops);
        assert_eq!(r.layer("a"), r.layer("b"));
    }

    #[test]
    fn per_parameter_cost_is_output_area() {
        let mut b = GraphBuilder::new("p", [4, 12, 12], 1, 0);
        b.conv("conv", "input", 6, 3, 1, 1, false);
        let m = b.finish("conv").unwrap();
        let c = model_cost(&m).unwrap().layer("conv").copied().unwrap();
        assert_eq!(c.flops / c.params, (c.out_h * c.out_w) as u64);
        assert_eq!(c.flops % c.params, 0);
    }

    #[test]
    fn negative_extent_is_an_error() {
        let m = conv_model(1, 1, 3, 8, 1, 1);
        let mut node = m.node("conv").unwrap().clone();
        if let LayerKind::Conv2d(a) = &mut node.kind {
            a.padding = 0;
        }
        assert!(layer_cost(&node, &[1, 2, 2]).is_err());
    }
}
