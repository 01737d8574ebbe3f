//! Sparsity regularizers expressed as gradient adjustments.
//!
//! No penalty term is added to the loss. Instead, after backward, each hook
//! adds the penalty's (sub)gradient to the parameter gradients, and the
//! optimizer step proceeds as usual.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{train, Dataset, EpochMetrics, GradHook, ParamBuf, ParamTable, TrainConfig};
use crate::group::{build_groups, GroupMember, PruneGroup};
use crate::importance::Criterion;
use crate::model::{LayerKind, ModelGraph, ParamRole, BN_BUFFERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    GroupLasso,
    GroupNorm,
    Bnscale,
    GrowingReg,
}

impl Regularizer {
    pub const ALL: [Regularizer; 4] = [
        Regularizer::GroupLasso,
        Regularizer::GroupNorm,
        Regularizer::Bnscale,
        Regularizer::GrowingReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regularizer::GroupLasso => "group_lasso",
            Regularizer::GroupNorm => "group_norm",
            Regularizer::Bnscale => "bnscale",
            Regularizer::GrowingReg => "growing_reg",
        }
    }
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regularizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Regularizer::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown regularizer `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub name: Regularizer,
    pub lambda: f64,
    /// Learning rate used during sparse learning.
    pub eta: f64,
    #[serde(default)]
    pub delta: f64,
    /// Epochs between growth steps (growing_reg).
    #[serde(default = "default_interval")]
    pub interval: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Fraction of each group's indices that receives the growing penalty.
    #[serde(default = "default_fraction")]
    pub fraction: f64,
}

fn default_interval() -> usize {
    1
}
fn default_eps() -> f64 {
    1e-8
}
fn default_fraction() -> f64 {
    0.5
}

impl RegConfig {
    pub fn new(name: Regularizer, lambda: f64, eta: f64) -> Self {
        RegConfig {
            name,
            lambda,
            eta,
            delta: 0.0,
            interval: default_interval(),
            eps: default_eps(),
            fraction: default_fraction(),
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be finite and >= 0, got {}", self.delta));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if self.interval == 0 {
            return bad("growth interval must be >= 1 epoch".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!("fraction must be in (0,1], got {}", self.fraction));
        }
        Ok(())
    }

    /// Coefficient in effect at `epoch`: `λ + δ·⌊epoch / interval⌋`.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        match self.name {
            Regularizer::GrowingReg => self.lambda + self.delta * (epoch / self.interval) as f64,
            _ => self.lambda,
        }
    }

    fn is_identity(&self) -> bool {
        self.lambda == 0.0 && (self.name != Regularizer::GrowingReg || self.delta == 0.0)
    }
}

/// Tuned hyperparameters from published sparse-learning runs, keyed by
/// regularizer, the criterion it prepares for, model and dataset, plus
/// `desk_cnn`/`desk` entries scaled for the small synthetic benchmark.
pub fn preset(reg: Regularizer, criterion: Criterion, model: &str, dataset: &str) -> Option<RegConfig> {
    use Criterion::{Bnscale as CB, MagnitudeL2 as L2};
    use Regularizer::*;
    const T: &[(Regularizer, Criterion, &str, &str, f64, f64, f64)] = &[
        (GroupLasso, L2, "vgg19", "cifar100", 1e-5, 1e-3, 0.0),
        (GroupLasso, L2, "resnet18", "cifar100", 5e-4, 5e-3, 0.0),
        (GroupLasso, L2, "resnet50", "cifar100", 1e-4, 5e-3, 0.0),
        (GroupLasso, L2, "resnet18", "imagenet", 5e-6, 5e-3, 0.0),
        (GroupLasso, L2, "resnet50", "imagenet", 5e-4, 1e-2, 0.0),
        (GroupLasso, L2, "yolov8", "coco", 1e-4, 1e-3, 0.0),
        (GroupLasso, CB, "vgg19", "cifar100", 5e-4, 5e-3, 0.0),
        (GroupLasso, CB, "resnet18", "cifar100", 5e-6, 1e-2, 0.0),
        (GroupLasso, CB, "resnet50", "cifar100", 5e-6, 1e-2, 0.0),
        (GroupLasso, CB, "resnet18", "imagenet", 5e-4, 5e-3, 0.0),
        (GroupLasso, CB, "resnet50", "imagenet", 5e-4, 1e-2, 0.0),
        (GroupLasso, CB, "yolov8", "coco", 5e-4, 1e-3, 0.0),
        (GroupNorm, L2, "vgg19", "cifar100", 1e-5, 5e-3, 0.0),
        (GroupNorm, L2, "resnet18", "cifar100", 1e-4, 5e-3, 0.0),
        (GroupNorm, L2, "resnet50", "cifar100", 1e-4, 5e-3, 0.0),
        (GroupNorm, L2, "resnet18", "imagenet", 5e-6, 1e-2, 0.0),
        (GroupNorm, L2, "resnet50", "imagenet", 5e-4, 5e-3, 0.0),
        (GroupNorm, L2, "yolov8", "coco", 1e-4, 1e-2, 0.0),
        (Bnscale, CB, "vgg19", "cifar100", 5e-4, 5e-3, 0.0),
        (Bnscale, CB, "resnet18", "cifar100", 1e-4, 1e-2, 0.0),
        (Bnscale, CB, "resnet50", "cifar100", 1e-5, 1e-2, 0.0),
        (Bnscale, CB, "resnet18", "imagenet", 1e-4, 1e-2, 0.0),
        (Bnscale, CB, "resnet50", "imagenet", 5e-6, 1e-2, 0.0),
        (Bnscale, CB, "yolov8", "coco", 1e-5, 5e-3, 0.0),
        (GrowingReg, L2, "vgg19", "cifar100", 1e-4, 1e-3, 1e-5),
        (GrowingReg, L2, "resnet18", "cifar100", 5e-4, 1e-2, 1e-4),
        (GrowingReg, L2, "resnet50", "cifar100", 1e-4, 1e-3, 1e-5),
        (GrowingReg, L2, "resnet18", "imagenet", 1e-4, 5e-3, 5e-5),
        (GrowingReg, L2, "resnet50", "imagenet", 5e-5, 1e-2, 1e-5),
        (GrowingReg, L2, "yolov8", "coco", 1e-4, 5e-3, 5e-5),
        (GroupLasso, L2, "desk_cnn", "desk", 5e-4, 1e-2, 0.0),
        (GroupLasso, CB, "desk_cnn", "desk", 5e-4, 1e-2, 0.0),
        (GroupNorm, L2, "desk_cnn", "desk", 5e-4, 1e-2, 0.0),
        (Bnscale, CB, "desk_cnn", "desk", 1e-4, 1e-2, 0.0),
        (GrowingReg, L2, "desk_cnn", "desk", 5e-4, 1e-2, 1e-4),
    ];
    T.iter()
        .find(|r| r.0 == reg && r.1 == criterion && r.2 == model && r.3 == dataset)
        .map(|&(r, _, _, _, lambda, eta, delta)| RegConfig::new(r, lambda, eta).with_delta(delta))
}

/// Offsets of the entries of `buf` at positions `[k·block, (k+1)·block)` of `axis`.
fn slice_offsets(shape: &[usize], axis: usize, k: usize, block: usize) -> impl Iterator<Item = usize> {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    (0..outer).flat_map(move |o| {
        let start = (o * n + k * block) * inner;
        start..start + block * inner
    })
}

fn sq_norm(buf: &ParamBuf<f32>, axis: usize, k: usize, block: usize) -> f64 {
    slice_offsets(&buf.shape, axis, k, block)
        .map(|i| f64::from(buf.data[i]).powi(2))
        .sum()
}

/// Adds `scale(w)·w` to every entry of the slice; `scale` is applied in f64.
fn add_shrink(g: &mut ParamBuf<f32>, w: &ParamBuf<f32>, axis: usize, k: usize, block: usize, scale: f64) {
    for i in slice_offsets(&w.shape, axis, k, block) {
        g.data[i] = (f64::from(g.data[i]) + scale * f64::from(w.data[i])) as f32;
    }
}

fn is_weight_role(r: ParamRole) -> bool {
    r != ParamRole::NormScaleShift
}

/// `(param name, axis)` entries of a member that a regularizer touches.
fn member_targets(reg: Regularizer, m: &GroupMember) -> Vec<(&'static str, usize)> {
    match reg {
        Regularizer::GroupNorm => m
            .role
            .targets()
            .iter()
            .filter(|(n, _)| !BN_BUFFERS.contains(n))
            .copied()
            .collect(),
        _ if is_weight_role(m.role) => vec![("weight", m.role.weight_axis())],
        _ => vec![],
    }
}

/// Gradient hook for one regularizer over a fixed set of groups.
#[derive(Debug, Clone)]
pub struct RegHook {
    cfg: RegConfig,
    groups: Vec<PruneGroup>,
    /// Growing-penalty selection: interval it was computed for and per-group index sets.
    selection: Option<(usize, Vec<BTreeSet<usize>>)>,
}

pub fn make_grad_hook(cfg: &RegConfig, m: &ModelGraph, groups: &[PruneGroup]) -> Result<RegHook> {
    cfg.validate()?;
    if cfg.name == Regularizer::Bnscale && !m.nodes.values().any(|n| matches!(n.kind, LayerKind::BatchNorm2d(_))) {
        return Err(Error::Config(format!("bnscale regularizer: model `{}` has no batchnorm", m.name)));
    }
    Ok(RegHook {
        cfg: cfg.clone(),
        groups: groups.iter().filter(|g| g.prunable()).cloned().collect(),
        selection: None,
    })
}

impl RegHook {
    pub fn config(&self) -> &RegConfig {
        &self.cfg
    }

    fn group_lasso(&self, params: &ParamTable<f32>, grads: &mut ParamTable<f32>, lambda: f64) {
        for g in &self.groups {
            for mem in &g.members {
                for (name, axis) in member_targets(Regularizer::GroupLasso, mem) {
                    let (Some(w), Some(gb)) = (params.get(&mem.layer, name), grads.get_mut(&mem.layer, name)) else {
                        continue;
                    };
                    for k in 0..g.width {
                        let norm = sq_norm(w, axis, k, mem.block()).sqrt();
                        add_shrink(gb, w, axis, k, mem.block(), lambda / (norm + self.cfg.eps));
                    }
                }
            }
        }
    }

    fn group_norm(&self, params: &ParamTable<f32>, grads: &mut ParamTable<f32>, lambda: f64) {
        for g in &self.groups {
            let norms = group_norms(params, g);
            for mem in &g.members {
                for (name, axis) in member_targets(Regularizer::GroupNorm, mem) {
                    let (Some(w), Some(gb)) = (params.get(&mem.layer, name), grads.get_mut(&mem.layer, name)) else {
                        continue;
                    };
                    for (k, &norm) in norms.iter().enumerate() {
                        add_shrink(gb, w, axis, k, mem.block(), lambda / (norm + self.cfg.eps));
                    }
                }
            }
        }
    }

    fn bnscale(&self, params: &ParamTable<f32>, grads: &mut ParamTable<f32>, lambda: f64) {
        for g in &self.groups {
            for mem in g.members.iter().filter(|m| m.role == ParamRole::NormScaleShift) {
                let (Some(w), Some(gb)) = (params.get(&mem.layer, "gamma"), grads.get_mut(&mem.layer, "gamma")) else {
                    continue;
                };
                for (gi, &wi) in gb.data.iter_mut().zip(&w.data) {
                    let sign = if wi > 0.0 {
                        1.0
                    } else if wi < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *gi = (f64::from(*gi) + lambda * sign) as f32;
                }
            }
        }
    }

    fn growing(&mut self, params: &ParamTable<f32>, grads: &mut ParamTable<f32>, epoch: usize) {
        let lambda = self.cfg.lambda_at(epoch);
        let interval = epoch / self.cfg.interval;
        if self.selection.as_ref().map(|s| s.0) != Some(interval) {
            let sets = self
                .groups
                .iter()
                .map(|g| bottom_fraction(&weight_norms(params, g), self.cfg.fraction))
                .collect();
            self.selection = Some((interval, sets));
        }
        let (_, sets) = self.selection.as_ref().expect("selection computed");
        for (g, set) in self.groups.iter().zip(sets) {
            for mem in &g.members {
                for (name, axis) in member_targets(Regularizer::GrowingReg, mem) {
                    let (Some(w), Some(gb)) = (params.get(&mem.layer, name), grads.get_mut(&mem.layer, name)) else {
                        continue;
                    };
                    for &k in set {
                        add_shrink(gb, w, axis, k, mem.block(), lambda);
                    }
                }
            }
        }
    }
}

impl GradHook for RegHook {
    fn adjust(&mut self, params: &ParamTable<f32>, grads: &mut ParamTable<f32>, epoch: usize) -> Result<()> {
        if self.cfg.is_identity() {
            return Ok(());
        }
        let lambda = self.cfg.lambda;
        match self.cfg.name {
            Regularizer::GroupLasso => self.group_lasso(params, grads, lambda),
            Regularizer::GroupNorm => self.group_norm(params, grads, lambda),
            Regularizer::Bnscale => self.bnscale(params, grads, lambda),
            Regularizer::GrowingReg => self.growing(params, grads, epoch),
        }
        Ok(())
    }
}

/// Per-index L2 norm over the concatenation of every member's slices (all role targets).
pub fn group_norms(params: &ParamTable<f32>, g: &PruneGroup) -> Vec<f64> {
    let mut sq = vec![0.0; g.width];
    for mem in &g.members {
        for (name, axis) in member_targets(Regularizer::GroupNorm, mem) {
            if let Some(w) = params.get(&mem.layer, name) {
                for (k, s) in sq.iter_mut().enumerate() {
                    *s += sq_norm(w, axis, k, mem.block());
                }
            }
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// Per-index L2 norm over the concatenated conv/linear weight slices of a group.
pub fn weight_norms(params: &ParamTable<f32>, g: &PruneGroup) -> Vec<f64> {
    let mut sq = vec![0.0; g.width];
    for mem in g.members.iter().filter(|m| is_weight_role(m.role)) {
        if let Some(w) = params.get(&mem.layer, "weight") {
            for (k, s) in sq.iter_mut().enumerate() {
                *s += sq_norm(w, mem.role.weight_axis(), k, mem.block());
            }
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// The `⌊fraction·n⌋` lowest entries (ties by index).
fn bottom_fraction(scores: &[f64], fraction: f64) -> BTreeSet<usize> {
    let count = (fraction * scores.len() as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.into_iter().take(count).collect()
}

fn param_table(m: &ModelGraph) -> ParamTable<f32> {
    ParamTable::from_model(m)
}

/// The norm statistic each regularizer pushes down, on a trained model:
/// * group_lasso: mean per-member slice L2 norm over all prunable indices,
/// * group_norm: mean concatenated group-index norm,
/// * bnscale: mean `|γ|` of batchnorms in prunable groups,
/// * growing_reg: mean concatenated weight norm of the bottom `fraction` of each group.
pub fn targeted_statistic(reg: &RegConfig, m: &ModelGraph) -> Result<f64> {
    let groups: Vec<PruneGroup> = build_groups(m)?.into_iter().filter(|g| g.prunable()).collect();
    let params = param_table(m);
    let mut vals = Vec::new();
    for g in &groups {
        match reg.name {
            Regularizer::GroupLasso => {
                for mem in g.members.iter().filter(|m| is_weight_role(m.role)) {
                    let w = params.get(&mem.layer, "weight").expect("weight");
                    vals.extend((0..g.width).map(|k| sq_norm(w, mem.role.weight_axis(), k, mem.block()).sqrt()));
                }
            }
            Regularizer::GroupNorm => vals.extend(group_norms(&params, g)),
            Regularizer::Bnscale => {
                for mem in g.members.iter().filter(|m| m.role == ParamRole::NormScaleShift) {
                    let gamma = params.get(&mem.layer, "gamma").expect("gamma");
                    vals.extend(gamma.data.iter().map(|v| f64::from(v.abs())));
                }
            }
            Regularizer::GrowingReg => {
                let norms = weight_norms(&params, g);
                vals.extend(bottom_fraction(&norms, reg.fraction).into_iter().map(|k| norms[k]));
            }
        }
    }
    if vals.is_empty() {
        return Err(Error::Config(format!("no parameters targeted by `{}`", reg.name)));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone)]
pub struct SparsifyOutcome {
    pub model: ModelGraph,
    pub history: Vec<EpochMetrics>,
    /// Mean wall time of one sparse-learning epoch, seconds.
    pub reg_time: f64,
}

/// Sparse learning: trains with the regularizer hook at learning rate `η`.
pub fn sparsify(m: &ModelGraph, data: &Dataset, reg: &RegConfig, train_cfg: &TrainConfig) -> Result<SparsifyOutcome> {
    let groups = build_groups(m)?;
    let mut hook = make_grad_hook(reg, m, &groups)?;
    let cfg = TrainConfig {
        lr: reg.eta,
        ..train_cfg.clone()
    };
    let out = train(m, data, &cfg, Some(&mut hook))?;
    let reg_time = if out.history.is_empty() {
        0.0
    } else {
        out.history.iter().map(|h| h.seconds).sum::<f64>() / out.history.len() as f64
    };
    Ok(SparsifyOutcome {
        model: out.model,
        history: out.history,
        reg_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;

    fn setup(reg: Regularizer, lambda: f64) -> (ModelGraph, RegHook, ParamTable<f32>) {
        let m = zoo::residual_cnn(3);
        let groups = build_groups(&m).unwrap();
        let hook = make_grad_hook(&RegConfig::new(reg, lambda, 0.01).with_delta(1e-4), &m, &groups).unwrap();
        (m.clone(), hook, param_table(&m))
    }

    #[test]
    fn zero_lambda_is_identity() {
        for reg in Regularizer::ALL {
            let m = zoo::chain_cnn(0);
            let groups = build_groups(&m).unwrap();
            let mut hook = make_grad_hook(&RegConfig::new(reg, 0.0, 0.01), &m, &groups).unwrap();
            let params = param_table(&m);
            let mut grads = params.zeros_like();
            grads.add_scaled(&params, 0.5);
            let before = grads.clone();
            hook.adjust(&params, &mut grads, 3).unwrap();
            assert_eq!(grads, before, "{reg}");
        }
    }

    #[test]
    fn bnscale_adds_signed_lambda() {
        let mut b = crate::model::GraphBuilder::new("bn", [2, 2, 2], 2, 0);
        b.conv("conv", "input", 2, 1, 1, 0, false);
        b.bn("bn", "conv");
        b.gap("gap", "bn");
        b.linear("fc", "gap", 2, true);
        let m = b.finish("fc").unwrap();
        let bn = m
            .node("bn")
            .unwrap()
            .clone()
            .with_param("gamma", crate::tensor::Tensor::new(vec![2], vec![0.5, -2.0]).unwrap());
        let m = m.with_node(bn);
        let groups = build_groups(&m).unwrap();
        let mut hook = make_grad_hook(&RegConfig::new(Regularizer::Bnscale, 0.1, 0.01), &m, &groups).unwrap();
        let params = param_table(&m);
        let mut grads = params.zeros_like();
        hook.adjust(&params, &mut grads, 0).unwrap();
        assert_eq!(grads.get("bn", "gamma").unwrap().data, vec![0.1f32, -0.1]);
        assert!(make_grad_hook(&RegConfig::new(Regularizer::Bnscale, 0.1, 0.01), &zoo::mlp(0), &[]).is_err());
    }

    #[test]
    fn growing_lambda_schedule() {
        let cfg = RegConfig::new(Regularizer::GrowingReg, 5e-4, 0.01).with_delta(1e-4);
        assert!((cfg.lambda_at(5) - (5e-4 + 5e-4)).abs() < 1e-18);
        assert_eq!(cfg.lambda_at(0), 5e-4);
        let slow = RegConfig {
            interval: 2,
            ..cfg.clone()
        };
        assert_eq!(slow.lambda_at(3), cfg.lambda_at(1));
    }

    #[test]
    fn additions_scale_linearly_with_lambda() {
        for reg in Regularizer::ALL {
            let (_, mut h1, params) = setup(reg, 1e-3);
            let (_, mut h2, _) = setup(reg, 2e-3);
            let (mut g1, mut g2) = (params.zeros_like(), params.zeros_like());
            h1.adjust(&params, &mut g1, 0).unwrap();
            h2.adjust(&params, &mut g2, 0).unwrap();
            let mut touched = 0;
            for (l, n, a) in g1.iter() {
                for (x, y) in a.data.iter().zip(&g2.get(l, n).unwrap().data) {
                    assert!((2.0 * x - y).abs() <= 1e-6 * y.abs().max(1e-12), "{reg} {l}.{n}");
                    touched += (*x != 0.0) as usize;
                }
            }
            assert!(touched > 0, "{reg} changed nothing");
        }
    }

    #[test]
    fn shrinkage_is_finite_at_zero_weights() {
        for reg in [Regularizer::GroupLasso, Regularizer::GroupNorm] {
            let (_, mut hook, params) = setup(reg, 1.0);
            let zero = params.zeros_like();
            let mut grads = params.zeros_like();
            hook.adjust(&zero, &mut grads, 0).unwrap();
            assert!(grads.iter().all(|(_, _, p)| p.data.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn group_norm_uses_one_shared_norm_per_index() {
        // Batchnorm scales belong to exactly one group, so their additions
        // expose the shared per-index norm directly.
        let (m, mut hook, params) = setup(Regularizer::GroupNorm, 1.0);
        let mut grads = params.zeros_like();
        hook.adjust(&params, &mut grads, 0).unwrap();
        let groups = build_groups(&m).unwrap();
        let g = groups.iter().find(|g| g.prunable() && g.members.len() > 6).unwrap();
        let norms = group_norms(&params, g);
        let mut brute = vec![0.0f64; g.width];
        for mem in &g.members {
            for (name, axis) in mem.role.targets() {
                if crate::model::BN_BUFFERS.contains(name) {
                    continue;
                }
                let Some(t) = m.node(&mem.layer).unwrap().param(name) else { continue };
                for (k, b) in brute.iter_mut().enumerate() {
                    *b += t.axis_slice(*axis, k).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>();
                }
            }
        }
        for (n, b) in norms.iter().zip(&brute) {
            assert!((n - b.sqrt()).abs() <= 1e-12 * n.max(1.0));
        }
        for mem in g.members.iter().filter(|m| m.role == ParamRole::NormScaleShift) {
            let w = params.get(&mem.layer, "gamma").unwrap();
            let gr = grads.get(&mem.layer, "gamma").unwrap();
            for k in 0..g.width {
                let expect = f64::from(w.data[k]) / (norms[k] + 1e-8);
                assert!((f64::from(gr.data[k]) - expect).abs() <= 1e-6 * expect.abs().max(1e-6));
            }
        }
    }

    #[test]
    fn presets_cover_table_and_desk() {
        let p = preset(Regularizer::GrowingReg, Criterion::MagnitudeL2, "resnet18", "cifar100").unwrap();
        assert_eq!((p.lambda, p.eta, p.delta), (5e-4, 1e-2, 1e-4));
        let p = preset(Regularizer::Bnscale, Criterion::Bnscale, "resnet50", "imagenet").unwrap();
        assert_eq!((p.lambda, p.eta), (5e-6, 1e-2));
        for reg in Regularizer::ALL {
            let crit = if reg == Regularizer::Bnscale { Criterion::Bnscale } else { Criterion::MagnitudeL2 };
            assert!(preset(reg, crit, "desk_cnn", "desk").is_some(), "{reg}");
        }
        assert!(preset(Regularizer::Bnscale, Criterion::Bnscale, "vit_small", "imagenet").is_none());
    }
}
