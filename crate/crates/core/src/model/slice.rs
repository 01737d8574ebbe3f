use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerNode};
use crate::error::{Error, Result};

/// Which parameter axis a structural removal slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// `weight[k,:,:,:]` and `bias[k]`.
    ConvOut,
    /// `weight[:,k,:,:]`.
    ConvIn,
    /// `weight[k,:]` and `bias[k]`.
    LinearOut,
    /// `weight[:,k]`.
    LinearIn,
    /// `gamma[k]`, `beta[k]`, `running_mean[k]`, `running_var[k]`.
    NormScaleShift,
}

impl ParamRole {
    /// `(parameter name, axis)` pairs touched by this role. Absent parameters are skipped.
    pub fn targets(self) -> &'static [(&'static str, usize)] {
        match self {
            ParamRole::ConvOut | ParamRole::LinearOut => &[("weight", 0), ("bias", 0)],
            ParamRole::ConvIn | ParamRole::LinearIn => &[("weight", 1)],
            ParamRole::NormScaleShift => &[
                ("gamma", 0),
                ("beta", 0),
                ("running_mean", 0),
                ("running_var", 0),
            ],
        }
    }

    /// Axis of the layer's primary tensor (`weight` or `gamma`) that this role slices.
    pub fn weight_axis(self) -> usize {
        match self {
            ParamRole::ConvIn | ParamRole::LinearIn => 1,
            _ => 0,
        }
    }

    /// Name of the primary tensor scored by weight-based criteria.
    pub fn primary_param(self) -> &'static str {
        match self {
            ParamRole::NormScaleShift => "gamma",
            _ => "weight",
        }
    }

    pub fn is_output(self) -> bool {
        matches!(self, ParamRole::ConvOut | ParamRole::LinearOut)
    }

    pub fn is_input(self) -> bool {
        matches!(self, ParamRole::ConvIn | ParamRole::LinearIn)
    }

    /// Roles a layer kind exposes, in canonical order.
    pub fn roles_of(kind: &LayerKind) -> &'static [ParamRole] {
        match kind {
            LayerKind::Conv2d(_) => &[ParamRole::ConvOut, ParamRole::ConvIn],
            LayerKind::Linear(_) => &[ParamRole::LinearOut, ParamRole::LinearIn],
            LayerKind::BatchNorm2d(_) => &[ParamRole::NormScaleShift],
            _ => &[],
        }
    }

    /// Extent of the prunable axis on `layer`, or `None` if the role does not apply.
    pub fn extent(self, layer: &LayerNode) -> Option<usize> {
        match (self, &layer.kind) {
            (ParamRole::ConvOut, LayerKind::Conv2d(a)) => Some(a.out_channels),
            (ParamRole::ConvIn, LayerKind::Conv2d(a)) => Some(a.in_channels),
            (ParamRole::LinearOut, LayerKind::Linear(a)) => Some(a.out_features),
            (ParamRole::LinearIn, LayerKind::Linear(a)) => Some(a.in_features),
            (ParamRole::NormScaleShift, LayerKind::BatchNorm2d(a)) => Some(a.channels),
            _ => None,
        }
    }
}

/// Returns a copy of `layer` retaining only `keep` along the role's prunable axis.
pub fn slice_param(layer: &LayerNode, role: ParamRole, keep: &[usize]) -> Result<LayerNode> {
    let extent = role.extent(layer).ok_or_else(|| {
        Error::node(
            &layer.id,
            format!("role {role:?} does not apply to {}", layer.kind.name()),
        )
    })?;
    if keep.is_empty() {
        return Err(Error::IndexSet(format!(
            "empty keep list for `{}` {role:?} would delete the layer",
            layer.id
        )));
    }
    if keep.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::IndexSet(format!(
            "keep list for `{}` is not strictly increasing",
            layer.id
        )));
    }
    if let Some(&last) = keep.last() {
        if last >= extent {
            return Err(Error::IndexSet(format!(
                "index {last} out of range for `{}` {role:?} (extent {extent})",
                layer.id
            )));
        }
    }
    if keep.len() == extent {
        return Ok(layer.clone());
    }

    let mut out = layer.clone();
    for &(name, axis) in role.targets() {
        if let Some(t) = out.params.get_mut(name) {
            *t = t.gather_axis(axis, keep);
        }
    }
    let n = keep.len();
    match (&mut out.kind, role) {
        (LayerKind::Conv2d(a), ParamRole::ConvOut) => a.out_channels = n,
        (LayerKind::Conv2d(a), ParamRole::ConvIn) => a.in_channels = n,
        (LayerKind::Linear(a), ParamRole::LinearOut) => a.out_features = n,
        (LayerKind::Linear(a), ParamRole::LinearIn) => a.in_features = n,
        (LayerKind::BatchNorm2d(a), ParamRole::NormScaleShift) => a.channels = n,
        _ => unreachable!("extent() already matched role to kind"),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GraphBuilder;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn conv_layer() -> LayerNode {
        let mut b = GraphBuilder::new("t", [3, 5, 5], 2, 7);
        b.conv("c", "input", 4, 3, 1, 1, true);
        let f = b.flatten("f", "c");
        b.linear("fc", &f, 2, true);
        let g = b.finish("fc").unwrap();
        let mut node = g.node("c").unwrap().clone();
        node.params
            .insert("bias".into(), Tensor::from_fn(vec![4], |i| i as f32 + 0.5));
        node
    }

    #[test]
    fn conv_out_keeps_selected_filters() {
        let layer = conv_layer();
        let s = slice_param(&layer, ParamRole::ConvOut, &[0, 2]).unwrap();
        assert_eq!(s.params["weight"].shape(), &[2, 3, 3, 3]);
        assert_eq!(s.params["bias"].data(), &[0.5, 2.5]);
        assert_eq!(ParamRole::ConvOut.extent(&s), Some(2));
        assert_eq!(s.params["weight"].axis_slice(0, 1), layer.params["weight"].axis_slice(0, 2));
    }

    #[test]
    fn full_keep_is_identity() {
        let layer = conv_layer();
        let s = slice_param(&layer, ParamRole::ConvIn, &[0, 1, 2]).unwrap();
        assert_eq!(s, layer);
    }

    #[test]
    fn batchnorm_slices_all_four_vectors() {
        let mut b = GraphBuilder::new("t", [4, 2, 2], 4, 0);
        b.bn("bn", "input");
        let g = b.finish("bn").unwrap();
        let mut bn = g.node("bn").unwrap().clone();
        for (j, name) in ["gamma", "beta", "running_mean", "running_var"].iter().enumerate() {
            bn.params.insert(
                name.to_string(),
                Tensor::from_fn(vec![4], |i| (10 * j + i) as f32 + 1.0),
            );
        }
        let s = slice_param(&bn, ParamRole::NormScaleShift, &[1, 3]).unwrap();
        for name in ["gamma", "beta", "running_mean", "running_var"] {
            let orig = bn.params[name].data();
            assert_eq!(s.params[name].data(), &[orig[1], orig[3]], "{name}");
        }
    }

    #[test]
    fn rejects_bad_keep_lists() {
        let layer = conv_layer();
        assert!(slice_param(&layer, ParamRole::ConvOut, &[]).is_err());
        assert!(slice_param(&layer, ParamRole::ConvOut, &[2, 1]).is_err());
        assert!(slice_param(&layer, ParamRole::ConvOut, &[1, 1]).is_err());
        assert!(slice_param(&layer, ParamRole::ConvOut, &[4]).is_err());
        assert!(slice_param(&layer, ParamRole::LinearIn, &[0]).is_err());
    }

    fn subset(n: usize) -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::btree_set(0..n, 1..=n).prop_map(|s| s.into_iter().collect())
    }

    proptest! {
        #[test]
        fn slicing_composes(k1 in subset(4), pick in proptest::collection::btree_set(0usize..4, 1..=4)) {
            let layer = conv_layer();
            let k2: Vec<usize> = pick.into_iter().filter(|&i| i < k1.len()).collect();
            prop_assume!(!k2.is_empty());
            let twice = slice_param(&slice_param(&layer, ParamRole::ConvOut, &k1).unwrap(), ParamRole::ConvOut, &k2).unwrap();
            let composed: Vec<usize> = k2.iter().map(|&j| k1[j]).collect();
            let once = slice_param(&layer, ParamRole::ConvOut, &composed).unwrap();
            prop_assert_eq!(twice, once);
        }
    }
}
