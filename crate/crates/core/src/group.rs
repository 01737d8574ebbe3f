//! Dependency grouping.
//!
//! Every prunable site `(layer, role)` lives in a channel space. Index-coupling
//! rules merge spaces as the graph is walked in topological order:
//!
//! * a producer's output role opens a new space; each consumer's input role joins it,
//! * batchnorm joins its input's space, relu/pool/loss/output pass it through,
//! * `add` merges the spaces of both operands,
//! * `flatten` after a `[C,H,W]` tensor keeps the space but tags downstream
//!   linear inputs with an `H×W` index expansion (channel `k` ↦ `[k·S, (k+1)·S)`),
//! * global average pooling maps channel `k` to feature `k` one-to-one.
//!
//! Spaces touching the raw input channels or the class logits are unprunable.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{slice_param, GraphInfo, LayerKind, ModelGraph, ParamRole};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMember {
    pub layer: String,
    pub role: ParamRole,
    /// `[H, W]` of the flattened feature map when this linear input sees
    /// channel `k` as the contiguous block `[k·H·W, (k+1)·H·W)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion: Option<[usize; 2]>,
}

impl GroupMember {
    /// Number of prunable-axis entries per group index.
    pub fn block(&self) -> usize {
        self.expansion.map_or(1, |[h, w]| h * w)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneGroup {
    pub id: usize,
    pub members: Vec<GroupMember>,
    /// Shared channel extent; member axis extent is `width * member.block()`.
    pub width: usize,
    /// Minimum number of indices that must survive any removal.
    pub protected_floor: usize,
    pub unprunable: bool,
}

impl PruneGroup {
    pub fn prunable(&self) -> bool {
        !self.unprunable
    }

    pub fn has_role(&self, pred: impl Fn(ParamRole) -> bool) -> bool {
        self.members.iter().any(|m| pred(m.role))
    }
}

#[derive(Clone, Copy)]
struct Flow {
    space: usize,
    expansion: Option<[usize; 2]>,
}

struct Spaces {
    parent: Vec<usize>,
    width: Vec<usize>,
}

impl Spaces {
    fn open(&mut self, width: usize) -> usize {
        self.parent.push(self.parent.len());
        self.width.push(width);
        self.parent.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    // The smaller root wins so group ids follow creation order.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Partitions all prunable sites of `m` into coupled groups.
pub fn build_groups(m: &ModelGraph) -> Result<Vec<PruneGroup>> {
    let info = m.analyze()?;
    build_groups_with(m, &info)
}

pub fn build_groups_with(m: &ModelGraph, info: &GraphInfo) -> Result<Vec<PruneGroup>> {
    let n = m.nodes.len();
    let mut spaces = Spaces {
        parent: Vec::new(),
        width: Vec::new(),
    };
    let mut flows: Vec<Option<Flow>> = vec![None; n];
    let mut sites: Vec<(usize, ParamRole, usize, Option<[usize; 2]>)> = Vec::new();
    let mut pinned = Vec::new();

    for &i in &info.order {
        let node = &m.nodes[i];
        let input_flow = |slot: usize| -> Result<Flow> {
            flows[info.preds[i][slot]].ok_or_else(|| Error::Grouping(format!("no channel flow into `{}`", node.id)))
        };
        let flow = match &node.kind {
            LayerKind::Input => {
                let s = spaces.open(m.input_shape[0]);
                pinned.push(s);
                Flow {
                    space: s,
                    expansion: None,
                }
            }
            LayerKind::Conv2d(a) => {
                let f = input_flow(0)?;
                sites.push((i, ParamRole::ConvIn, f.space, None));
                let s = spaces.open(a.out_channels);
                sites.push((i, ParamRole::ConvOut, s, None));
                Flow {
                    space: s,
                    expansion: None,
                }
            }
            LayerKind::Linear(a) => {
                let f = input_flow(0)?;
                sites.push((i, ParamRole::LinearIn, f.space, f.expansion));
                let s = spaces.open(a.out_features);
                sites.push((i, ParamRole::LinearOut, s, None));
                Flow {
                    space: s,
                    expansion: None,
                }
            }
            LayerKind::BatchNorm2d(_) => {
                let f = input_flow(0)?;
                sites.push((i, ParamRole::NormScaleShift, f.space, None));
                f
            }
            LayerKind::Relu
            | LayerKind::MaxPool2d(_)
            | LayerKind::AvgPool2d(_)
            | LayerKind::SoftmaxCeLoss
            | LayerKind::Output => input_flow(0)?,
            LayerKind::GlobalAvgPool => Flow {
                space: input_flow(0)?.space,
                expansion: None,
            },
            LayerKind::Flatten => {
                let f = input_flow(0)?;
                match info.input_shape(i) {
                    &[_, h, w] => Flow {
                        space: f.space,
                        expansion: if h * w == 1 { None } else { Some([h, w]) },
                    },
                    _ => f,
                }
            }
            LayerKind::Add => {
                let (a, b) = (input_flow(0)?, input_flow(1)?);
                if a.expansion != b.expansion {
                    return Err(Error::shape(&node.id, "add operands have different channel layouts"));
                }
                let (ra, rb) = (spaces.find(a.space), spaces.find(b.space));
                if spaces.width[ra] != spaces.width[rb] {
                    return Err(Error::shape(&node.id, "add operands have different channel counts"));
                }
                spaces.union(a.space, b.space);
                a
            }
        };
        flows[i] = Some(flow);
    }
    if m.emits_logits(info) {
        if let Some(f) = flows[info.output] {
            pinned.push(f.space);
        }
    }

    let pinned_roots: BTreeSet<usize> = pinned.iter().map(|&s| spaces.find(s)).collect();
    let mut by_root: Vec<(usize, Vec<GroupMember>)> = Vec::new();
    let expected_sites: usize = m.nodes.values().map(|nd| ParamRole::roles_of(&nd.kind).len()).sum();
    if sites.len() != expected_sites {
        return Err(Error::Grouping(format!(
            "{} prunable sites but {} were grouped",
            expected_sites,
            sites.len()
        )));
    }
    // Sites were recorded in topological order, which fixes member order.
    for (node, role, space, expansion) in sites {
        let root = spaces.find(space);
        let member = GroupMember {
            layer: m.nodes[node].id.clone(),
            role,
            expansion,
        };
        match by_root.iter_mut().find(|(r, _)| *r == root) {
            Some((_, members)) => members.push(member),
            None => by_root.push((root, vec![member])),
        }
    }
    by_root.sort_by_key(|(r, _)| *r);

    let groups = by_root
        .into_iter()
        .enumerate()
        .map(|(id, (root, members))| PruneGroup {
            id,
            width: spaces.width[root],
            members,
            protected_floor: 1,
            unprunable: pinned_roots.contains(&root),
        })
        .collect::<Vec<_>>();

    for g in &groups {
        for mem in &g.members {
            let layer = &m.nodes[mem.layer.as_str()];
            let extent = mem.role.extent(layer).expect("site role matches kind");
            if extent != g.width * mem.block() {
                return Err(Error::Grouping(format!(
                    "group {}: `{}` {:?} extent {extent} != width {} x block {}",
                    g.id,
                    mem.layer,
                    mem.role,
                    g.width,
                    mem.block()
                )));
            }
        }
    }
    Ok(groups)
}

/// Keep lists for every member after removing `removed` group indices.
pub fn group_prunable_mask(
    g: &PruneGroup,
    removed: &BTreeSet<usize>,
) -> Result<Vec<(GroupMember, Vec<usize>)>> {
    if let Some(&bad) = removed.iter().find(|&&k| k >= g.width) {
        return Err(Error::IndexSet(format!(
            "index {bad} out of range for group {} (width {})",
            g.id, g.width
        )));
    }
    let floor = g.protected_floor.max(1);
    let remaining = g.width - removed.len();
    if remaining < floor {
        return Err(Error::IndexSet(format!(
            "group {} would keep {remaining} of {} indices, below its floor of {floor}",
            g.id, g.width
        )));
    }
    let kept: Vec<usize> = (0..g.width).filter(|k| !removed.contains(k)).collect();
    Ok(g.members
        .iter()
        .map(|mem| {
            let s = mem.block();
            let keep = kept.iter().flat_map(|&k| k * s..(k + 1) * s).collect();
            (mem.clone(), keep)
        })
        .collect())
}

/// Removes `removed` indices from every member of `g`. Does not revalidate.
pub fn remove_from_group(m: &ModelGraph, g: &PruneGroup, removed: &BTreeSet<usize>) -> Result<ModelGraph> {
    let mut out = m.clone();
    if removed.is_empty() {
        return Ok(out);
    }
    for (mem, keep) in group_prunable_mask(g, removed)? {
        let layer = out
            .node(&mem.layer)
            .ok_or_else(|| Error::Grouping(format!("member `{}` not in graph", mem.layer)))?;
        let sliced = slice_param(layer, mem.role, &keep)?;
        out.replace_node(sliced);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;
    use ParamRole::*;

    fn members(g: &PruneGroup) -> Vec<(&str, ParamRole)> {
        g.members.iter().map(|m| (m.layer.as_str(), m.role)).collect()
    }

    #[test]
    fn single_conv_has_two_groups() {
        let gs = build_groups(&zoo::single_conv(0)).unwrap();
        assert_eq!(gs.len(), 2);
        assert_eq!(members(&gs[0]), vec![("conv", ConvIn)]);
        assert!(gs[0].unprunable);
        assert_eq!(members(&gs[1]), vec![("conv", ConvOut)]);
        assert!(!gs[1].unprunable);
    }

    #[test]
    fn mask_expands_flattened_members() {
        let g = PruneGroup {
            id: 0,
            members: vec![
                GroupMember {
                    layer: "conv".into(),
                    role: ConvOut,
                    expansion: None,
                },
                GroupMember {
                    layer: "fc".into(),
                    role: LinearIn,
                    expansion: Some([2, 2]),
                },
            ],
            width: 4,
            protected_floor: 1,
            unprunable: false,
        };
        let masks = group_prunable_mask(&g, &BTreeSet::from([1])).unwrap();
        assert_eq!(masks[0].1, vec![0, 2, 3]);
        let expect: Vec<usize> = (0..4).chain(8..16).collect();
        assert_eq!(masks[1].1, expect);

        let full = group_prunable_mask(&g, &BTreeSet::new()).unwrap();
        assert_eq!(full[0].1, vec![0, 1, 2, 3]);
        assert_eq!(full[1].1, (0..16).collect::<Vec<_>>());

        let mut floored = g.clone();
        floored.protected_floor = 2;
        assert!(group_prunable_mask(&floored, &BTreeSet::from([0, 1, 2])).is_err());
        assert!(group_prunable_mask(&g, &BTreeSet::from([4])).is_err());
    }

    #[test]
    fn grouping_is_deterministic() {
        for m in zoo::corpus(5) {
            assert_eq!(build_groups(&m).unwrap(), build_groups(&m).unwrap());
        }
    }
}
