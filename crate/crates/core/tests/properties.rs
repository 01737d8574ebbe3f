use std::collections::BTreeSet;

use groupprune::bench::{rank_rows, LeaderboardRow};
use groupprune::flops::{flops_budget, model_cost};
use groupprune::group::{build_groups, GroupMember, PruneGroup};
use groupprune::importance::{aggregate_group, Criterion, CriterionSpec, ImportanceScores, Normalization};
use groupprune::model::slice_param;
use groupprune::sched::{plan_step, prune_to_target, PruneConfig, Scheme};
use groupprune::{load_model, save_model, zoo, LayerKind, ParamRole};
use proptest::prelude::*;

fn sites(m: &groupprune::ModelGraph) -> BTreeSet<(String, ParamRole)> {
    let mut out = BTreeSet::new();
    for node in m.nodes.values() {
        let roles: &[ParamRole] = match node.kind {
            LayerKind::Conv2d(_) => &[ParamRole::ConvOut, ParamRole::ConvIn],
            LayerKind::Linear(_) => &[ParamRole::LinearOut, ParamRole::LinearIn],
            LayerKind::BatchNorm2d(_) => &[ParamRole::NormScaleShift],
            _ => &[],
        };
        for &r in roles {
            out.insert((node.id.clone(), r));
        }
    }
    out
}

#[test]
fn groups_partition_every_prunable_site() {
    for m in zoo::corpus(0) {
        let groups = build_groups(&m).unwrap();
        let members: Vec<(String, ParamRole)> = groups
            .iter()
            .flat_map(|g| g.members.iter().map(|x| (x.layer.clone(), x.role)))
            .collect();
        let unique: BTreeSet<_> = members.iter().cloned().collect();
        assert_eq!(unique.len(), members.len(), "{}: duplicate member", m.name);
        assert_eq!(unique, sites(&m), "{}", m.name);
        for g in &groups {
            for mem in &g.members {
                let extent = mem.role.extent(m.node(&mem.layer).unwrap()).unwrap();
                assert_eq!(extent, g.width * mem.block(), "{} {}", m.name, mem.layer);
            }
        }
    }
}

fn conv_layer(o: usize, c: usize, seed: u64) -> groupprune::LayerNode {
    let mut b = groupprune::model::GraphBuilder::new("s", [c, 4, 4], 2, seed);
    b.conv("conv", "input", o, 3, 1, 1, true);
    b.gap("gap", "conv");
    b.linear("fc", "gap", 2, true);
    b.finish("fc").unwrap().node("conv").unwrap().clone()
}

fn subset(n: usize) -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::btree_set(0..n, 1..=n).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slicing_composes(seed in 0u64..1000, keep1 in subset(8), pick in proptest::collection::vec(any::<prop::sample::Index>(), 1..8)) {
        let layer = conv_layer(8, 3, seed);
        let once = slice_param(&layer, ParamRole::ConvOut, &keep1).unwrap();
        let mut keep2: Vec<usize> = pick.iter().map(|i| i.index(keep1.len())).collect();
        keep2.sort();
        keep2.dedup();
        let twice = slice_param(&once, ParamRole::ConvOut, &keep2).unwrap();
        let composed: Vec<usize> = keep2.iter().map(|&k| keep1[k]).collect();
        prop_assert_eq!(twice, slice_param(&layer, ParamRole::ConvOut, &composed).unwrap());
    }

    #[test]
    fn save_load_round_trips(seed in 0u64..10_000, which in 0usize..7) {
        let m = zoo::corpus(seed).swap_remove(which);
        let dir = tempfile::tempdir().unwrap();
        save_model(&m, dir.path()).unwrap();
        prop_assert_eq!(load_model(dir.path()).unwrap(), m);
    }

    #[test]
    fn normalizations_are_nonnegative_and_scaled(v in proptest::collection::vec(0.0f64..100.0, 1..20)) {
        let max = aggregate_group(std::slice::from_ref(&v), Normalization::Max).unwrap();
        let peak = max.iter().cloned().fold(0.0, f64::max);
        prop_assert!(peak == 0.0 || (peak - 1.0).abs() < 1e-12);
        let mean = aggregate_group(std::slice::from_ref(&v), Normalization::Mean).unwrap();
        let avg = mean.iter().sum::<f64>() / mean.len() as f64;
        prop_assert!(avg == 0.0 || (avg - 1.0).abs() < 1e-9);
        let gauss = aggregate_group(std::slice::from_ref(&v), Normalization::Gaussian).unwrap();
        let lo = gauss.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(lo.abs() < 1e-12);
        for out in [&max, &mean, &gauss] {
            prop_assert!(out.iter().all(|x| *x >= 0.0));
            // Every normalization preserves the ordering of indices.
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] < v[j] {
                        prop_assert!(out[i] <= out[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn plans_respect_floors_and_quantum(
        widths in proptest::collection::vec(1usize..12, 1..5),
        floors in proptest::collection::vec(1usize..4, 5),
        quantum in 1usize..20,
        scheme in prop_oneof![Just(Scheme::Local), Just(Scheme::Global), Just(Scheme::ProtectedGlobal)],
        seed in 0u64..1000,
    ) {
        let groups: Vec<PruneGroup> = widths.iter().enumerate().map(|(id, &w)| PruneGroup {
            id,
            members: vec![GroupMember { layer: format!("l{id}"), role: ParamRole::ConvOut, expansion: None }],
            width: w,
            protected_floor: floors[id],
            unprunable: false,
        }).collect();
        let scores: Vec<ImportanceScores> = groups.iter().map(|g| ImportanceScores {
            group: g.id,
            values: groupprune::importance::criteria::random_score(g.width, seed, g.id),
        }).collect();
        let plan = plan_step(&groups, &scores, scheme, quantum).unwrap();
        let by_group = plan.by_group();
        prop_assert_eq!(by_group.values().map(|s| s.len()).sum::<usize>(), plan.actions.len());
        for g in &groups {
            let removed = by_group.get(&g.id).map_or(0, |s| s.len());
            prop_assert!(removed == 0 || g.width - removed >= g.protected_floor.max(1));
        }
        if scheme != Scheme::Local {
            prop_assert!(plan.actions.len() <= quantum);
            // Every index left behind in a group with spare capacity scores at
            // least as high as every removed index.
            let worst_removed = plan.actions.iter().map(|&(g, k)| scores[g].values[k]).fold(f64::MIN, f64::max);
            for g in &groups {
                let removed = by_group.get(&g.id).cloned().unwrap_or_default();
                if g.width - removed.len() > g.protected_floor.max(1) && plan.actions.len() == quantum {
                    for k in (0..g.width).filter(|k| !removed.contains(k)) {
                        prop_assert!(scores[g.id].values[k] >= worst_removed);
                    }
                }
            }
        }
    }

    #[test]
    fn pruning_meets_target_without_stopping_early(
        which in 0usize..7,
        speedup in 1.0f64..3.0,
        steps in 5usize..60,
        scheme in prop_oneof![Just(Scheme::Local), Just(Scheme::Global), Just(Scheme::ProtectedGlobal)],
        criterion in prop_oneof![Just(Criterion::MagnitudeL1), Just(Criterion::Fpgm), Just(Criterion::Random)],
    ) {
        let m = zoo::corpus(1).swap_remove(which);
        let mut cfg = PruneConfig::new(speedup, CriterionSpec::new(criterion));
        cfg.steps = steps;
        cfg.scheme = scheme;
        let budget = flops_budget(&model_cost(&m).unwrap(), speedup).unwrap();
        match prune_to_target(&m, &cfg, None) {
            Ok(out) => {
                let t = &out.telemetry;
                prop_assert!(t.achieved_flops <= budget);
                let traj: Vec<u64> = std::iter::once(t.original_flops).chain(t.steps.iter().map(|s| s.flops)).collect();
                prop_assert!(traj.windows(2).all(|w| w[1] <= w[0]));
                if traj.len() >= 2 {
                    prop_assert!(traj[traj.len() - 2] > budget);
                }
                out.model.validate().unwrap();
                for &(_, before, after) in &out.widths {
                    prop_assert!(after >= cfg.floor(before).min(before));
                }
            }
            Err(groupprune::Error::Infeasible(_)) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn ranking_is_a_permutation_ordered_by_delta(deltas in proptest::collection::vec((-500i32..500, 1u64..5), 1..12)) {
        let mut rows: Vec<LeaderboardRow> = deltas.iter().enumerate().map(|(i, &(d, p))| LeaderboardRow {
            speedup: 2.0,
            importance: format!("m{i:02}"),
            regularizer: None,
            stochastic: false,
            rank: None,
            base: 90.0,
            pruned: 90.0 + d as f64 / 100.0,
            delta: d as f64 / 100.0,
            params: p,
            params_pct: 50.0,
            step_time: 0.0,
            reg_time: None,
            flops_pct: 50.0,
            seeds: vec![0],
            error: None,
        }).collect();
        rank_rows(&mut rows);
        let ranks: Vec<usize> = rows.iter().map(|r| r.rank.unwrap()).collect();
        prop_assert_eq!(ranks, (1..=rows.len()).collect::<Vec<_>>());
        for w in rows.windows(2) {
            prop_assert!(w[0].delta > w[1].delta || (w[0].delta == w[1].delta && (w[0].params, &w[0].importance) <= (w[1].params, &w[1].importance)));
        }
    }
}

#[test]
fn gaussian_normalization_example() {
    let out = aggregate_group(&[vec![1.0, 2.0, 3.0]], Normalization::Gaussian).unwrap();
    let sd = (2.0f64 / 3.0).sqrt();
    let want = [0.0, 1.0 / sd, 2.0 / sd];
    for (a, b) in out.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}
