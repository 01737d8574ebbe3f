//! Iterative FLOPs-targeted pruning.
//!
//! Each step rescores the current model, removes a fixed quantum of
//! channel indices chosen by the scheme, and rebuilds the groups. The loop
//! stops at the first step whose FLOPs fall to or below the budget.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::CalibrationBatch;
use crate::flops::{flops_budget, model_cost};
use crate::group::{build_groups, remove_from_group, PruneGroup};
use crate::importance::{score_groups, CriterionSpec, ImportanceScores};
use crate::model::ModelGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Local,
    Global,
    ProtectedGlobal,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Local => "local",
            Scheme::Global => "global",
            Scheme::ProtectedGlobal => "protected_global",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Scheme::Local, Scheme::Global, Scheme::ProtectedGlobal]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub speedup: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// Fraction of each group's original width that protected_global keeps.
    #[serde(default = "default_protection")]
    pub protection: f64,
    pub criterion: CriterionSpec,
}

fn default_steps() -> usize {
    400
}
fn default_scheme() -> Scheme {
    Scheme::ProtectedGlobal
}
fn default_protection() -> f64 {
    0.10
}

impl PruneConfig {
    pub fn new(speedup: f64, criterion: CriterionSpec) -> Self {
        PruneConfig {
            speedup,
            steps: default_steps(),
            scheme: default_scheme(),
            protection: default_protection(),
            criterion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.speedup >= 1.0 && self.speedup.is_finite()) {
            return Err(Error::Config(format!("speedup must be >= 1, got {}", self.speedup)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.protection) {
            return Err(Error::Config(format!("protection must be in [0,1), got {}", self.protection)));
        }
        Ok(())
    }

    /// Minimum surviving indices for a group of `original_width`.
    pub fn floor(&self, original_width: usize) -> usize {
        match self.scheme {
            Scheme::ProtectedGlobal => ((self.protection * original_width as f64).ceil() as usize).max(1),
            Scheme::Global | Scheme::Local => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrunePlan {
    /// `(group id, index)` removals in selection order.
    pub actions: Vec<(usize, usize)>,
    /// FLOPs after applying the plan, once known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops_after: Option<u64>,
}

impl PrunePlan {
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn by_group(&self) -> BTreeMap<usize, BTreeSet<usize>> {
        let mut out: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for &(g, k) in &self.actions {
            out.entry(g).or_default().insert(k);
        }
        out
    }
}

/// Chooses one step's removals. Each group's `protected_floor` bounds how
/// many of its indices may go; unprunable groups are never touched.
pub fn plan_step(groups: &[PruneGroup], scores: &[ImportanceScores], scheme: Scheme, quantum: usize) -> Result<PrunePlan> {
    let by_id: BTreeMap<usize, &PruneGroup> = groups.iter().map(|g| (g.id, g)).collect();
    let mut scored = Vec::new();
    for s in scores {
        let g = by_id
            .get(&s.group)
            .ok_or_else(|| Error::Config(format!("scores for unknown group {}", s.group)))?;
        if g.unprunable {
            continue;
        }
        if s.values.len() != g.width {
            return Err(Error::Config(format!(
                "group {}: {} scores for width {}",
                g.id,
                s.values.len(),
                g.width
            )));
        }
        scored.push((*g, &s.values));
    }
    let budget = |g: &PruneGroup| g.width.saturating_sub(g.protected_floor.max(1));
    let mut actions = Vec::new();
    match scheme {
        Scheme::Global | Scheme::ProtectedGlobal => {
            let mut cands: Vec<(f64, usize, usize)> = scored
                .iter()
                .flat_map(|(g, v)| v.iter().enumerate().map(move |(k, &s)| (s, g.id, k)))
                .collect();
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
            for (_, gid, k) in cands {
                if actions.len() == quantum {
                    break;
                }
                let t = taken.entry(gid).or_default();
                if *t < budget(by_id[&gid]) {
                    *t += 1;
                    actions.push((gid, k));
                }
            }
        }
        Scheme::Local => {
            let total: usize = scored.iter().map(|(g, _)| g.width).sum();
            for (g, v) in &scored {
                let share = (quantum * g.width).div_ceil(total.max(1));
                let n = share.min(budget(g));
                let mut idx: Vec<usize> = (0..g.width).collect();
                idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
                actions.extend(idx.into_iter().take(n).map(|k| (g.id, k)));
            }
        }
    }
    Ok(PrunePlan {
        actions,
        flops_after: None,
    })
}

/// Physically removes the planned indices from every member of each group.
pub fn apply_plan(m: &ModelGraph, groups: &[PruneGroup], plan: &PrunePlan) -> Result<ModelGraph> {
    let mut out = m.clone();
    for (gid, removed) in plan.by_group() {
        let g = groups
            .iter()
            .find(|g| g.id == gid)
            .ok_or_else(|| Error::Config(format!("plan names unknown group {gid}")))?;
        if g.unprunable {
            return Err(Error::IndexSet(format!("group {gid} is unprunable")));
        }
        out = remove_from_group(&out, g, &removed)?;
    }
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub removed: usize,
    pub flops: u64,
    pub params: u64,
    /// Scoring plus removal wall time, seconds.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneTelemetry {
    pub original_flops: u64,
    pub original_params: u64,
    pub budget: u64,
    pub quantum: usize,
    pub achieved_flops: u64,
    pub achieved_params: u64,
    pub steps: Vec<StepRecord>,
}

impl PruneTelemetry {
    pub fn flops_ratio(&self) -> f64 {
        self.achieved_flops as f64 / self.original_flops.max(1) as f64
    }

    pub fn params_ratio(&self) -> f64 {
        self.achieved_params as f64 / self.original_params.max(1) as f64
    }

    /// Mean wall time per pruning step, seconds (0 when no step ran).
    pub fn step_time(&self) -> f64 {
        if self.steps.is_empty() {
            0.0
        } else {
            self.steps.iter().map(|s| s.seconds).sum::<f64>() / self.steps.len() as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub model: ModelGraph,
    pub telemetry: PruneTelemetry,
    /// Group widths before and after, by group id.
    pub widths: Vec<(usize, usize, usize)>,
}

/// Prunes until FLOPs ≤ `original / speedup`.
pub fn prune_to_target(m: &ModelGraph, cfg: &PruneConfig, calib: Option<&CalibrationBatch>) -> Result<PruneOutcome> {
    cfg.validate()?;
    let orig = model_cost(m)?;
    let budget = flops_budget(&orig, cfg.speedup)?;
    let groups0 = build_groups(m)?;
    let floors: BTreeMap<usize, usize> = groups0.iter().map(|g| (g.id, cfg.floor(g.width))).collect();
    let prunable_width: usize = groups0.iter().filter(|g| g.prunable()).map(|g| g.width).sum();
    let quantum = prunable_width.div_ceil(cfg.steps).max(1);
    let signature = |gs: &[PruneGroup]| -> Vec<_> {
        gs.iter()
            .map(|g| (g.id, g.unprunable, g.members.iter().map(|m| (m.layer.clone(), m.role)).collect::<Vec<_>>()))
            .collect()
    };
    let sig0 = signature(&groups0);

    let mut cur = m.clone();
    let mut cost = orig.clone();
    let mut steps = Vec::new();
    let mut groups = groups0.clone();
    while cost.total_flops > budget {
        let t0 = Instant::now();
        for g in &mut groups {
            g.protected_floor = floors[&g.id];
        }
        let scores = score_groups(&cur, &groups, &cfg.criterion, calib)?;
        let plan = plan_step(&groups, &scores, cfg.scheme, quantum)?;
        if plan.is_empty() {
            let binding: Vec<String> = groups
                .iter()
                .filter(|g| g.prunable())
                .map(|g| format!("group {} ({}, width {}, floor {})", g.id, g.members[0].layer, g.width, g.protected_floor))
                .collect();
            return Err(Error::Infeasible(format!(
                "infeasible target: {} FLOPs remain above budget {budget} but every prunable group is at its floor: {}",
                cost.total_flops,
                binding.join(", ")
            )));
        }
        cur = apply_plan(&cur, &groups, &plan)?;
        cost = model_cost(&cur)?;
        groups = build_groups(&cur)?;
        if signature(&groups) != sig0 {
            return Err(Error::Grouping("group structure changed during pruning".into()));
        }
        steps.push(StepRecord {
            step: steps.len(),
            removed: plan.actions.len(),
            flops: cost.total_flops,
            params: cost.total_params,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let widths = groups0
        .iter()
        .zip(&groups)
        .map(|(a, b)| (a.id, a.width, b.width))
        .collect();
    Ok(PruneOutcome {
        model: cur,
        telemetry: PruneTelemetry {
            original_flops: orig.total_flops,
            original_params: orig.total_params,
            budget,
            quantum,
            achieved_flops: cost.total_flops,
            achieved_params: cost.total_params,
            steps,
        },
        widths,
    })
}
