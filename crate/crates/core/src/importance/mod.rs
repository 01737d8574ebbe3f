//! Importance criteria and their aggregation into per-group scores `I(g)`.
//!
//! Each criterion reads one kind of layer member: filter-wise criteria read
//! output roles, `bnscale` reads batchnorm scales, and the activation-based
//! criteria read feature maps (`hrank`: the producer's post-activation map,
//! `thinet`: each consumer's input). The per-layer vectors of a group are
//! normalized and averaged elementwise.

pub mod criteria;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{CalibrationBatch, ExecutionRecord, Executor, Gradients, Mode};
use crate::group::PruneGroup;
use crate::model::{GraphInfo, LayerKind, ModelGraph, ParamRole};
use crate::tensor::Tensor;

pub use criteria::{
    bnscale_score, fpgm_score, hrank_score, lamp_score, magnitude_score, matrix_rank, obd_hessian_score,
    random_score, taylor_score, thinet_conv_score, thinet_linear_score,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    MagnitudeL1,
    MagnitudeL2,
    Lamp,
    Fpgm,
    Bnscale,
    Random,
    Taylor,
    ObdHessian,
    Hrank,
    Thinet,
}

impl Criterion {
    pub const ALL: [Criterion; 10] = [
        Criterion::MagnitudeL1,
        Criterion::MagnitudeL2,
        Criterion::Lamp,
        Criterion::Fpgm,
        Criterion::Bnscale,
        Criterion::Random,
        Criterion::Taylor,
        Criterion::ObdHessian,
        Criterion::Hrank,
        Criterion::Thinet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::MagnitudeL1 => "magnitude_l1",
            Criterion::MagnitudeL2 => "magnitude_l2",
            Criterion::Lamp => "lamp",
            Criterion::Fpgm => "fpgm",
            Criterion::Bnscale => "bnscale",
            Criterion::Random => "random",
            Criterion::Taylor => "taylor",
            Criterion::ObdHessian => "obd_hessian",
            Criterion::Hrank => "hrank",
            Criterion::Thinet => "thinet",
        }
    }

    /// Needs a calibration batch.
    pub fn data_driven(self) -> bool {
        matches!(
            self,
            Criterion::Taylor | Criterion::ObdHessian | Criterion::Hrank | Criterion::Thinet
        )
    }

    pub fn data_free(self) -> bool {
        !self.data_driven()
    }

    /// Results depend on the seed (either directly or through the sampled
    /// calibration batch); marked with an asterisk in leaderboards.
    pub fn stochastic(self) -> bool {
        self == Criterion::Random || self.data_driven()
    }

    /// Member roles whose parameters or activations the criterion reads.
    pub fn roles(self) -> &'static [ParamRole] {
        use ParamRole::*;
        match self {
            Criterion::Bnscale => &[NormScaleShift],
            Criterion::Random => &[],
            Criterion::Thinet => &[ConvIn, LinearIn],
            _ => &[ConvOut, LinearOut],
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown criterion `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    #[default]
    Max,
    Mean,
    /// z-score, shifted so the smallest entry is 0.
    Gaussian,
}

impl FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "max" => Ok(Normalization::Max),
            "mean" => Ok(Normalization::Mean),
            "gaussian" => Ok(Normalization::Gaussian),
            _ => Err(Error::Config(format!("unknown normalization `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionSpec {
    pub name: Criterion,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub seed: u64,
}

impl CriterionSpec {
    pub fn new(name: Criterion) -> Self {
        CriterionSpec {
            name,
            normalization: Normalization::default(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_normalization(mut self, n: Normalization) -> Self {
        self.normalization = n;
        self
    }

    /// Rejects criteria that cannot score some prunable group of `groups`.
    pub fn check_groups(&self, groups: &[PruneGroup]) -> Result<()> {
        if self.name == Criterion::Bnscale {
            if let Some(g) = groups
                .iter()
                .find(|g| g.prunable() && !g.has_role(|r| r == ParamRole::NormScaleShift))
            {
                return Err(Error::Config(format!(
                    "bnscale needs a batchnorm in every prunable group; group {} ({}) has none",
                    g.id,
                    g.members.first().map_or("", |m| m.layer.as_str())
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub group: usize,
    pub values: Vec<f64>,
}

fn normalize(v: &[f64], mode: Normalization) -> Vec<f64> {
    let n = v.len() as f64;
    let scaled = |d: f64| -> Vec<f64> {
        if d > 0.0 {
            v.iter().map(|x| x / d).collect()
        } else {
            vec![0.0; v.len()]
        }
    };
    match mode {
        Normalization::None => v.to_vec(),
        Normalization::Max => scaled(v.iter().cloned().fold(0.0, f64::max)),
        Normalization::Mean => scaled(v.iter().sum::<f64>() / n),
        Normalization::Gaussian => {
            let mu = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n).sqrt();
            if sd == 0.0 {
                return vec![0.0; v.len()];
            }
            let z: Vec<f64> = v.iter().map(|x| (x - mu) / sd).collect();
            let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
            z.iter().map(|x| x - lo).collect()
        }
    }
}

/// Normalizes each per-layer vector and averages them elementwise.
pub fn aggregate_group(layers: &[Vec<f64>], normalization: Normalization) -> Result<Vec<f64>> {
    let Some(first) = layers.first() else {
        return Err(Error::Config("no per-layer scores to aggregate".into()));
    };
    let width = first.len();
    if let Some(bad) = layers.iter().find(|l| l.len() != width) {
        return Err(Error::Config(format!(
            "per-layer score lengths differ: {width} vs {}",
            bad.len()
        )));
    }
    let mut out = vec![0.0; width];
    for l in layers {
        for (o, v) in out.iter_mut().zip(normalize(l, normalization)) {
            *o += v;
        }
    }
    let n = layers.len() as f64;
    Ok(out.into_iter().map(|v| v / n).collect())
}

/// Sums each consecutive `block` of entries (expanded members back to channels).
pub fn reduce_expansion(v: &[f64], block: usize) -> Vec<f64> {
    v.chunks(block).map(|c| c.iter().sum()).collect()
}

/// Data recorded once per scoring pass.
struct Recorded {
    record: ExecutionRecord,
    grads: Option<Gradients>,
}

fn record_for(m: &ModelGraph, crit: Criterion, calib: &CalibrationBatch) -> Result<Recorded> {
    let ex = Executor::<f32>::new(m)?;
    let x = calib.inputs().data();
    let y = calib.labels();
    Ok(match crit {
        Criterion::Taylor | Criterion::ObdHessian => {
            let (record, grads) = ex.gradients(x, y, Mode::Eval, crit == Criterion::ObdHessian)?;
            Recorded {
                record,
                grads: Some(grads),
            }
        }
        _ => Recorded {
            record: ex.forward(x, y, Mode::Eval)?,
            grads: None,
        },
    })
}

/// The node whose output is the post-activation feature map of `producer`:
/// follows single-successor batchnorm/relu chains.
fn feature_node(m: &ModelGraph, info: &GraphInfo, producer: usize) -> usize {
    let mut cur = producer;
    loop {
        match info.succs[cur].as_slice() {
            [(next, _)] if matches!(m.nodes[*next].kind, LayerKind::BatchNorm2d(_) | LayerKind::Relu) => cur = *next,
            _ => return cur,
        }
    }
}

/// Scores every prunable group of `m` (ascending group id).
pub fn score_groups(
    m: &ModelGraph,
    groups: &[PruneGroup],
    spec: &CriterionSpec,
    calib: Option<&CalibrationBatch>,
) -> Result<Vec<ImportanceScores>> {
    spec.check_groups(groups)?;
    let crit = spec.name;
    let recorded = if crit.data_driven() {
        let calib = calib.ok_or_else(|| Error::Config(format!("criterion `{crit}` needs a calibration batch")))?;
        Some(record_for(m, crit, calib)?)
    } else {
        None
    };
    let info = m.analyze()?;
    let mut out = Vec::new();
    for g in groups.iter().filter(|g| g.prunable()) {
        let layers = group_layer_scores(m, &info, g, spec, recorded.as_ref())?;
        let values = aggregate_group(&layers, spec.normalization)?;
        if values.len() != g.width || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numerical(format!(
                "criterion `{crit}` produced invalid scores for group {}",
                g.id
            )));
        }
        out.push(ImportanceScores { group: g.id, values });
    }
    Ok(out)
}

fn group_layer_scores(
    m: &ModelGraph,
    info: &GraphInfo,
    g: &PruneGroup,
    spec: &CriterionSpec,
    rec: Option<&Recorded>,
) -> Result<Vec<Vec<f64>>> {
    let crit = spec.name;
    if crit == Criterion::Random {
        return Ok(vec![random_score(g.width, spec.seed, g.id)]);
    }
    let mut layers = Vec::new();
    for mem in g.members.iter().filter(|mm| crit.roles().contains(&mm.role)) {
        let node = &m.nodes[mem.layer.as_str()];
        let param = |name: &str| -> Result<&Tensor> {
            node.param(name)
                .ok_or_else(|| Error::node(&node.id, format!("missing parameter `{name}`")))
        };
        let axis = mem.role.weight_axis();
        let grad = |r: &Recorded| -> Result<Tensor> {
            r.grads
                .as_ref()
                .and_then(|gr| gr.batch.get(&mem.layer, "weight"))
                .map(|b| b.to_tensor())
                .ok_or_else(|| Error::Config(format!("missing gradient for `{}`", mem.layer)))
        };
        let v = match crit {
            Criterion::MagnitudeL1 => magnitude_score(param("weight")?, axis, 1),
            Criterion::MagnitudeL2 => magnitude_score(param("weight")?, axis, 2),
            Criterion::Lamp => lamp_score(param("weight")?, axis),
            Criterion::Fpgm => fpgm_score(param("weight")?, axis),
            Criterion::Bnscale => bnscale_score(param("gamma")?),
            Criterion::Taylor => taylor_score(param("weight")?, &grad(rec.expect("recorded"))?, axis)?,
            Criterion::ObdHessian => {
                let r = rec.expect("recorded");
                let per: Vec<Tensor> = r
                    .grads
                    .as_ref()
                    .and_then(|gr| gr.per_sample.as_ref())
                    .ok_or_else(|| Error::Config("missing per-sample gradients".into()))?
                    .iter()
                    .map(|t| t.get(&mem.layer, "weight").expect("per-sample layout").to_tensor())
                    .collect();
                obd_hessian_score(param("weight")?, &per, axis)?
            }
            Criterion::Hrank => {
                let idx = m.index_of(&mem.layer).expect("member in graph");
                let feat = &m.nodes[feature_node(m, info, idx)].id;
                let (shape, act) = rec.expect("recorded").record.activation(feat).expect("activation recorded");
                hrank_score(act, &shape)
                    .map_err(|e| Error::Config(format!("group {} (`{}`): {e}", g.id, mem.layer)))?
            }
            Criterion::Thinet => {
                let idx = m.index_of(&mem.layer).expect("member in graph");
                let src = &m.nodes[info.preds[idx][0]].id;
                let (shape, act) = rec.expect("recorded").record.activation(src).expect("activation recorded");
                match &node.kind {
                    LayerKind::Conv2d(a) => thinet_conv_score(act, &shape, param("weight")?, a.stride, a.padding)?,
                    _ => thinet_linear_score(act, shape[0], param("weight")?, mem.block())?,
                }
            }
            Criterion::Random => unreachable!(),
        };
        // Filter-wise reads of expanded members come back per feature; fold them.
        let v = if v.len() == g.width * mem.block() && mem.block() > 1 {
            reduce_expansion(&v, mem.block())
        } else {
            v
        };
        layers.push(v);
    }
    if layers.is_empty() {
        return Err(Error::Config(format!(
            "criterion `{crit}` found no {:?} member in group {}",
            crit.roles(),
            g.id
        )));
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::build_groups;
    use crate::zoo;

    #[test]
    fn aggregate_examples() {
        let single = vec![vec![0.3, 1.7, 0.0]];
        assert_eq!(aggregate_group(&single, Normalization::None).unwrap(), single[0]);
        let two = vec![vec![1.0, 3.0], vec![2.0, 2.0]];
        let got = aggregate_group(&two, Normalization::Max).unwrap();
        assert!((got[0] - 2.0 / 3.0).abs() < 1e-15 && got[1] == 1.0);
        for mode in [Normalization::None, Normalization::Max, Normalization::Mean, Normalization::Gaussian] {
            let eq = aggregate_group(&[vec![2.0; 4], vec![5.0; 4]], mode).unwrap();
            assert!(eq.windows(2).all(|p| p[0] == p[1]), "{mode:?}: {eq:?}");
        }
        assert!(aggregate_group(&[vec![1.0], vec![1.0, 2.0]], Normalization::Max).is_err());
        let gz = normalize(&[1.0, 2.0, 3.0], Normalization::Gaussian);
        assert_eq!(gz[0], 0.0);
        assert!(gz.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn every_criterion_scores_every_desk_group() {
        let m = zoo::desk_cnn(1);
        let groups = build_groups(&m).unwrap();
        let (train, _) = zoo::desk_data(0);
        let calib = train.calibration(4, 0).unwrap();
        for crit in Criterion::ALL {
            let s = score_groups(&m, &groups, &CriterionSpec::new(crit), Some(&calib)).unwrap();
            let prunable: Vec<_> = groups.iter().filter(|g| g.prunable()).collect();
            assert_eq!(s.len(), prunable.len(), "{crit}");
            for (sc, g) in s.iter().zip(prunable) {
                assert_eq!(sc.group, g.id);
                assert_eq!(sc.values.len(), g.width);
            }
        }
    }

    #[test]
    fn bnscale_needs_batchnorm_and_data_criteria_need_a_batch() {
        let m = zoo::vgg_cnn(0);
        let groups = build_groups(&m).unwrap();
        assert!(matches!(
            score_groups(&m, &groups, &CriterionSpec::new(Criterion::Bnscale), None),
            Err(Error::Config(_))
        ));
        assert!(score_groups(&m, &groups, &CriterionSpec::new(Criterion::Taylor), None).is_err());
    }

    #[test]
    fn criterion_names_round_trip() {
        for c in Criterion::ALL {
            assert_eq!(c.name().parse::<Criterion>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{}\"", c.name()));
        }
        assert!("attention".parse::<Criterion>().is_err());
    }
}
