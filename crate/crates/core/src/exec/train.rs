use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Executor, Mode, ParamTable};
use crate::error::{Error, Result};
use crate::model::ModelGraph;

/// Gradient transform applied after backward and before the optimizer step.
pub trait GradHook {
    fn adjust(&mut self, params: &ParamTable<f32>, grads: &mut ParamTable<f32>, epoch: usize) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs at which the learning rate is multiplied by `lr_factor`.
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 10,
            milestones: Vec::new(),
            lr_factor: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if self.nesterov && self.momentum == 0.0 {
            return bad("nesterov requires momentum > 0".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("lr factor must be in (0,1), got {}", self.lr_factor));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelGraph,
    pub history: Vec<EpochMetrics>,
}

fn argmax(row: &[f32]) -> usize {
    // Strict comparison keeps the lowest index on ties.
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mini-batch SGD. Data order is a seeded shuffle per epoch, so two runs with
/// the same config are bit-identical.
pub fn train(
    m: &ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    mut hook: Option<&mut dyn GradHook>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compat(m, data)?;
    let mut ex = Executor::<f32>::new(m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Option<ParamTable<f32>> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let k = m.num_classes;
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.gather(idx);
            let rec = ex.forward(&x, &y, Mode::Train).map_err(|e| diverged(e, epoch, step))?;
            loss_sum += rec.loss * idx.len() as f64;
            correct += rec
                .logits()
                .chunks(k)
                .zip(&y)
                .filter(|(row, &l)| argmax(row) == l as usize)
                .count();
            let mut grads = ex.backward(&rec)?;
            ex.update_running_stats(&rec);
            if let Some(h) = hook.as_deref_mut() {
                h.adjust(ex.params(), &mut grads, epoch)?;
            }
            if !grads.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged: non-finite gradient at epoch {epoch}, step {step}"
                )));
            }
            sgd_step(ex.params_mut(), &grads, &mut velocity, cfg, lr);
        }
        history.push(EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        model: ex.to_graph(),
        history,
    })
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("training diverged at epoch {epoch}, step {step}: {msg}")),
        other => other,
    }
}

/// SGD with momentum, optional nesterov and coupled weight decay:
/// `d = g + wd·w; v = μ·v + d; d = d + μ·v (nesterov) or v; w -= lr·d`.
/// The first step initialises `v = d`.
fn sgd_step(
    params: &mut ParamTable<f32>,
    grads: &ParamTable<f32>,
    velocity: &mut Option<ParamTable<f32>>,
    cfg: &TrainConfig,
    lr: f64,
) {
    let first = velocity.is_none();
    let vel = velocity.get_or_insert_with(|| grads.zeros_like());
    for (l, n, p) in params.iter_mut() {
        let g = &grads.get(l, n).expect("grad layout").data;
        let v = &mut vel.get_mut(l, n).expect("velocity layout").data;
        for ((w, &gi), vi) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
            let mut d = gi as f64 + cfg.weight_decay * *w as f64;
            if cfg.momentum > 0.0 {
                let buf = if first { d } else { cfg.momentum * *vi as f64 + d };
                *vi = buf as f32;
                d = if cfg.nesterov { d + cfg.momentum * buf } else { buf };
            }
            *w = (*w as f64 - lr * d) as f32;
        }
    }
}

fn check_compat(m: &ModelGraph, data: &Dataset) -> Result<()> {
    if data.sample_shape() != m.input_shape {
        return Err(Error::shape(
            "input",
            format!("dataset samples are {:?}, model expects {:?}", data.sample_shape(), m.input_shape),
        ));
    }
    if data.num_classes() != m.num_classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, model {}",
            data.num_classes(),
            m.num_classes
        )));
    }
    if data.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    Ok(())
}

/// Eval-mode top-1 predictions; ties go to the lowest class index.
pub fn predict(m: &ModelGraph, data: &Dataset) -> Result<Vec<u32>> {
    check_compat(m, data)?;
    let ex = Executor::<f32>::new(m)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(100) {
        let (x, y) = data.gather(chunk);
        let rec = ex.forward(&x, &y, Mode::Eval)?;
        out.extend(rec.logits().chunks(m.num_classes).map(|r| argmax(r) as u32));
    }
    Ok(out)
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(m: &ModelGraph, data: &Dataset) -> Result<f64> {
    let pred = predict(m, data)?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GraphBuilder;
    use crate::tensor::Tensor;
    use crate::zoo;

    fn separable(n: usize) -> Dataset {
        // Class is the sign of x0 + x1 with a margin.
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let a = ((i * 37) % 17) as f32 / 8.0 - 1.0;
            let b = ((i * 11) % 13) as f32 / 6.0 - 1.0;
            let label = (i % 2) as u32;
            let shift = if label == 1 { 1.0 } else { -1.0 };
            x.extend([a * 0.5 + shift, b * 0.5 + shift]);
            y.push(label);
        }
        Dataset::new(Tensor::new(vec![n, 2, 1, 1], x).unwrap(), y, 2).unwrap()
    }

    fn linear_model(seed: u64) -> ModelGraph {
        let mut b = GraphBuilder::new("lin", [2, 1, 1], 2, seed);
        b.flatten("flat", "input");
        b.linear("fc", "flat", 2, true);
        b.finish("fc").unwrap()
    }

    #[test]
    fn separable_toy_reaches_full_train_accuracy() {
        let d = separable(40);
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train(&linear_model(1), &d, &cfg, None).unwrap();
        assert_eq!(evaluate(&out.model, &d).unwrap(), 1.0);
        assert_eq!(out.history.len(), 200);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let m = zoo::chain_cnn(2);
        let d = zoo::prototype_dataset([3, 8, 8], 4, 16, 0.5, 1, 3);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(&m, &d, &cfg, None).unwrap();
        for (id, node) in &m.nodes {
            for (name, t) in &node.params {
                if !name.starts_with("running") {
                    assert_eq!(out.model.nodes[id].params[name], *t, "{id}.{name}");
                }
            }
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let m = zoo::vgg_cnn(5);
        let d = zoo::prototype_dataset([3, 8, 8], 4, 24, 0.5, 1, 8);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 5,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(&m, &d, &cfg, None).unwrap();
        let b = train(&m, &d, &cfg, None).unwrap();
        assert_eq!(a.model, b.model);
        let losses = |o: &TrainOutcome| o.history.iter().map(|h| h.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
    }

    #[test]
    fn constant_logits_predict_class_zero() {
        let m = linear_model(0);
        let node = m
            .node("fc")
            .unwrap()
            .clone()
            .with_param("weight", Tensor::zeros(vec![2, 2]))
            .with_param("bias", Tensor::zeros(vec![2]));
        let m = m.with_node(node);
        let d = separable(10);
        assert_eq!(evaluate(&m, &d).unwrap(), 0.5);
        assert!(predict(&m, &d).unwrap().iter().all(|&p| p == 0));
    }

    #[test]
    fn evaluate_matches_per_sample_argmax() {
        let m = zoo::chain_cnn(7);
        let d = zoo::prototype_dataset([3, 8, 8], 4, 13, 0.8, 1, 2);
        let ex = Executor::<f32>::new(&m).unwrap();
        let mut hits = 0;
        for i in 0..d.len() {
            let (x, y) = d.gather(&[i]);
            let rec = ex.forward(&x, &y, Mode::Eval).unwrap();
            let l = rec.logits();
            let mut best = 0;
            for c in 1..l.len() {
                if l[c] > l[best] {
                    best = c;
                }
            }
            hits += (best == y[0] as usize) as usize;
        }
        assert_eq!(evaluate(&m, &d).unwrap(), hits as f64 / d.len() as f64);
    }

    #[test]
    fn lr_schedule_steps_down() {
        let cfg = TrainConfig {
            lr: 1.0,
            milestones: vec![2, 4],
            lr_factor: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 1.0);
        assert_eq!(cfg.lr_at(2), 0.1);
        assert!((cfg.lr_at(5) - 0.01).abs() < 1e-15);
        assert!(TrainConfig { lr_factor: 1.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let d = separable(8);
        let cfg = TrainConfig {
            lr: 1e30,
            epochs: 5,
            batch_size: 4,
            ..TrainConfig::default()
        };
        match train(&linear_model(0), &d, &cfg, None) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("diverged"), "{msg}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
