//! Experiment matrices: sparsify, prune, finetune and evaluate every
//! (criterion or regularizer) × speedup cell, then rank the results.

pub mod report;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::{evaluate, train, Dataset, TrainConfig};
use crate::importance::{Criterion, CriterionSpec, Normalization};
use crate::model::{load_model, save_model, ModelGraph, WEIGHTS_FILE};
use crate::sched::{prune_to_target, PruneConfig, Scheme};
use crate::sparse::{preset, sparsify, RegConfig, Regularizer};

pub use report::{emit_leaderboard, rank_rows, read_rows, render, Format, LeaderboardRow};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSettings {
    pub steps: usize,
    pub scheme: Scheme,
    pub protection: f64,
    pub normalization: Normalization,
    /// Samples drawn for data-driven criteria.
    pub calibration_size: usize,
}

impl Default for PruneSettings {
    fn default() -> Self {
        PruneSettings {
            steps: 400,
            scheme: Scheme::ProtectedGlobal,
            protection: 0.10,
            normalization: Normalization::default(),
            calibration_size: 64,
        }
    }
}

/// A regularizer row. Unset fields come from the preset for the model and
/// dataset names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegEntry {
    pub regularizer: Regularizer,
    /// Criterion used when pruning the sparsified model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion: Option<Criterion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

impl RegEntry {
    pub fn new(regularizer: Regularizer) -> Self {
        RegEntry {
            regularizer,
            criterion: None,
            lambda: None,
            eta: None,
            delta: None,
        }
    }

    pub fn criterion(&self) -> Criterion {
        self.criterion.unwrap_or(match self.regularizer {
            Regularizer::Bnscale => Criterion::Bnscale,
            _ => Criterion::MagnitudeL2,
        })
    }

    pub fn resolve(&self, model: &str, dataset: &str) -> Result<RegConfig> {
        let crit = self.criterion();
        let mut cfg = match preset(self.regularizer, crit, model, dataset) {
            Some(c) => c,
            None => {
                let (Some(lambda), Some(eta)) = (self.lambda, self.eta) else {
                    return Err(Error::Config(format!(
                        "no preset for {} with {} on {model}/{dataset}; set lambda and eta",
                        self.regularizer, crit
                    )));
                };
                RegConfig::new(self.regularizer, lambda, eta)
            }
        };
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        if let Some(e) = self.eta {
            cfg.eta = e;
        }
        if let Some(d) = self.delta {
            cfg.delta = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Pretrained model directory.
    pub model: PathBuf,
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    /// Defaults to the training set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_data: Option<PathBuf>,
    #[serde(default = "default_dataset_name")]
    pub dataset_name: String,
    #[serde(default)]
    pub criteria: Vec<Criterion>,
    #[serde(default)]
    pub regularizers: Vec<RegEntry>,
    pub speedups: Vec<f64>,
    /// Seeds per stochastic method.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Repeat deterministic methods too (their finetuning still varies).
    #[serde(default)]
    pub repeat_all: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub prune: PruneSettings,
    #[serde(default)]
    pub finetune: TrainConfig,
    /// Sparse-learning schedule; the learning rate comes from each regularizer's η.
    #[serde(default)]
    pub sparse: TrainConfig,
    pub output: PathBuf,
}

fn default_dataset_name() -> String {
    "desk".into()
}
fn default_repeats() -> usize {
    3
}

impl ExperimentConfig {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.model, &mut cfg.train_data, &mut cfg.val_data, &mut cfg.output]
            .into_iter()
            .chain(cfg.calibration_data.as_mut())
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.speedups.is_empty() || self.speedups.iter().any(|s| !(*s >= 1.0 && s.is_finite())) {
            return Err(Error::Config(format!("speedups must be a non-empty list of values >= 1, got {:?}", self.speedups)));
        }
        if self.criteria.is_empty() && self.regularizers.is_empty() {
            return Err(Error::Config("no criteria or regularizers to run".into()));
        }
        self.finetune.validate()?;
        self.sparse.validate()?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    fn prune_config(&self, speedup: f64, criterion: Criterion, seed: u64) -> PruneConfig {
        PruneConfig {
            speedup,
            steps: self.prune.steps,
            scheme: self.prune.scheme,
            protection: self.prune.protection,
            criterion: CriterionSpec {
                name: criterion,
                normalization: self.prune.normalization,
                seed,
            },
        }
    }

    fn seeds(&self, stochastic: bool) -> Vec<u64> {
        let n = if stochastic || self.repeat_all { self.repeats } else { 1 };
        (0..n as u64).map(|i| self.seed + i).collect()
    }
}

/// Outcome of one seed of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub params: u64,
    pub flops: u64,
    pub params_pct: f64,
    pub flops_pct: f64,
    pub steps: usize,
    pub step_time: f64,
    pub reg_time: Option<f64>,
    pub model_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub key: String,
    pub speedup: f64,
    pub criterion: Criterion,
    pub regularizer: Option<RegConfig>,
    pub seeds: Vec<SeedResult>,
    /// Per-seed artifact directories relative to the output directory.
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub base_accuracy: f64,
    pub base_model_sha256: String,
    pub cells: Vec<CellRecord>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rows: Vec<LeaderboardRow>,
    pub manifest: RunManifest,
}

impl ExperimentResult {
    pub fn failed_cells(&self) -> usize {
        self.rows.iter().filter(|r| r.failed()).count()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn cell_key(speedup: f64, criterion: Criterion, reg: Option<Regularizer>) -> String {
    format!("{speedup}x-{}-{}", criterion, reg.map_or("none", |r| r.name()))
}

struct Inputs {
    base: ModelGraph,
    train: Dataset,
    val: Dataset,
    calib: Dataset,
}

struct Sparsified {
    model: ModelGraph,
    reg_time: f64,
}

fn run_seed(
    cfg: &ExperimentConfig,
    inp: &Inputs,
    start: &ModelGraph,
    speedup: f64,
    criterion: Criterion,
    reg_time: Option<f64>,
    seed: u64,
    dir: &Path,
) -> Result<SeedResult> {
    let pcfg = cfg.prune_config(speedup, criterion, seed);
    let calib = if criterion.data_driven() {
        Some(inp.calib.calibration(cfg.prune.calibration_size.min(inp.calib.len()), seed)?)
    } else {
        None
    };
    let pruned = prune_to_target(start, &pcfg, calib.as_ref())?;
    let tel = &pruned.telemetry;
    let model = if cfg.finetune.epochs > 0 {
        let ft = TrainConfig {
            seed,
            ..cfg.finetune.clone()
        };
        train(&pruned.model, &inp.train, &ft, None)?.model
    } else {
        pruned.model.clone()
    };
    let accuracy = evaluate(&model, &inp.val)?;
    let model_dir = dir.join("model");
    save_model(&model, &model_dir)?;
    write_json(&dir.join("telemetry.json"), tel)?;
    let res = SeedResult {
        seed,
        accuracy,
        params: tel.achieved_params,
        flops: tel.achieved_flops,
        params_pct: 100.0 * tel.params_ratio(),
        flops_pct: 100.0 * tel.flops_ratio(),
        steps: tel.steps.len(),
        step_time: tel.step_time(),
        reg_time,
        model_sha256: sha256_file(&model_dir.join(WEIGHTS_FILE))?,
    };
    write_json(&dir.join("result.json"), &res)?;
    Ok(res)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn summarize(
    speedup: f64,
    criterion: Criterion,
    reg: Option<Regularizer>,
    base: f64,
    seeds: &[u64],
    results: &[SeedResult],
    error: Option<String>,
) -> LeaderboardRow {
    let pruned = 100.0 * mean(results.iter().map(|r| r.accuracy));
    let reg_time = reg.map(|_| mean(results.iter().filter_map(|r| r.reg_time)));
    LeaderboardRow {
        speedup,
        importance: criterion.name().to_string(),
        regularizer: reg.map(|r| r.name().to_string()),
        stochastic: criterion.stochastic(),
        rank: None,
        base: 100.0 * base,
        pruned,
        delta: report::round_to(pruned - 100.0 * base, 2),
        params: mean(results.iter().map(|r| r.params as f64)).round() as u64,
        params_pct: mean(results.iter().map(|r| r.params_pct)),
        step_time: mean(results.iter().map(|r| r.step_time)),
        reg_time,
        flops_pct: mean(results.iter().map(|r| r.flops_pct)),
        seeds: seeds.to_vec(),
        error,
    }
}

/// Runs the whole matrix, writing per-seed artifacts, `manifest.json`,
/// raw rows and leaderboards in every format under `cfg.output`. A failing
/// cell is recorded in its row and the matrix continues.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let inp = Inputs {
        base: load_model(&cfg.model)?,
        train: Dataset::load(&cfg.train_data)?,
        val: Dataset::load(&cfg.val_data)?,
        calib: match &cfg.calibration_data {
            Some(p) => Dataset::load(p)?,
            None => Dataset::load(&cfg.train_data)?,
        },
    };
    let out = &cfg.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(CONFIG_COPY), cfg)?;
    let base_accuracy = evaluate(&inp.base, &inp.val)?;
    let base_model_sha256 = sha256_file(&cfg.model.join(WEIGHTS_FILE))?;

    let methods: Vec<(Criterion, Option<&RegEntry>)> = cfg
        .criteria
        .iter()
        .map(|&c| (c, None))
        .chain(cfg.regularizers.iter().map(|r| (r.criterion(), Some(r))))
        .collect();
    let mut sparse_cache: HashMap<(usize, u64), std::result::Result<Sparsified, String>> = HashMap::new();
    let mut rows = Vec::new();
    let mut cells = Vec::new();

    for &speedup in &cfg.speedups {
        for (mi, &(criterion, reg)) in methods.iter().enumerate() {
            let key = cell_key(speedup, criterion, reg.map(|r| r.regularizer));
            let seeds = cfg.seeds(criterion.stochastic());
            let reg_cfg = reg
                .map(|r| r.resolve(&inp.base.name, &cfg.dataset_name))
                .transpose()
                .map_err(|e| e.to_string());
            let mut results = Vec::new();
            let mut artifacts = Vec::new();
            let mut error = None;
            for &seed in &seeds {
                let rel = format!("runs/{key}/seed-{seed}");
                let dir = out.join(&rel);
                let attempt = (|| -> Result<SeedResult> {
                    let reg_cfg = reg_cfg.clone().map_err(Error::Config)?;
                    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    let (start, reg_time) = match &reg_cfg {
                        None => (inp.base.clone(), None),
                        Some(rc) => {
                            let entry = sparse_cache.entry((mi, seed)).or_insert_with(|| {
                                let tc = TrainConfig {
                                    seed,
                                    ..cfg.sparse.clone()
                                };
                                sparsify(&inp.base, &inp.train, rc, &tc)
                                    .map(|s| Sparsified {
                                        model: s.model,
                                        reg_time: s.reg_time,
                                    })
                                    .map_err(|e| e.to_string())
                            });
                            match entry {
                                Ok(s) => (s.model.clone(), Some(s.reg_time)),
                                Err(e) => return Err(Error::Config(format!("sparse learning failed: {e}"))),
                            }
                        }
                    };
                    run_seed(cfg, &inp, &start, speedup, criterion, reg_time, seed, &dir)
                })();
                match attempt {
                    Ok(r) => {
                        results.push(r);
                        artifacts.push(rel);
                    }
                    Err(e) => {
                        error = Some(format!("seed {seed}: {e}"));
                        break;
                    }
                }
            }
            rows.push(summarize(
                speedup,
                criterion,
                reg.map(|r| r.regularizer),
                base_accuracy,
                &seeds,
                &results,
                error.clone(),
            ));
            cells.push(CellRecord {
                key,
                speedup,
                criterion,
                regularizer: reg_cfg.ok().flatten(),
                seeds: results,
                artifacts,
                error,
            });
        }
    }

    rank_rows(&mut rows);
    let manifest = RunManifest {
        config_sha256: cfg.hash(),
        config: cfg.clone(),
        base_accuracy,
        base_model_sha256,
        cells,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    report::write_rows(&rows, out)?;
    for f in [Format::Markdown, Format::Csv, Format::Json] {
        emit_leaderboard(&rows, f, &out.join(format!("leaderboard.{}", f.extension())))?;
    }
    Ok(ExperimentResult { rows, manifest })
}
