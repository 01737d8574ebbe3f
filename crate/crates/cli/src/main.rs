use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use groupprune::bench::{self, ExperimentConfig, Format, RegEntry};
use groupprune::exec::{evaluate, train, Dataset, TrainConfig};
use groupprune::flops::model_cost;
use groupprune::group::build_groups;
use groupprune::importance::{score_groups, Criterion, CriterionSpec, Normalization};
use groupprune::sched::{prune_to_target, PruneConfig, Scheme};
use groupprune::sparse::{sparsify, Regularizer};
use groupprune::{load_model, save_model, zoo};

#[derive(Parser)]
#[command(name = "groupprune", version, about = "Structural channel pruning and benchmarking")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Inspect pruning groups.
    Groups {
        #[command(subcommand)]
        cmd: GroupsCmd,
    },
    /// Per-layer parameter and FLOPs counts.
    Cost {
        model: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Per-group importance scores as JSON.
    Score {
        model: PathBuf,
        #[arg(long)]
        criterion: Criterion,
        #[command(flatten)]
        calib: CalibArgs,
        #[arg(long, default_value = "max")]
        normalization: Normalization,
    },
    /// Sparse learning with a regularizer.
    Sparsify(SparsifyArgs),
    /// Iterative pruning to a FLOPs speedup target.
    Prune(PruneArgs),
    /// Plain SGD training.
    Train {
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 accuracy on a dataset.
    Eval {
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write a built-in architecture with seeded initial weights.
    Zoo {
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic desk dataset as `train/` and `val/` under OUT.
    DeskData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Experiment matrices and leaderboards.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
}

#[derive(Subcommand)]
enum GroupsCmd {
    /// Print groups as JSON.
    Dump { model: PathBuf },
}

#[derive(Args)]
struct CalibArgs {
    /// Dataset directory sampled for data-driven criteria.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    calib_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl CalibArgs {
    fn batch(&self, criterion: Criterion) -> Result<Option<Dataset>> {
        match (&self.calib, criterion.data_driven()) {
            (Some(dir), true) => {
                let d = Dataset::load(dir)?;
                Ok(Some(d.calibration(self.calib_size.min(d.len()), self.seed)?))
            }
            (None, true) => bail!("criterion `{criterion}` needs --calib"),
            _ => Ok(None),
        }
    }
}

#[derive(Args)]
struct SparsifyArgs {
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    reg: Regularizer,
    /// Criterion the preset is tuned for.
    #[arg(long)]
    criterion: Option<Criterion>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value = "desk")]
    dataset_name: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    model: PathBuf,
    #[arg(long)]
    speedup: f64,
    #[arg(long, default_value_t = 400)]
    steps: usize,
    #[arg(long, default_value = "protected_global")]
    scheme: Scheme,
    #[arg(long, default_value = "magnitude_l2")]
    criterion: Criterion,
    #[arg(long, default_value = "max")]
    normalization: Normalization,
    /// Protection fraction for protected_global.
    #[arg(long, default_value_t = 0.10)]
    protect: f64,
    #[command(flatten)]
    calib: CalibArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Run an experiment matrix from a JSON config.
    Run {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        speedups: Option<Vec<f64>>,
    },
    /// Render the leaderboard of a finished run.
    Report {
        dir: PathBuf,
        #[arg(long, default_value = "md")]
        format: Format,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Groups {
            cmd: GroupsCmd::Dump { model },
        } => {
            let groups = build_groups(&load_model(&model)?)?;
            println!("{}", serde_json::to_string_pretty(&groups)?);
        }
        Cmd::Cost { model, json } => {
            let cost = model_cost(&load_model(&model)?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&cost)?);
            } else {
                print!("{}", cost.to_table());
            }
        }
        Cmd::Score {
            model,
            criterion,
            calib,
            normalization,
        } => {
            let m = load_model(&model)?;
            let groups = build_groups(&m)?;
            let spec = CriterionSpec::new(criterion)
                .with_seed(calib.seed)
                .with_normalization(normalization);
            let batch = calib.batch(criterion)?;
            let scores = score_groups(&m, &groups, &spec, batch.as_ref())?;
            println!("{}", serde_json::to_string_pretty(&scores)?);
        }
        Cmd::Sparsify(a) => {
            let m = load_model(&a.model)?;
            let data = Dataset::load(&a.data)?;
            let reg = RegEntry {
                regularizer: a.reg,
                criterion: a.criterion,
                lambda: a.lambda,
                eta: a.eta,
                delta: a.delta,
            }
            .resolve(&m.name, &a.dataset_name)?;
            let tc = TrainConfig {
                epochs: a.epochs,
                seed: a.seed,
                ..TrainConfig::default()
            };
            let out = sparsify(&m, &data, &reg, &tc)?;
            save_model(&out.model, &a.out)?;
            write_json(&a.out.join("sparsify.json"), &serde_json::json!({
                "regularizer": reg,
                "reg_time": out.reg_time,
                "history": out.history,
            }))?;
            eprintln!("sparsified model written to {} ({:.3}s per epoch)", a.out.display(), out.reg_time);
        }
        Cmd::Prune(a) => {
            let m = load_model(&a.model)?;
            let cfg = PruneConfig {
                speedup: a.speedup,
                steps: a.steps,
                scheme: a.scheme,
                protection: a.protect,
                criterion: CriterionSpec::new(a.criterion)
                    .with_seed(a.calib.seed)
                    .with_normalization(a.normalization),
            };
            let batch = a.calib.batch(a.criterion)?;
            let out = prune_to_target(&m, &cfg, batch.as_ref())?;
            save_model(&out.model, &a.out)?;
            write_json(&a.out.join("telemetry.json"), &serde_json::to_value(&out.telemetry)?)?;
            let t = &out.telemetry;
            eprintln!(
                "{} steps; FLOPs {} -> {} ({:.2}%), params {} -> {} ({:.2}%)",
                t.steps.len(),
                t.original_flops,
                t.achieved_flops,
                100.0 * t.flops_ratio(),
                t.original_params,
                t.achieved_params,
                100.0 * t.params_ratio()
            );
        }
        Cmd::Train {
            model,
            data,
            epochs,
            lr,
            seed,
            out,
        } => {
            let m = load_model(&model)?;
            let d = Dataset::load(&data)?;
            let cfg = TrainConfig {
                epochs,
                lr,
                seed,
                ..TrainConfig::default()
            };
            let res = train(&m, &d, &cfg, None)?;
            for h in &res.history {
                eprintln!("epoch {:>3}  loss {:.4}  train acc {:.4}", h.epoch, h.loss, h.train_accuracy);
            }
            save_model(&res.model, &out)?;
        }
        Cmd::Eval { model, data } => {
            let acc = evaluate(&load_model(&model)?, &Dataset::load(&data)?)?;
            println!("{acc:.4}");
        }
        Cmd::Zoo { name, seed, out } => {
            let m = match name.as_str() {
                "desk_cnn" => zoo::desk_cnn(seed),
                "chain_cnn" => zoo::chain_cnn(seed),
                "vgg_cnn" => zoo::vgg_cnn(seed),
                "residual_cnn" => zoo::residual_cnn(seed),
                "bottleneck_cnn" => zoo::bottleneck_cnn(seed),
                "twin_branch" => zoo::twin_branch(seed),
                "mlp" => zoo::mlp(seed),
                _ => bail!(
                    "unknown architecture `{name}` (desk_cnn, chain_cnn, vgg_cnn, residual_cnn, bottleneck_cnn, twin_branch, mlp)"
                ),
            };
            save_model(&m, &out)?;
        }
        Cmd::DeskData { seed, out } => {
            let (tr, va) = zoo::desk_data(seed);
            tr.save(&out.join("train"))?;
            va.save(&out.join("val"))?;
        }
        Cmd::Bench {
            cmd:
                BenchCmd::Run {
                    config,
                    output,
                    repeats,
                    seed,
                    speedups,
                },
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(o) = output {
                cfg.output = o;
            }
            if let Some(r) = repeats {
                cfg.repeats = r;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = speedups {
                cfg.speedups = s;
            }
            cfg.validate()?;
            let res = bench::run_experiment(&cfg)?;
            print!("{}", bench::render(&res.rows, Format::Markdown)?);
            let failed = res.failed_cells();
            if failed > 0 {
                eprintln!("{failed} cell(s) failed; see {}", cfg.output.join(bench::MANIFEST).display());
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Bench {
            cmd: BenchCmd::Report { dir, format, out },
        } => {
            let rows = bench::read_rows(&dir)?;
            match out {
                Some(p) => bench::emit_leaderboard(&rows, format, &p)?,
                None => print!("{}", bench::render(&rows, format)?),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
