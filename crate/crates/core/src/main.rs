//! Experiment CLI: fit (offline), stream (online), predict from a
//! checkpoint, probability-grid export, and toy-data generation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gpc_smc::data::{gen_toy, load_csv, write_csv, Standardizer, ToyKind, ToySpec};
use gpc_smc::harness::{
    run_experiment, DatasetSpec, ExperimentConfig, ExperimentMode, OnlineEval, OnlineProtocol,
    SplitConfig,
};
use gpc_smc::kernel::PcfgConfig;
use gpc_smc::math::SigmoidKind;
use gpc_smc::predict::{
    write_grid_csv, write_predictions_csv, PredictConfig, Predictor,
};
use gpc_smc::smc::{ParticleSet, SmcConfig};

#[derive(Parser)]
#[command(
    name = "gpc-smc",
    version,
    about = "Gaussian process classification with kernel structure discovery"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Offline learning: split, batch-temper over the training set, report
    /// test accuracy.
    Fit(ExperimentArgs),
    /// Online learning: absorb arrival batches, tracking accuracy per batch.
    Stream(ExperimentArgs),
    /// Score a CSV of points against a saved checkpoint.
    Predict(PredictArgs),
    /// Export a 2-d probability grid from a saved checkpoint.
    Grid(GridArgs),
    /// Generate a toy dataset CSV.
    GenToy(GenToyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmoidArg {
    Probit,
    Logistic,
}

impl From<SigmoidArg> for SigmoidKind {
    fn from(v: SigmoidArg) -> SigmoidKind {
        match v {
            SigmoidArg::Probit => SigmoidKind::Probit,
            SigmoidArg::Logistic => SigmoidKind::Logistic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ToyKindArg {
    BlobsLinear,
    Moons,
    Circles,
}

impl From<ToyKindArg> for ToyKind {
    fn from(v: ToyKindArg) -> ToyKind {
        match v {
            ToyKindArg::BlobsLinear => ToyKind::BlobsLinear,
            ToyKindArg::Moons => ToyKind::Moons,
            ToyKindArg::Circles => ToyKind::Circles,
        }
    }
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment config; its fields override the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV (features + final "label" column).
    #[arg(long, conflicts_with = "toy")]
    data: Option<PathBuf>,
    /// Toy dataset kind instead of a CSV.
    #[arg(long)]
    toy: Option<ToyKindArg>,
    #[arg(long, default_value_t = 100)]
    toy_n: usize,
    #[arg(long, default_value_t = 0.05)]
    toy_noise: f64,
    #[arg(long, default_value_t = 0)]
    toy_seed: u64,
    /// Number of tempering batches T.
    #[arg(long, conflicts_with = "batch_size")]
    batches: Option<usize>,
    /// Points per tempering batch.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 8)]
    particles: usize,
    /// Rejuvenation sweeps per batch.
    #[arg(long, default_value_t = 3)]
    reju: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Kernel expression pinning every particle's structure, e.g. "(LIN + SE)".
    #[arg(long)]
    fixed_kernel: Option<String>,
    #[arg(long, value_enum, default_value_t = SigmoidArg::Probit)]
    sigmoid: SigmoidArg,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    no_standardize: bool,
    /// Online only: front-load one class into the first batch.
    #[arg(long)]
    class_biased_first_batch: bool,
    #[arg(long, default_value_t = 5)]
    biased_holdout: usize,
    /// Online only: score each batch before absorbing it instead of using
    /// the held-out test split.
    #[arg(long)]
    prequential: bool,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

impl ExperimentArgs {
    fn into_config(self, mode: ExperimentMode) -> anyhow::Result<ExperimentConfig> {
        let dataset = match (&self.data, self.toy) {
            (Some(path), None) => DatasetSpec::Csv { path: path.clone() },
            (None, Some(kind)) => DatasetSpec::Toy(ToySpec {
                kind: kind.into(),
                n: self.toy_n,
                noise: self.toy_noise,
                seed: self.toy_seed,
            }),
            _ => anyhow::bail!("provide exactly one of --data / --toy"),
        };
        let (batch_count, batch_size) = match (self.batches, self.batch_size) {
            (None, None) => (Some(10), None), // default schedule
            other => other,
        };
        let mut cfg = ExperimentConfig {
            mode,
            dataset,
            batch_count,
            batch_size,
            split: SplitConfig {
                train_frac: self.train_frac,
                seed: self.split_seed,
            },
            online_protocol: if self.class_biased_first_batch {
                OnlineProtocol::ClassBiasedFirstBatch
            } else {
                OnlineProtocol::NaturalOrder
            },
            biased_holdout: self.biased_holdout,
            online_eval: if self.prequential {
                OnlineEval::Prequential
            } else {
                OnlineEval::FixedTest
            },
            fixed_kernel: self.fixed_kernel.clone(),
            smc: SmcConfig {
                num_particles: self.particles,
                n_reju: self.reju,
                rng_seed: self.seed,
                ..Default::default()
            },
            pcfg: PcfgConfig::default(),
            sigmoid: self.sigmoid.into(),
            standardize: !self.no_standardize,
            output_dir: self.out.clone(),
        };
        if let Some(path) = &self.config {
            cfg = merge_config(cfg, path)?;
        }
        Ok(cfg)
    }
}

/// Overlays the JSON file's fields on the flag-derived config; the file wins
/// wherever both specify a value.
fn merge_config(base: ExperimentConfig, path: &PathBuf) -> anyhow::Result<ExperimentConfig> {
    let mut value = serde_json::to_value(&base)?;
    let overlay: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    merge_values(&mut value, overlay);
    Ok(serde_json::from_value(value)?)
}

fn merge_values(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_values(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Args)]
struct PredictArgs {
    /// ParticleSet checkpoint (checkpoint.json of a previous run).
    #[arg(long)]
    checkpoint: PathBuf,
    /// The run's conditioned training CSV (train.csv of the same run).
    #[arg(long)]
    train: PathBuf,
    /// Points to score; same feature columns as the training CSV. A "label"
    /// column is accepted and ignored.
    #[arg(long)]
    input: PathBuf,
    /// The run's standardizer.json; applied to the input when given.
    #[arg(long)]
    standardizer: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SigmoidArg::Probit)]
    sigmoid: SigmoidArg,
    #[arg(long, default_value = "predictions.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    train: PathBuf,
    /// Box as x1_min,x1_max,x2_min,x2_max.
    #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [-3.0, 3.0, -3.0, 3.0])]
    bounds: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    resolution: usize,
    #[arg(long, value_enum, default_value_t = SigmoidArg::Probit)]
    sigmoid: SigmoidArg,
    #[arg(long, default_value = "grid.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct GenToyArgs {
    #[arg(long, value_enum)]
    kind: ToyKindArg,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn run_fit(args: ExperimentArgs, mode: ExperimentMode) -> anyhow::Result<()> {
    let cfg = args.into_config(mode)?;
    println!("resolved config (seed {}):", cfg.smc.rng_seed);
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    let report = run_experiment(&cfg)?;
    println!(
        "done in {:.1}s; report at {}",
        report.runtime_seconds,
        cfg.output_dir.join("report.json").display()
    );
    match (&report.metrics.accuracy, &report.metrics.average_accuracy) {
        (Some(acc), _) => println!("test accuracy: {acc:.4}"),
        (_, Some(avg)) => println!("average per-batch accuracy: {avg:.4}"),
        _ => {}
    }
    Ok(())
}

fn load_predictor(
    checkpoint: &PathBuf,
    train: &PathBuf,
    sigmoid: SigmoidArg,
    seed: u64,
) -> anyhow::Result<(Predictor, usize)> {
    let ps = ParticleSet::load_json(checkpoint)?;
    let train_ds = load_csv(train)?;
    let cfg = PredictConfig {
        sigmoid: sigmoid.into(),
        rng_seed: seed,
        ..Default::default()
    };
    let dim = train_ds.dim();
    Ok((Predictor::new(&ps, &train_ds.x, cfg)?, dim))
}

fn run_predict(args: PredictArgs) -> anyhow::Result<()> {
    let (predictor, dim) = load_predictor(&args.checkpoint, &args.train, args.sigmoid, 0)?;
    let input = load_csv(&args.input)?;
    anyhow::ensure!(
        input.dim() == dim,
        "input has {} features, training data has {dim}",
        input.dim()
    );
    let mut x = input.x;
    if let Some(path) = &args.standardizer {
        let s: Standardizer = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        x = s.transform(&x);
    }
    let preds = predictor.predict_batch(&x, false)?;
    write_predictions_csv(&args.out, &preds)?;
    println!("wrote {} predictions to {}", preds.len(), args.out.display());
    Ok(())
}

fn run_grid(args: GridArgs) -> anyhow::Result<()> {
    let (predictor, dim) = load_predictor(&args.checkpoint, &args.train, args.sigmoid, 0)?;
    anyhow::ensure!(dim == 2, "grid export needs 2-dimensional features, got {dim}");
    let b = &args.bounds;
    let grid = predictor.probability_grid([[b[0], b[1]], [b[2], b[3]]], args.resolution)?;
    write_grid_csv(&args.out, &grid)?;
    println!("wrote {} grid points to {}", grid.len(), args.out.display());
    Ok(())
}

fn run_gen_toy(args: GenToyArgs) -> anyhow::Result<()> {
    let ds = gen_toy(&ToySpec {
        kind: args.kind.into(),
        n: args.n,
        noise: args.noise,
        seed: args.seed,
    })?;
    write_csv(&ds, &args.out)?;
    println!("wrote {} rows to {}", ds.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Fit(args) => run_fit(args, ExperimentMode::Offline),
        Cmd::Stream(args) => run_fit(args, ExperimentMode::Online),
        Cmd::Predict(args) => run_predict(args),
        Cmd::Grid(args) => run_grid(args),
        Cmd::GenToy(args) => run_gen_toy(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
