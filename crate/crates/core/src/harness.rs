//! Experiment orchestration: dataset resolution, batch scheduling, the
//! offline and online protocols, and JSON/CSV reporting.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{gen_toy, load_csv, stratified_split, Dataset, Standardizer, ToySpec};
use crate::error::{Error, Result};
use crate::kernel::{parse_kernel, transform_params, PcfgConfig};
use crate::math::SigmoidKind;
use crate::model::ModelConfig;
use crate::predict::{
    online_average_accuracy, write_predictions_csv, PredictConfig, Predictor,
};
use crate::smc::{SmcConfig, SmcRun, StepDiagnostics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    Offline,
    Online,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Csv { path: PathBuf },
    Toy(ToySpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_frac: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_frac: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnlineProtocol {
    NaturalOrder,
    ClassBiasedFirstBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnlineEval {
    /// Accuracy after each batch on the fixed held-out test split.
    FixedTest,
    /// Accuracy on each incoming batch, predicted before absorbing it.
    Prequential,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: ExperimentMode,
    pub dataset: DatasetSpec,
    /// Exactly one of `batch_count` / `batch_size` must be set.
    #[serde(default)]
    pub batch_count: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default = "default_protocol")]
    pub online_protocol: OnlineProtocol,
    /// Points of the majority class held back from a class-biased first
    /// batch so later batches are not single-class.
    #[serde(default = "default_biased_holdout")]
    pub biased_holdout: usize,
    #[serde(default = "default_eval")]
    pub online_eval: OnlineEval,
    /// Kernel expression text; pins every particle's structure when set.
    #[serde(default)]
    pub fixed_kernel: Option<String>,
    #[serde(default)]
    pub smc: SmcConfig,
    #[serde(default)]
    pub pcfg: PcfgConfig,
    #[serde(default = "default_sigmoid")]
    pub sigmoid: SigmoidKind,
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_protocol() -> OnlineProtocol {
    OnlineProtocol::NaturalOrder
}
fn default_biased_holdout() -> usize {
    5
}
fn default_eval() -> OnlineEval {
    OnlineEval::FixedTest
}
fn default_sigmoid() -> SigmoidKind {
    SigmoidKind::Probit
}
fn default_true() -> bool {
    true
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.batch_count, self.batch_size) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config(
                    "set exactly one of batch_count / batch_size".into(),
                ))
            }
            (Some(0), None) | (None, Some(0)) => {
                return Err(Error::Config("batch schedule must be positive".into()))
            }
            _ => {}
        }
        if !(self.split.train_frac > 0.0 && self.split.train_frac < 1.0) {
            return Err(Error::Config("split.train_frac must lie in (0,1)".into()));
        }
        if let Some(text) = &self.fixed_kernel {
            parse_kernel(text)?;
        }
        self.smc.validate()?;
        self.pcfg.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticleSummary {
    pub structure: String,
    pub params: Vec<f64>,
    pub epsilon: f64,
    pub beta: f64,
    pub log_weight: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_batch_accuracy: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub steps: Vec<StepDiagnostics>,
    pub particles: Vec<ParticleSummary>,
    pub metrics: Metrics,
    pub runtime_seconds: f64,
}

/// Near-even batch sizes; `batch_count` caps at one point per batch.
fn batch_sizes(n: usize, cfg: &ExperimentConfig) -> Vec<usize> {
    if let Some(size) = cfg.batch_size {
        let mut out = Vec::new();
        let mut left = n;
        while left > 0 {
            let m = size.min(left);
            out.push(m);
            left -= m;
        }
        out
    } else {
        let t = cfg.batch_count.expect("validated").min(n);
        let base = n / t;
        let rem = n % t;
        (0..t).map(|i| base + usize::from(i < rem)).collect()
    }
}

fn resolve_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Csv { path } => load_csv(path),
        DatasetSpec::Toy(toy) => gen_toy(toy),
    }
}

/// Train/test split with training-only standardization statistics.
fn prepare(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Option<Standardizer>)> {
    let ds = resolve_dataset(&cfg.dataset)?;
    let (train, test) = stratified_split(&ds, cfg.split.train_frac, cfg.split.seed)?;
    if cfg.standardize {
        let standardizer = Standardizer::fit(&train.x);
        Ok((
            standardizer.transform_dataset(&train),
            standardizer.transform_dataset(&test),
            Some(standardizer),
        ))
    } else {
        Ok((train, test, None))
    }
}

/// The training data as conditioned on (post split and standardization) and
/// the fitted statistics, so `predict`/`grid` can rebuild the same space.
fn write_training_artifacts(
    dir: &Path,
    train: &Dataset,
    standardizer: &Option<Standardizer>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::data::write_csv(train, dir.join("train.csv"))?;
    if let Some(s) = standardizer {
        write_json_atomic(&dir.join("standardizer.json"), s)?;
    }
    Ok(())
}

/// Row order for the online stream; the class-biased protocol front-loads
/// the majority class except for `biased_holdout` points.
fn online_order(train: &Dataset, cfg: &ExperimentConfig) -> Vec<usize> {
    match cfg.online_protocol {
        OnlineProtocol::NaturalOrder => (0..train.len()).collect(),
        OnlineProtocol::ClassBiasedFirstBatch => {
            let class0: Vec<usize> = (0..train.len()).filter(|&i| train.y[i] == 0).collect();
            let rest: Vec<usize> = (0..train.len()).filter(|&i| train.y[i] != 0).collect();
            let holdout = cfg.biased_holdout.min(class0.len().saturating_sub(1));
            let split_at = class0.len() - holdout;
            let mut order: Vec<usize> = class0[..split_at].to_vec();
            // interleave the held-back majority points with the other class
            let mut tail: Vec<usize> = class0[split_at..].to_vec();
            tail.extend(rest);
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.split.seed ^ 0x5eed);
            tail.shuffle(&mut rng);
            order.extend(tail);
            order
        }
    }
}

fn smc_config(cfg: &ExperimentConfig) -> Result<SmcConfig> {
    let mut smc = cfg.smc.clone();
    if let Some(text) = &cfg.fixed_kernel {
        smc.fixed_kernel = Some(parse_kernel(text)?);
    }
    Ok(smc)
}

fn model_config(cfg: &ExperimentConfig) -> ModelConfig {
    ModelConfig {
        sigmoid: cfg.sigmoid,
        ..Default::default()
    }
}

fn predict_config(cfg: &ExperimentConfig) -> PredictConfig {
    PredictConfig {
        sigmoid: cfg.sigmoid,
        rng_seed: cfg.smc.rng_seed,
        ..Default::default()
    }
}

fn summarize(run: &SmcRun) -> Vec<ParticleSummary> {
    run.particle_set()
        .particles
        .iter()
        .map(|p| ParticleSummary {
            structure: p.kernel.to_string(),
            params: transform_params(&p.kernel, &p.theta_u)
                .map(|c| c.0)
                .unwrap_or_default(),
            epsilon: p.epsilon(),
            beta: p.beta,
            log_weight: p.log_weight,
        })
        .collect()
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Absorbs batches, dumping a checkpoint next to the report on numerical
/// failure so the run can be inspected.
fn absorb_all(
    run: &mut SmcRun,
    train: &Dataset,
    order: &[usize],
    sizes: &[usize],
    output_dir: &Path,
    mut between: impl FnMut(&mut SmcRun, usize, &Dataset) -> Result<()>,
) -> Result<()> {
    let mut start = 0;
    for (b, &m) in sizes.iter().enumerate() {
        let batch = train.select(&order[start..start + m]);
        let is_final = b + 1 == sizes.len();
        if let Err(e) = run
            .absorb(&batch.x, &batch.y, is_final)
            .map(|_| ())
            .and_then(|()| between(run, b, &batch))
        {
            let checkpoint = output_dir.join("checkpoint_failure.json");
            let _ = std::fs::create_dir_all(output_dir);
            let _ = run.particle_set().save_json(&checkpoint);
            return Err(Error::Data(format!(
                "run aborted at batch {b}: {e}; checkpoint dumped to {}",
                checkpoint.display()
            )));
        }
        start += m;
    }
    Ok(())
}

pub fn run_offline(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let started = Instant::now();
    let (train, test, standardizer) = prepare(cfg)?;
    let sizes = batch_sizes(train.len(), cfg);
    let order: Vec<usize> = (0..train.len()).collect();
    write_training_artifacts(&cfg.output_dir, &train, &standardizer)?;

    let mut run = SmcRun::new(train.dim(), cfg.pcfg.clone(), model_config(cfg), smc_config(cfg)?)?;
    absorb_all(&mut run, &train, &order, &sizes, &cfg.output_dir, |_, _, _| Ok(()))?;

    let predictor = Predictor::new(run.particle_set(), &train.x, predict_config(cfg))?;
    let accuracy = predictor.accuracy(&test.x, &test.y)?;
    let preds = predictor.predict_batch(&test.x, false)?;

    let report = Report {
        config: cfg.clone(),
        steps: run.diagnostics.clone(),
        particles: summarize(&run),
        metrics: Metrics {
            accuracy: Some(accuracy),
            ..Default::default()
        },
        runtime_seconds: started.elapsed().as_secs_f64(),
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_json_atomic(&cfg.output_dir.join("report.json"), &report)?;
    write_predictions_csv(cfg.output_dir.join("predictions.csv"), &preds)?;
    run.particle_set()
        .save_json(cfg.output_dir.join("checkpoint.json"))?;
    Ok(report)
}

pub fn run_online(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let started = Instant::now();
    let (train, test, standardizer) = prepare(cfg)?;
    let sizes = batch_sizes(train.len(), cfg);
    let order = online_order(&train, cfg);
    write_training_artifacts(&cfg.output_dir, &train, &standardizer)?;

    let mut run = SmcRun::new(train.dim(), cfg.pcfg.clone(), model_config(cfg), smc_config(cfg)?)?;
    let mut per_batch = Vec::with_capacity(sizes.len());
    let pcfg_pred = predict_config(cfg);
    match cfg.online_eval {
        OnlineEval::FixedTest => {
            absorb_all(&mut run, &train, &order, &sizes, &cfg.output_dir, |run, _, _| {
                let (x_seen, _) = run.seen();
                let predictor = Predictor::new(run.particle_set(), x_seen, pcfg_pred.clone())?;
                per_batch.push(predictor.accuracy(&test.x, &test.y)?);
                Ok(())
            })?;
        }
        OnlineEval::Prequential => {
            // each batch is scored by the state conditioned on the batches
            // before it, then absorbed
            let mut start = 0;
            for (b, &m) in sizes.iter().enumerate() {
                let batch = train.select(&order[start..start + m]);
                let (x_seen, _) = run.seen();
                let predictor = Predictor::new(run.particle_set(), x_seen, pcfg_pred.clone())?;
                per_batch.push(predictor.accuracy(&batch.x, &batch.y)?);
                run.absorb(&batch.x, &batch.y, b + 1 == sizes.len())?;
                start += m;
            }
        }
    }

    let (x_seen, _) = run.seen();
    let predictor = Predictor::new(run.particle_set(), x_seen, pcfg_pred)?;
    let preds = predictor.predict_batch(&test.x, false)?;
    let average = online_average_accuracy(&per_batch)?;

    let report = Report {
        config: cfg.clone(),
        steps: run.diagnostics.clone(),
        particles: summarize(&run),
        metrics: Metrics {
            per_batch_accuracy: Some(per_batch),
            average_accuracy: Some(average),
            ..Default::default()
        },
        runtime_seconds: started.elapsed().as_secs_f64(),
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_json_atomic(&cfg.output_dir.join("report.json"), &report)?;
    write_predictions_csv(cfg.output_dir.join("predictions.csv"), &preds)?;
    run.particle_set()
        .save_json(cfg.output_dir.join("checkpoint.json"))?;
    Ok(report)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    match cfg.mode {
        ExperimentMode::Offline => run_offline(cfg),
        ExperimentMode::Online => run_online(cfg),
    }
}
