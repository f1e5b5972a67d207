//! Dataset ingestion: CSV loading, feature standardization, stratified
//! splits and seeded toy-data generators.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary classification dataset: feature matrix plus {0,1} labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<u8>,
    pub feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<u8>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if y.iter().any(|&v| v > 1) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        Ok(Dataset {
            x,
            y,
            feature_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// New dataset holding the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let x = DMatrix::from_fn(indices.len(), self.dim(), |i, j| self.x[(indices[i], j)]);
        let y = indices.iter().map(|&i| self.y[i]).collect();
        Dataset {
            x,
            y,
            feature_names: self.feature_names.clone(),
        }
    }

    /// First `n` rows.
    pub fn prefix(&self, n: usize) -> Dataset {
        self.select(&(0..n).collect::<Vec<_>>())
    }
}

/// Loads a CSV with a header row; the column named `label` holds {0,1}
/// labels, every other column is a numeric feature. Returns raw features;
/// standardization is applied separately so train statistics can be reused
/// on test data.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::Data(format!("{}: no column named \"label\"", path.display())))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.trim().to_string())
        .collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(feature_names.len());
        for (i, field) in record.iter().enumerate() {
            if i == label_idx {
                match field.trim() {
                    "0" => labels.push(0),
                    "1" => labels.push(1),
                    other => {
                        return Err(Error::Data(format!(
                            "{}: row {}: label {:?} is not 0 or 1",
                            path.display(),
                            line + 2,
                            other
                        )))
                    }
                }
            } else {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Data(format!(
                        "{}: row {}: non-numeric cell {:?}",
                        path.display(),
                        line + 2,
                        field
                    ))
                })?;
                row.push(v);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let d = rows[0].len();
    let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let mut ds = Dataset::new(x, labels)?;
    ds.feature_names = Some(feature_names);
    Ok(ds)
}

/// Per-column zero-mean/unit-variance statistics, fit on training data only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Columns whose training variance was zero; left at scale 1.
    pub constant_columns: Vec<usize>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Standardizer {
        let (n, d) = (x.nrows(), x.ncols());
        let mut means = vec![0.0; d];
        let mut stds = vec![1.0; d];
        let mut constant_columns = Vec::new();
        for j in 0..d {
            let mean = (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (x[(i, j)] - mean).powi(2)).sum::<f64>() / n as f64;
            means[j] = mean;
            if var > 0.0 {
                stds[j] = var.sqrt();
            } else {
                constant_columns.push(j);
            }
        }
        Standardizer {
            means,
            stds,
            constant_columns,
        }
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.means[j]) / self.stds[j]
        })
    }

    pub fn transform_dataset(&self, ds: &Dataset) -> Dataset {
        Dataset {
            x: self.transform(&ds.x),
            y: ds.y.clone(),
            feature_names: ds.feature_names.clone(),
        }
    }
}

/// Stratified train/test split; shuffling is seeded and per-class, so the
/// class balance of the training fraction matches the full dataset.
pub fn stratified_split(ds: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config("split fraction must be in (0,1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.y[i] == class).collect();
        idx.shuffle(&mut rng);
        let cut = (idx.len() as f64 * train_frac).round() as usize;
        train_idx.extend_from_slice(&idx[..cut]);
        test_idx.extend_from_slice(&idx[cut..]);
    }
    // deterministic interleave, then a final seeded shuffle so batches mix classes
    train_idx.shuffle(&mut rng);
    test_idx.shuffle(&mut rng);
    Ok((ds.select(&train_idx), ds.select(&test_idx)))
}

/// Toy dataset family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    BlobsLinear,
    Moons,
    Circles,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToySpec {
    pub kind: ToyKind,
    pub n: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Seeded 2-d toy datasets with balanced labels (within one point).
pub fn gen_toy(spec: &ToySpec) -> Result<Dataset> {
    if spec.n < 4 {
        return Err(Error::Config("toy datasets need n >= 4".into()));
    }
    if spec.noise < 0.0 {
        return Err(Error::Config("noise must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n0 = spec.n - spec.n / 2;
    let n1 = spec.n / 2;
    let mut points: Vec<[f64; 2]> = Vec::with_capacity(spec.n);
    let mut labels: Vec<u8> = Vec::with_capacity(spec.n);
    match spec.kind {
        ToyKind::BlobsLinear => {
            // two blobs on opposite sides of the line x + y = 0;
            // linearly separable at noise 0
            for (count, center, label) in [(n0, [-1.0, -1.0], 0u8), (n1, [1.0, 1.0], 1u8)] {
                for _ in 0..count {
                    let angle = rng.random::<f64>() * std::f64::consts::TAU;
                    let radius = 0.5 * rng.random::<f64>().sqrt();
                    let nx: f64 = StandardNormal.sample(&mut rng);
                    let ny: f64 = StandardNormal.sample(&mut rng);
                    points.push([
                        center[0] + radius * angle.cos() + spec.noise * nx,
                        center[1] + radius * angle.sin() + spec.noise * ny,
                    ]);
                    labels.push(label);
                }
            }
        }
        ToyKind::Moons => {
            for i in 0..n0 {
                let t = std::f64::consts::PI * i as f64 / (n0.max(2) - 1) as f64;
                let nx: f64 = StandardNormal.sample(&mut rng);
                let ny: f64 = StandardNormal.sample(&mut rng);
                points.push([t.cos() + spec.noise * nx, t.sin() + spec.noise * ny]);
                labels.push(0);
            }
            for i in 0..n1 {
                let t = std::f64::consts::PI * i as f64 / (n1.max(2) - 1) as f64;
                let nx: f64 = StandardNormal.sample(&mut rng);
                let ny: f64 = StandardNormal.sample(&mut rng);
                points.push([
                    1.0 - t.cos() + spec.noise * nx,
                    0.5 - t.sin() + spec.noise * ny,
                ]);
                labels.push(1);
            }
        }
        ToyKind::Circles => {
            // radius ratio 0.85: the tangent half-plane, the best linear
            // separator for concentric circles, then tops out near 59%;
            // the absolute scale keeps the ring gap wide relative to noise
            for (count, radius, label) in [(n0, 2.0, 0u8), (n1, 1.7, 1u8)] {
                for i in 0..count {
                    let t = std::f64::consts::TAU * i as f64 / count as f64;
                    let nx: f64 = StandardNormal.sample(&mut rng);
                    let ny: f64 = StandardNormal.sample(&mut rng);
                    points.push([
                        radius * t.cos() + spec.noise * nx,
                        radius * t.sin() + spec.noise * ny,
                    ]);
                    labels.push(label);
                }
            }
        }
    }
    // seeded shuffle so batch tempering does not see one class first
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut rng);
    let x = DMatrix::from_fn(spec.n, 2, |i, j| points[order[i]][j]);
    let y = order.iter().map(|&i| labels[i]).collect();
    Dataset::new(x, y)
}

/// Writes a dataset as CSV in the harness input format (features, then a
/// trailing `label` column).
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let names: Vec<String> = match &ds.feature_names {
        Some(n) => n.clone(),
        None => (1..=ds.dim()).map(|j| format!("x{j}")).collect(),
    };
    let mut header = names;
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = (0..ds.dim()).map(|j| ds.x[(i, j)].to_string()).collect();
        rec.push(ds.y[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
