//! Posterior prediction from a weighted particle set: per-particle latent
//! conditionals, the probit closed form or logistic Monte Carlo average,
//! and the evaluation metrics used in the experiment reports.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::kernel::{eval_kernel, transform_params, ConstrainedParams, KernelExpression};
use crate::math::{
    gaussian_conditional, probit_predictive, sigmoid, GaussianScalar, LowerTriangularFactor,
    SigmoidKind,
};
use crate::model::{train_factor, Particle};
use crate::smc::ParticleSet;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictConfig {
    pub sigmoid: SigmoidKind,
    /// Monte Carlo sample count for the logistic sigmoid; ignored by probit.
    pub k_mc: usize,
    /// Whether the test-point variance carries the noise term epsilon.
    pub include_noise: bool,
    /// Seed for the logistic MC draws; prediction stays deterministic.
    pub rng_seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            sigmoid: SigmoidKind::Probit,
            k_mc: 256,
            include_noise: true,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictiveResult {
    /// Per-particle latent conditionals, in particle order.
    pub latent: Option<Vec<GaussianScalar>>,
    pub prob_class1: f64,
    pub label: u8,
}

/// Latent posterior at `x_star` for a single particle, from scratch.
pub fn latent_posterior(
    p: &Particle,
    x_train: &DMatrix<f64>,
    x_star: &[f64],
    include_noise: bool,
) -> Result<GaussianScalar> {
    let factor = train_factor(p, x_train)?;
    let params = transform_params(&p.kernel, &p.theta_u)?;
    let centered = centered_f(p, &factor);
    particle_latent(
        &p.kernel, &params, p.epsilon(), p.beta, &factor, &centered, x_train, x_star,
        include_noise,
    )
}

fn centered_f(p: &Particle, factor: &LowerTriangularFactor) -> DVector<f64> {
    &factor.l * DVector::from_column_slice(&p.eta)
}

#[allow(clippy::too_many_arguments)]
fn particle_latent(
    kernel: &KernelExpression,
    params: &ConstrainedParams,
    epsilon: f64,
    beta: f64,
    factor: &LowerTriangularFactor,
    centered: &DVector<f64>,
    x_train: &DMatrix<f64>,
    x_star: &[f64],
    include_noise: bool,
) -> Result<GaussianScalar> {
    let n = x_train.nrows();
    let mut k_star = DVector::zeros(n);
    for i in 0..n {
        let row: Vec<f64> = x_train.row(i).iter().copied().collect();
        k_star[i] = eval_kernel(kernel, params, &row, x_star)?;
    }
    let mut k_ss = eval_kernel(kernel, params, x_star, x_star)?;
    if include_noise {
        k_ss += epsilon;
    }
    let g = gaussian_conditional(factor, &k_star, k_ss, centered)?;
    Ok(GaussianScalar {
        mean: g.mean + beta,
        variance: g.variance,
    })
}

struct CachedParticle {
    kernel: KernelExpression,
    params: ConstrainedParams,
    epsilon: f64,
    beta: f64,
    factor: LowerTriangularFactor,
    centered: DVector<f64>,
    weight: f64,
}

/// Read-only prediction handle: factors every particle's training Gram once
/// and shares it over all subsequent queries.
pub struct Predictor {
    x_train: DMatrix<f64>,
    particles: Vec<CachedParticle>,
    cfg: PredictConfig,
}

impl Predictor {
    pub fn new(ps: &ParticleSet, x_train: &DMatrix<f64>, cfg: PredictConfig) -> Result<Predictor> {
        if ps.particles.is_empty() {
            return Err(Error::EmptyParticleSet);
        }
        let weights = ps.normalized_weights()?;
        let particles = ps
            .particles
            .iter()
            .zip(weights)
            .map(|(p, w)| {
                if p.eta.len() != x_train.nrows() {
                    return Err(Error::DimensionMismatch(format!(
                        "particle conditioned on {} points, training set has {}",
                        p.eta.len(),
                        x_train.nrows()
                    )));
                }
                let factor = train_factor(p, x_train)?;
                let centered = centered_f(p, &factor);
                Ok(CachedParticle {
                    kernel: p.kernel.clone(),
                    params: transform_params(&p.kernel, &p.theta_u)?,
                    epsilon: p.epsilon(),
                    beta: p.beta,
                    factor,
                    centered,
                    weight: w,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Predictor {
            x_train: x_train.clone(),
            particles,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &PredictConfig {
        &self.cfg
    }

    fn latents(&self, x_star: &[f64]) -> Result<Vec<GaussianScalar>> {
        self.particles
            .iter()
            .map(|c| {
                particle_latent(
                    &c.kernel,
                    &c.params,
                    c.epsilon,
                    c.beta,
                    &c.factor,
                    &c.centered,
                    &self.x_train,
                    x_star,
                    self.cfg.include_noise,
                )
            })
            .collect()
    }

    /// Weighted predictive probability of class 1 at `x_star`: the probit
    /// closed form, or a `k_mc`-sample average for the logistic sigmoid.
    pub fn predict_prob(&self, x_star: &[f64]) -> Result<f64> {
        Ok(self.predict(x_star, false)?.prob_class1)
    }

    pub fn predict(&self, x_star: &[f64], with_latent: bool) -> Result<PredictiveResult> {
        let latents = self.latents(x_star)?;
        let mut prob = 0.0;
        for (c, g) in self.particles.iter().zip(&latents) {
            let tau = match self.cfg.sigmoid {
                SigmoidKind::Probit => probit_predictive(*g),
                SigmoidKind::Logistic => self.logistic_mc(g, x_star),
            };
            prob += c.weight * tau;
        }
        let prob = prob.clamp(0.0, 1.0);
        Ok(PredictiveResult {
            latent: with_latent.then_some(latents),
            prob_class1: prob,
            label: u8::from(prob >= 0.5), // tie goes to class 1
        })
    }

    fn logistic_mc(&self, g: &GaussianScalar, x_star: &[f64]) -> f64 {
        // draws are seeded from the query point so repeated calls agree
        let mut h = self.cfg.rng_seed;
        for &v in x_star {
            h ^= v.to_bits().rotate_left(17);
            h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let sd = g.variance.sqrt();
        let mut acc = 0.0;
        for _ in 0..self.cfg.k_mc {
            let z: f64 = StandardNormal.sample(&mut rng);
            acc += sigmoid(SigmoidKind::Logistic, g.mean + sd * z);
        }
        acc / self.cfg.k_mc as f64
    }

    pub fn predict_batch(&self, x: &DMatrix<f64>, with_latent: bool) -> Result<Vec<PredictiveResult>> {
        (0..x.nrows())
            .map(|i| {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                self.predict(&row, with_latent)
            })
            .collect()
    }

    /// Fraction of test points whose predicted label matches `y_test`.
    pub fn accuracy(&self, x_test: &DMatrix<f64>, y_test: &[u8]) -> Result<f64> {
        if x_test.nrows() != y_test.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} test rows but {} labels",
                x_test.nrows(),
                y_test.len()
            )));
        }
        if y_test.is_empty() {
            return Err(Error::Data("accuracy over an empty test set".into()));
        }
        let preds = self.predict_batch(x_test, false)?;
        let hits = preds
            .iter()
            .zip(y_test)
            .filter(|(p, &y)| p.label == y)
            .count();
        Ok(hits as f64 / y_test.len() as f64)
    }

    /// `resolution x resolution` lattice of class-1 probabilities over a
    /// 2-dimensional box; row-major over (x1, x2).
    pub fn probability_grid(
        &self,
        bounds: [[f64; 2]; 2],
        resolution: usize,
    ) -> Result<Vec<(f64, f64, f64)>> {
        if self.x_train.ncols() != 2 {
            return Err(Error::DimensionMismatch(format!(
                "probability_grid needs 2 features, training data has {}",
                self.x_train.ncols()
            )));
        }
        if resolution < 2 {
            return Err(Error::Config("grid resolution must be at least 2".into()));
        }
        let mut out = Vec::with_capacity(resolution * resolution);
        for i in 0..resolution {
            let x1 = bounds[0][0] + (bounds[0][1] - bounds[0][0]) * i as f64 / (resolution - 1) as f64;
            for j in 0..resolution {
                let x2 =
                    bounds[1][0] + (bounds[1][1] - bounds[1][0]) * j as f64 / (resolution - 1) as f64;
                out.push((x1, x2, self.predict_prob(&[x1, x2])?));
            }
        }
        Ok(out)
    }
}

/// Mean of the per-batch accuracies of an online run.
pub fn online_average_accuracy(per_batch_acc: &[f64]) -> Result<f64> {
    if per_batch_acc.is_empty() {
        return Err(Error::Data(
            "online average accuracy of zero batches is undefined".into(),
        ));
    }
    Ok(per_batch_acc.iter().sum::<f64>() / per_batch_acc.len() as f64)
}

/// One row per test point: `prob_class1,label`.
pub fn write_predictions_csv(
    path: impl AsRef<std::path::Path>,
    preds: &[PredictiveResult],
) -> Result<()> {
    let tmp = path.as_ref().with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        writeln!(f, "prob_class1,label")?;
        for p in preds {
            writeln!(f, "{},{}", p.prob_class1, p.label)?;
        }
    }
    std::fs::rename(&tmp, path.as_ref())?;
    Ok(())
}

/// Grid CSV with `x1,x2,prob` columns.
pub fn write_grid_csv(
    path: impl AsRef<std::path::Path>,
    grid: &[(f64, f64, f64)],
) -> Result<()> {
    let tmp = path.as_ref().with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        writeln!(f, "x1,x2,prob")?;
        for (x1, x2, p) in grid {
            writeln!(f, "{x1},{x2},{p}")?;
        }
    }
    std::fs::rename(&tmp, path.as_ref())?;
    Ok(())
}
