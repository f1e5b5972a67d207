//! The probabilistic model targeted by the sampler: priors over structure,
//! parameters and auxiliary variables, the deterministic latent construction
//! `f = L eta + beta`, the Bernoulli likelihood, and the joint log-density
//! with its gradient in the continuous coordinates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::kernel::{
    gram_matrix, gram_with_grad, kernel_log_prior, sample_kernel, transform_params,
    KernelExpression, PcfgConfig,
};
use crate::math::{
    bernoulli_log_lik, bernoulli_log_lik_grad, cholesky_backward, cholesky_with_context,
    LowerTriangularFactor, SigmoidKind,
};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub(crate) fn std_normal_lp(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

/// Model-level choices: the sigmoid family and the noise prior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sigmoid: SigmoidKind,
    /// Shape of the InverseGamma prior on the noise epsilon.
    pub noise_shape: f64,
    /// Scale of the InverseGamma prior on the noise epsilon.
    pub noise_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sigmoid: SigmoidKind::Probit,
            noise_shape: 1.0,
            noise_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_shape <= 0.0 || self.noise_scale <= 0.0 {
            return Err(Error::Config(
                "noise prior shape and scale must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Log-density of the noise prior expressed in the unconstrained
    /// coordinate `eps_u = ln(epsilon)`, Jacobian included:
    /// `InverseGamma(a, b)` on `epsilon` becomes
    /// `a ln b - ln Gamma(a) - a eps_u - b exp(-eps_u)`.
    pub fn noise_log_prior(&self, eps_u: f64) -> f64 {
        let (a, b) = (self.noise_shape, self.noise_scale);
        a * b.ln() - ln_gamma(a) - a * eps_u - b * (-eps_u).exp()
    }

    pub fn noise_log_prior_grad(&self, eps_u: f64) -> f64 {
        let (a, b) = (self.noise_shape, self.noise_scale);
        -a + b * (-eps_u).exp()
    }
}

/// One posterior hypothesis: kernel structure, unconstrained continuous
/// coordinates, and a log-space importance weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub kernel: KernelExpression,
    /// Unconstrained kernel parameters, canonical leaf order.
    pub theta_u: Vec<f64>,
    /// Unconstrained noise; `epsilon = exp(eps_u)`.
    pub eps_u: f64,
    /// Global mean offset.
    pub beta: f64,
    /// Whitened latent coordinates, one per absorbed data point.
    pub eta: Vec<f64>,
    pub log_weight: f64,
}

impl Particle {
    pub fn epsilon(&self) -> f64 {
        self.eps_u.exp()
    }
}

/// Draws a particle from the prior with `n_aux` whitened latents and unit
/// weight.
pub fn sample_prior<R: Rng + ?Sized>(
    pcfg: &PcfgConfig,
    model: &ModelConfig,
    n_aux: usize,
    rng: &mut R,
) -> Particle {
    let kernel = sample_kernel(pcfg, rng);
    sample_prior_with_kernel(kernel, model, n_aux, rng)
}

/// Like [`sample_prior`] but with the structure pinned (fixed-kernel mode).
pub fn sample_prior_with_kernel<R: Rng + ?Sized>(
    kernel: KernelExpression,
    model: &ModelConfig,
    n_aux: usize,
    rng: &mut R,
) -> Particle {
    let theta_u = (0..kernel.param_dim())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let eps_u = sample_noise_unconstrained(model, rng);
    let beta = StandardNormal.sample(rng);
    let eta = (0..n_aux).map(|_| StandardNormal.sample(rng)).collect();
    Particle {
        kernel,
        theta_u,
        eps_u,
        beta,
        eta,
        log_weight: 0.0,
    }
}

/// InverseGamma(a, b) draw via the reciprocal of a Gamma(a, 1/b) variable,
/// returned in log space.
fn sample_noise_unconstrained<R: Rng + ?Sized>(model: &ModelConfig, rng: &mut R) -> f64 {
    let gamma = rand_distr::Gamma::new(model.noise_shape, 1.0 / model.noise_scale)
        .expect("validated noise prior");
    let g: f64 = gamma.sample(rng);
    -(g.ln())
}

/// Appends `m` fresh prior-drawn whitened latents; everything else is
/// untouched.
pub fn extend_aux<R: Rng + ?Sized>(p: &Particle, m: usize, rng: &mut R) -> Particle {
    let mut out = p.clone();
    out.eta
        .extend((0..m).map(|_| -> f64 { StandardNormal.sample(rng) }));
    out
}

/// Training-covariance factor for a particle: `Cholesky(K_theta(X,X) + eps I)`.
pub fn train_factor(p: &Particle, x: &DMatrix<f64>) -> Result<LowerTriangularFactor> {
    let params = transform_params(&p.kernel, &p.theta_u)?;
    let mut k = gram_matrix(&p.kernel, &params, x, x)?;
    let eps = p.epsilon();
    for i in 0..k.nrows() {
        k[(i, i)] += eps;
    }
    cholesky_with_context(&k, &format!("training covariance of {}", p.kernel))
}

/// Deterministic latent construction `f = L eta + beta`.
pub fn latent_f(p: &Particle, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if p.eta.len() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "particle has {} latent coordinates for {} data rows",
            p.eta.len(),
            x.nrows()
        )));
    }
    let factor = train_factor(p, x)?;
    let eta = DVector::from_column_slice(&p.eta);
    Ok(&factor.l * eta + DVector::from_element(x.nrows(), p.beta))
}

/// All prior terms of the joint, separately computable from the likelihood.
pub fn log_prior_terms(p: &Particle, pcfg: &PcfgConfig, model: &ModelConfig) -> Result<f64> {
    Ok(kernel_log_prior(&p.kernel, pcfg)? + log_prior_terms_continuous(p, model)?)
}

/// Prior terms of the continuous coordinates only; the structure prior is
/// excluded (it is constant along any fixed-structure move and cancels).
pub fn log_prior_terms_continuous(p: &Particle, model: &ModelConfig) -> Result<f64> {
    if p.theta_u.len() != p.kernel.param_dim() {
        return Err(Error::ParamLength {
            expected: p.kernel.param_dim(),
            got: p.theta_u.len(),
        });
    }
    let mut lp = p.theta_u.iter().map(|&z| std_normal_lp(z)).sum::<f64>();
    lp += model.noise_log_prior(p.eps_u);
    lp += std_normal_lp(p.beta);
    lp += p.eta.iter().map(|&z| std_normal_lp(z)).sum::<f64>();
    Ok(lp)
}

/// Bernoulli log-likelihood of `y` given the latent construction.
pub fn log_likelihood_terms(
    p: &Particle,
    x: &DMatrix<f64>,
    y: &[u8],
    model: &ModelConfig,
) -> Result<f64> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows but {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Ok(0.0);
    }
    let f = latent_f(p, x)?;
    Ok(y.iter()
        .enumerate()
        .map(|(i, &yi)| bernoulli_log_lik(model.sigmoid, f[i], yi))
        .sum())
}

/// Joint log-density of `(k, theta, eps, beta, eta, y)` at the particle.
pub fn log_joint(
    p: &Particle,
    x: &DMatrix<f64>,
    y: &[u8],
    pcfg: &PcfgConfig,
    model: &ModelConfig,
) -> Result<f64> {
    Ok(log_prior_terms(p, pcfg, model)? + log_likelihood_terms(p, x, y, model)?)
}

/// Gradient of [`log_joint`] over the continuous coordinates, with the
/// structure held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousGrad {
    pub theta_u: Vec<f64>,
    pub eps_u: f64,
    pub beta: f64,
    pub eta: Vec<f64>,
}

impl ContinuousGrad {
    pub fn dim(&self) -> usize {
        self.theta_u.len() + 2 + self.eta.len()
    }
}

/// Analytic gradient of the joint log-density in `(theta_u, eps_u, beta,
/// eta)`. The covariance sensitivities flow through a reverse-mode Cholesky
/// pass, so one O(n^3) sweep covers every parameter.
pub fn grad_log_joint_continuous(
    p: &Particle,
    x: &DMatrix<f64>,
    y: &[u8],
    model: &ModelConfig,
) -> Result<ContinuousGrad> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows but {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if p.eta.len() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "particle has {} latent coordinates for {} data rows",
            p.eta.len(),
            x.nrows()
        )));
    }

    let transforms = p.kernel.transforms();
    let n = x.nrows();

    // prior contributions
    let mut g_theta: Vec<f64> = p.theta_u.iter().map(|&z| -z).collect();
    let mut g_eps = model.noise_log_prior_grad(p.eps_u);
    let mut g_beta = -p.beta;
    let mut g_eta: Vec<f64> = p.eta.iter().map(|&z| -z).collect();

    if n > 0 {
        let params = transform_params(&p.kernel, &p.theta_u)?;
        let (mut k, k_grads) = gram_with_grad(&p.kernel, &params, x)?;
        let eps = p.epsilon();
        for i in 0..n {
            k[(i, i)] += eps;
        }
        let factor = cholesky_with_context(&k, &format!("gradient covariance of {}", p.kernel))?;
        let eta = DVector::from_column_slice(&p.eta);
        let f = &factor.l * &eta + DVector::from_element(n, p.beta);

        // dL/df per data point
        let g: DVector<f64> = DVector::from_fn(n, |i, _| {
            bernoulli_log_lik_grad(model.sigmoid, f[i], y[i])
        });

        g_beta += g.sum();
        let lt_g = factor.l.transpose() * &g;
        for i in 0..n {
            g_eta[i] += lt_g[i];
        }

        // sensitivity to the factor: dL/dL_ij = g_i eta_j on the lower triangle
        let mut l_bar = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                l_bar[(i, j)] = g[i] * p.eta[j];
            }
        }
        let k_bar = cholesky_backward(&factor.l, &l_bar);

        g_eps += eps * k_bar.trace();
        for (q, kg) in k_grads.iter().enumerate() {
            let s = k_bar.zip_fold(kg, 0.0, |acc, a, b| acc + a * b);
            g_theta[q] += transforms[q].derivative(p.theta_u[q]) * s;
        }
    }

    let grad = ContinuousGrad {
        theta_u: g_theta,
        eps_u: g_eps,
        beta: g_beta,
        eta: g_eta,
    };
    let finite = grad.theta_u.iter().all(|v| v.is_finite())
        && grad.eps_u.is_finite()
        && grad.beta.is_finite()
        && grad.eta.iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::Data(format!(
            "non-finite gradient for structure {}",
            p.kernel
        )));
    }
    Ok(grad)
}
