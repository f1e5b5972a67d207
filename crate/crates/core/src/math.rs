//! Kernel-agnostic numerical primitives: Cholesky with jitter escalation,
//! Gaussian conditionals, sigmoids with stable log-likelihoods, the probit
//! closed-form predictive integral, ESS and systematic resampling.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Jitter multipliers tried after a bare factorization fails, scaled by the
/// mean diagonal of the input.
const JITTER_LADDER: [f64; 3] = [1e-8, 1e-6, 1e-4];

static NEG_VARIANCE_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of times a conditional variance was clamped from a tiny negative
/// roundoff value back to zero (process-wide diagnostic).
pub fn negative_variance_clamps() -> u64 {
    NEG_VARIANCE_CLAMPS.load(Ordering::Relaxed)
}

/// Result of a (possibly jittered) Cholesky factorization.
#[derive(Debug, Clone)]
pub struct LowerTriangularFactor {
    pub l: DMatrix<f64>,
    pub jitter_used: f64,
}

impl LowerTriangularFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }
}

/// Factorizes a symmetric matrix, escalating through the jitter ladder on
/// numerical failure. The jitter actually applied is reported, never silent.
pub fn cholesky(m: &DMatrix<f64>) -> Result<LowerTriangularFactor> {
    cholesky_with_context(m, "unnamed matrix")
}

pub fn cholesky_with_context(m: &DMatrix<f64>, context: &str) -> Result<LowerTriangularFactor> {
    let n = m.nrows();
    let diag_mean = {
        let s: f64 = (0..n).map(|i| m[(i, i)]).sum();
        let mean = s / n.max(1) as f64;
        if mean.abs() > 0.0 { mean.abs() } else { 1.0 }
    };
    let mut jitter = 0.0;
    for attempt in 0..=JITTER_LADDER.len() {
        let candidate = if jitter == 0.0 {
            m.clone()
        } else {
            let mut c = m.clone();
            for i in 0..n {
                c[(i, i)] += jitter;
            }
            c
        };
        if let Some(chol) = candidate.cholesky() {
            return Ok(LowerTriangularFactor {
                l: chol.unpack(),
                jitter_used: jitter,
            });
        }
        if attempt < JITTER_LADDER.len() {
            jitter = JITTER_LADDER[attempt] * diag_mean;
        }
    }
    Err(Error::NotPositiveDefinite {
        context: format!("{context} ({n}x{n}, jitter up to {:.1e})", jitter),
    })
}

/// Univariate Gaussian summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianScalar {
    pub mean: f64,
    pub variance: f64,
}

/// Posterior of a test-point latent given training latents, via two
/// triangular solves against the training factor.
///
/// `mean = k_*^T K^{-1} centered_f`, `variance = k_** - k_*^T K^{-1} k_*`.
pub fn gaussian_conditional(
    train_chol: &LowerTriangularFactor,
    k_star: &DVector<f64>,
    k_star_star: f64,
    centered_f: &DVector<f64>,
) -> Result<GaussianScalar> {
    let n = train_chol.dim();
    if k_star.len() != n || centered_f.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "gaussian_conditional: factor is {n}x{n}, k_star has {} entries, centered_f has {}",
            k_star.len(),
            centered_f.len()
        )));
    }
    let v = train_chol
        .l
        .solve_lower_triangular(k_star)
        .ok_or_else(|| Error::NotPositiveDefinite {
            context: "singular Cholesky factor in gaussian_conditional".into(),
        })?;
    let u = train_chol
        .l
        .solve_lower_triangular(centered_f)
        .ok_or_else(|| Error::NotPositiveDefinite {
            context: "singular Cholesky factor in gaussian_conditional".into(),
        })?;
    let mean = v.dot(&u);
    let mut variance = k_star_star - v.norm_squared();
    if variance < 0.0 {
        let tol = 1e-10 * k_star_star.abs().max(1.0);
        if variance < -tol {
            return Err(Error::NegativeVariance(variance));
        }
        NEG_VARIANCE_CLAMPS.fetch_add(1, Ordering::Relaxed);
        variance = 0.0;
    }
    Ok(GaussianScalar { mean, variance })
}

/// Sigmoid family mapping latent values to class probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmoidKind {
    Logistic,
    Probit,
}

pub fn sigmoid(kind: SigmoidKind, t: f64) -> f64 {
    match kind {
        SigmoidKind::Logistic => logistic(t),
        SigmoidKind::Probit => std_normal_cdf(t),
    }
}

fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn std_normal_cdf(t: f64) -> f64 {
    0.5 * erfc(-t * std::f64::consts::FRAC_1_SQRT_2)
}

pub fn std_normal_ln_pdf(t: f64) -> f64 {
    -0.5 * t * t - LN_SQRT_2PI
}

/// log Phi(t), switching to the asymptotic tail expansion for t < -30 where
/// erfc loses all precision.
pub fn log_std_normal_cdf(t: f64) -> f64 {
    if t < -30.0 {
        let t2 = t * t;
        std_normal_ln_pdf(t) - (-t).ln() + (1.0 - 1.0 / t2 + 3.0 / (t2 * t2)).ln()
    } else {
        std_normal_cdf(t).ln()
    }
}

/// Mills-ratio style derivative phi(t)/Phi(t) of log Phi.
pub fn std_normal_pdf_over_cdf(t: f64) -> f64 {
    (std_normal_ln_pdf(t) - log_std_normal_cdf(t)).exp()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Stable Bernoulli log-likelihood `y log sigma(f) + (1-y) log(1-sigma(f))`.
pub fn bernoulli_log_lik(kind: SigmoidKind, f: f64, y: u8) -> f64 {
    let t = if y == 1 { f } else { -f };
    match kind {
        SigmoidKind::Logistic => -softplus(-t),
        SigmoidKind::Probit => log_std_normal_cdf(t),
    }
}

/// d/df of [`bernoulli_log_lik`].
pub fn bernoulli_log_lik_grad(kind: SigmoidKind, f: f64, y: u8) -> f64 {
    let sign = if y == 1 { 1.0 } else { -1.0 };
    let t = sign * f;
    match kind {
        SigmoidKind::Logistic => sign * logistic(-t),
        SigmoidKind::Probit => sign * std_normal_pdf_over_cdf(t),
    }
}

/// Closed form of the probit predictive integral:
/// `E[Phi(f)] = Phi(mean / sqrt(1 + variance))` for `f ~ N(mean, variance)`.
pub fn probit_predictive(g: GaussianScalar) -> f64 {
    std_normal_cdf(g.mean / (1.0 + g.variance).sqrt())
}

/// Effective sample size `(sum w)^2 / sum w^2`; scale invariant.
pub fn ess(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// ESS of log-space weights; entries of `-inf` contribute zero mass.
pub fn ess_from_log(log_weights: &[f64]) -> f64 {
    let m = log_weights
        .iter()
        .copied()
        .filter(|w| w.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return 0.0;
    }
    let w: Vec<f64> = log_weights
        .iter()
        .map(|&lw| if lw.is_finite() { (lw - m).exp() } else { 0.0 })
        .collect();
    ess(&w)
}

pub fn log_sum_exp(log_weights: &[f64]) -> f64 {
    let m = log_weights
        .iter()
        .copied()
        .filter(|w| w.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return f64::NEG_INFINITY;
    }
    let s: f64 = log_weights
        .iter()
        .map(|&lw| if lw.is_finite() { (lw - m).exp() } else { 0.0 })
        .sum();
    m + s.ln()
}

/// Systematic resampling: `m` ancestor indices whose expected counts are
/// `m * w_i / sum(w)`, deterministic given the rng state.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], m: usize, rng: &mut R) -> Vec<usize> {
    assert!(!weights.is_empty());
    let total: f64 = weights.iter().sum();
    assert!(total > 0.0, "systematic_resample needs positive total weight");
    let u0: f64 = rng.random::<f64>() / m as f64;
    let mut ancestors = Vec::with_capacity(m);
    let mut cumulative = weights[0] / total;
    let mut idx = 0;
    for i in 0..m {
        let u = u0 + i as f64 / m as f64;
        while u > cumulative && idx + 1 < weights.len() {
            idx += 1;
            cumulative += weights[idx] / total;
        }
        ancestors.push(idx);
    }
    ancestors
}

/// Reverse-mode sensitivity of a Cholesky factorization: given `l` with
/// `l l^T = K` and the gradient `l_bar` of a scalar objective with respect
/// to the (lower-triangular) factor, returns the symmetric gradient with
/// respect to `K`.
pub fn cholesky_backward(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let s = l.transpose() * l_bar;
    // lower triangle with halved diagonal
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        p[(i, i)] = 0.5 * s[(i, i)];
        for j in 0..i {
            p[(i, j)] = s[(i, j)];
        }
    }
    let a = 0.5 * (&p + p.transpose());
    let y = l
        .tr_solve_lower_triangular(&a)
        .expect("Cholesky factor has positive diagonal");
    let z = l
        .tr_solve_lower_triangular(&y.transpose())
        .expect("Cholesky factor has positive diagonal");
    0.5 * (z.transpose() + z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Distribution;

    #[test]
    fn cholesky_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let f = cholesky(&m).unwrap();
        assert_eq!(f.jitter_used, 0.0);
        assert_relative_eq!(f.l[(0, 0)], 2.0);
        assert_relative_eq!(f.l[(1, 1)], 3.0);
        assert_eq!(f.l[(0, 1)], 0.0);

        let id = DMatrix::<f64>::identity(3, 3);
        let f = cholesky(&id).unwrap();
        assert_eq!(f.jitter_used, 0.0);
        assert_relative_eq!((f.l - id).norm(), 0.0);
    }

    #[test]
    fn cholesky_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let m = &a * a.transpose() + DMatrix::identity(5, 5) * 0.1;
        let f = cholesky(&m).unwrap();
        let rec = &f.l * f.l.transpose();
        assert!((rec - &m).norm() / m.norm() < 1e-10);
    }

    #[test]
    fn cholesky_jitter_escalation() {
        // rank-deficient PSD matrix: needs jitter, must still reconstruct
        let a = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let m = &a * a.transpose();
        let f = cholesky(&m).unwrap();
        assert!(f.jitter_used > 0.0);
        let rec = &f.l * f.l.transpose();
        let jittered = &m + DMatrix::identity(3, 3) * f.jitter_used;
        assert!((rec - &jittered).norm() / jittered.norm() < 1e-8);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -5.0]);
        assert!(matches!(
            cholesky(&m),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn conditional_uncorrelated_and_interpolating() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let f = cholesky(&m).unwrap();
        let g = gaussian_conditional(
            &f,
            &DVector::zeros(2),
            2.5,
            &DVector::from_vec(vec![1.0, -1.0]),
        )
        .unwrap();
        assert_relative_eq!(g.mean, 0.0);
        assert_relative_eq!(g.variance, 2.5);

        let m1 = DMatrix::from_row_slice(1, 1, &[1.0]);
        let f1 = cholesky(&m1).unwrap();
        let c = 0.7;
        let g = gaussian_conditional(
            &f1,
            &DVector::from_vec(vec![1.0]),
            1.0,
            &DVector::from_vec(vec![c]),
        )
        .unwrap();
        assert_relative_eq!(g.mean, c);
        assert_relative_eq!(g.variance, 0.0);
    }

    #[test]
    fn conditional_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let k = &a * a.transpose() + DMatrix::identity(4, 4);
        let f = cholesky(&k).unwrap();
        let k_star = DVector::from_fn(4, |_, _| rng.random::<f64>());
        let cf = DVector::from_fn(4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let k_ss = 3.0;
        let g = gaussian_conditional(&f, &k_star, k_ss, &cf).unwrap();
        let kinv = k.clone().try_inverse().unwrap();
        let mean = (k_star.transpose() * &kinv * &cf)[(0, 0)];
        let var = k_ss - (k_star.transpose() * &kinv * &k_star)[(0, 0)];
        assert_relative_eq!(g.mean, mean, epsilon = 1e-8);
        assert_relative_eq!(g.variance, var, epsilon = 1e-8);
        assert!(g.variance <= k_ss);
    }

    #[test]
    fn sigmoid_values() {
        assert_relative_eq!(sigmoid(SigmoidKind::Logistic, 0.0), 0.5);
        assert_relative_eq!(sigmoid(SigmoidKind::Probit, 0.0), 0.5);
        assert_relative_eq!(sigmoid(SigmoidKind::Logistic, 1e4), 1.0);
        assert_relative_eq!(sigmoid(SigmoidKind::Probit, 50.0), 1.0);
        assert_relative_eq!(sigmoid(SigmoidKind::Logistic, 3.0f64.ln()), 0.75);
    }

    #[test]
    fn log_lik_stable_in_the_tails() {
        for kind in [SigmoidKind::Logistic, SigmoidKind::Probit] {
            for f in [-500.0, -40.0, -5.0, 0.0, 5.0, 40.0, 500.0] {
                for y in [0u8, 1u8] {
                    let ll = bernoulli_log_lik(kind, f, y);
                    assert!(ll.is_finite() && ll <= 0.0, "{kind:?} f={f} y={y} ll={ll}");
                    let g = bernoulli_log_lik_grad(kind, f, y);
                    assert!(g.is_finite());
                }
            }
        }
    }

    #[test]
    fn log_lik_gradient_finite_difference() {
        let h = 1e-6;
        for kind in [SigmoidKind::Logistic, SigmoidKind::Probit] {
            for f in [-8.0, -1.3, 0.0, 0.7, 6.0] {
                for y in [0u8, 1u8] {
                    let g = bernoulli_log_lik_grad(kind, f, y);
                    let fd = (bernoulli_log_lik(kind, f + h, y) - bernoulli_log_lik(kind, f - h, y))
                        / (2.0 * h);
                    assert_relative_eq!(g, fd, max_relative = 1e-5, epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn probit_predictive_symmetry_and_degenerate() {
        assert_relative_eq!(
            probit_predictive(GaussianScalar { mean: 0.0, variance: 7.3 }),
            0.5
        );
        let m = 1.3;
        assert_relative_eq!(
            probit_predictive(GaussianScalar { mean: m, variance: 0.0 }),
            std_normal_cdf(m)
        );
        let g = GaussianScalar { mean: 0.8, variance: 2.1 };
        let neg = GaussianScalar { mean: -0.8, variance: 2.1 };
        assert_relative_eq!(
            probit_predictive(g) + probit_predictive(neg),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn probit_predictive_vs_monte_carlo() {
        let g = GaussianScalar { mean: 1.0, variance: 3.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            let f = g.mean + g.variance.sqrt() * z;
            acc += std_normal_cdf(f);
        }
        let mc = acc / n as f64;
        assert!((probit_predictive(g) - mc).abs() < 0.005);
    }

    #[test]
    fn ess_values() {
        assert_relative_eq!(ess(&[1.0, 1.0, 1.0, 1.0]), 4.0);
        assert_relative_eq!(ess(&[1.0, 0.0, 0.0, 0.0]), 1.0);
        assert_relative_eq!(ess(&[2.0, 2.0, 2.0, 2.0]), 4.0);
    }

    #[test]
    fn systematic_resample_uniform_is_identity_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = vec![1.0; 6];
        let mut anc = systematic_resample(&w, 6, &mut rng);
        anc.sort_unstable();
        assert_eq!(anc, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn systematic_resample_degenerate_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let anc = systematic_resample(&[1.0, 0.0], 4, &mut rng);
        assert_eq!(anc, vec![0, 0, 0, 0]);
    }

    #[test]
    fn systematic_resample_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials = 10_000;
        let mut counts = Vec::with_capacity(trials);
        for _ in 0..trials {
            let anc = systematic_resample(&[3.0, 1.0], 4, &mut rng);
            counts.push(anc.iter().filter(|&&i| i == 0).count() as f64);
        }
        let mean: f64 = counts.iter().sum::<f64>() / trials as f64;
        let var: f64 =
            counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / trials as f64;
        let sigma_mean = (var / trials as f64).sqrt();
        assert!((mean - 3.0).abs() <= 3.0 * sigma_mean + 1e-12);
    }

    #[test]
    fn cholesky_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 4;
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let k = &a * a.transpose() + DMatrix::identity(n, n);
        // arbitrary objective h(K) = sum_ij G_ij * L(K)_ij over the lower part
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                g[(i, j)] = rng.random::<f64>() * 2.0 - 1.0;
            }
        }
        let h = |k: &DMatrix<f64>| -> f64 {
            let l = k.clone().cholesky().unwrap().unpack();
            l.zip_fold(&g, 0.0, |acc, a, b| acc + a * b)
        };
        let l = k.clone().cholesky().unwrap().unpack();
        let k_bar = cholesky_backward(&l, &g);
        let eps = 1e-6;
        for i in 0..n {
            for j in 0..=i {
                let mut kp = k.clone();
                let mut km = k.clone();
                kp[(i, j)] += eps;
                km[(i, j)] -= eps;
                if i != j {
                    kp[(j, i)] += eps;
                    km[(j, i)] -= eps;
                }
                let fd = (h(&kp) - h(&km)) / (2.0 * eps);
                let analytic = if i == j {
                    k_bar[(i, i)]
                } else {
                    k_bar[(i, j)] + k_bar[(j, i)]
                };
                assert_relative_eq!(analytic, fd, max_relative = 1e-4, epsilon = 1e-7);
            }
        }
    }
}
