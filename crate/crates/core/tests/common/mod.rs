//! Shared oracles for the acceptance suite, chiefly a brute-force
//! grid-quadrature integrator for the tiny two-point posterior.

use gpc_smc::kernel::{eval_kernel, transform_params, BaseKernelKind, KernelExpression};
use gpc_smc::math::bernoulli_log_lik;
use gpc_smc::math::SigmoidKind;
use gpc_smc::model::ModelConfig;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

fn std_normal_lp(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Quadrature result for one leaf structure on a two-point dataset.
pub struct LeafQuadrature {
    /// Unnormalized marginal mass over the continuous coordinates (grid
    /// cell volume divided out only up to a structure-independent factor).
    pub mass: f64,
    /// Posterior mean of beta within this structure.
    pub beta_mean: f64,
}

/// Integrates exp(log joint) over (theta_u, eps_u, beta, eta1, eta2) on a
/// tensor grid. Valid only for leaf structures and exactly two data points;
/// everything here is independent of the sampler implementation.
pub fn leaf_quadrature(
    kind: BaseKernelKind,
    x: [&[f64]; 2],
    y: [u8; 2],
    model: &ModelConfig,
) -> LeafQuadrature {
    let kernel = KernelExpression::Leaf(kind);
    let q = kernel.param_dim();
    assert!(q <= 2);

    let theta_pts = grid(-4.0, 4.0, 15);
    // InverseGamma(1,1) keeps a heavy right tail in log space
    let eps_pts = grid(-5.0, 8.0, 21);
    let psi_pts = grid(-4.5, 4.5, 15);

    let mut mass = 0.0f64;
    let mut beta_acc = 0.0f64;

    let theta_grid: Vec<Vec<f64>> = if q == 1 {
        theta_pts.iter().map(|&a| vec![a]).collect()
    } else {
        theta_pts
            .iter()
            .flat_map(|&a| theta_pts.iter().map(move |&b| vec![a, b]))
            .collect()
    };

    for theta_u in &theta_grid {
        let params = transform_params(&kernel, theta_u).unwrap();
        let k11 = eval_kernel(&kernel, &params, x[0], x[0]).unwrap();
        let k12 = eval_kernel(&kernel, &params, x[0], x[1]).unwrap();
        let k22 = eval_kernel(&kernel, &params, x[1], x[1]).unwrap();
        let theta_lp: f64 = theta_u.iter().map(|&z| std_normal_lp(z)).sum();
        for &eps_u in &eps_pts {
            let eps = eps_u.exp();
            // 2x2 Cholesky of K + eps I
            let l11 = (k11 + eps).sqrt();
            let l21 = k12 / l11;
            let d = k22 + eps - l21 * l21;
            if d <= 0.0 {
                continue;
            }
            let l22 = d.sqrt();
            let outer_lp = theta_lp + model.noise_log_prior(eps_u);
            for &beta in &psi_pts {
                let beta_lp = std_normal_lp(beta);
                for &e1 in &psi_pts {
                    let f1 = l11 * e1 + beta;
                    let lp1 = bernoulli_log_lik(SigmoidKind::Probit, f1, y[0])
                        + std_normal_lp(e1);
                    for &e2 in &psi_pts {
                        let f2 = l21 * e1 + l22 * e2 + beta;
                        let lp = outer_lp
                            + beta_lp
                            + lp1
                            + std_normal_lp(e2)
                            + bernoulli_log_lik(SigmoidKind::Probit, f2, y[1]);
                        let w = lp.exp();
                        mass += w;
                        beta_acc += beta * w;
                    }
                }
            }
        }
    }

    // grids share spacing across structures except theta dimensionality;
    // scale by the theta cell width so 1- and 2-parameter leaves compare
    let d_theta = theta_pts[1] - theta_pts[0];
    let volume = d_theta.powi(q as i32);
    LeafQuadrature {
        mass: mass * volume,
        beta_mean: beta_acc / mass,
    }
}
