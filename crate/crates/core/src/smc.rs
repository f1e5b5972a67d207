//! The sequential Monte Carlo engine: data/batch tempering, ESS-triggered
//! systematic resampling, and rejuvenation by involutive structure moves
//! plus HMC over the continuous coordinates.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{
    detach_reattach, kernel_log_prior_with_budget, list_subtrees, replace_subtree,
    sample_kernel_with_budget, ChildSide, KernelExpression, PcfgConfig,
};
use crate::math::{bernoulli_log_lik, ess_from_log, log_sum_exp, systematic_resample};
use crate::model::{
    extend_aux, grad_log_joint_continuous, latent_f, log_joint, sample_prior,
    sample_prior_with_kernel, std_normal_lp, ModelConfig, Particle,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub mass: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            step_size: 0.02,
            leapfrog_steps: 20,
            mass: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructureMoveProbs {
    pub subtree_replace: f64,
    pub detach_attach: f64,
}

impl Default for StructureMoveProbs {
    fn default() -> Self {
        StructureMoveProbs {
            subtree_replace: 0.5,
            detach_attach: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmcConfig {
    pub num_particles: usize,
    pub n_reju: usize,
    pub ess_threshold_frac: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub hmc: HmcConfig,
    #[serde(default)]
    pub structure_move_probs: StructureMoveProbs,
    pub rng_seed: u64,
    /// When set, every particle carries this structure and structure moves
    /// are disabled.
    #[serde(default)]
    pub fixed_kernel: Option<KernelExpression>,
}

impl Default for SmcConfig {
    fn default() -> Self {
        SmcConfig {
            num_particles: 8,
            n_reju: 3,
            ess_threshold_frac: 0.5,
            batch_size: 1,
            hmc: HmcConfig::default(),
            structure_move_probs: StructureMoveProbs::default(),
            rng_seed: 0,
            fixed_kernel: None,
        }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_particles == 0 {
            return Err(Error::Config("num_particles must be positive".into()));
        }
        if !(self.ess_threshold_frac > 0.0 && self.ess_threshold_frac <= 1.0) {
            return Err(Error::Config("ess_threshold_frac must lie in (0,1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.hmc.step_size >= 0.0 && self.hmc.mass > 0.0) {
            return Err(Error::Config(
                "hmc step_size must be nonnegative and mass positive".into(),
            ));
        }
        let probs = &self.structure_move_probs;
        if probs.subtree_replace < 0.0
            || probs.detach_attach < 0.0
            || (probs.subtree_replace + probs.detach_attach - 1.0).abs() > 1e-12
        {
            return Err(Error::Config(
                "structure_move_probs must be nonnegative and sum to 1".into(),
            ));
        }
        Ok(())
    }
}

/// How data reaches the sampler: a pre-batched offline pass or a stream of
/// arrival batches. Both share the same absorb path; the distinction only
/// matters to the harness (ordering and evaluation cadence).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmcMode {
    OfflineBatched,
    OnlineStream,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
    /// Data points conditioned on so far; every eta has this length.
    pub absorbed: usize,
    /// Running sum of log mean incremental weights.
    pub log_marginal_estimate: f64,
}

impl ParticleSet {
    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        let lws: Vec<f64> = self.particles.iter().map(|p| p.log_weight).collect();
        let lse = log_sum_exp(&lws);
        if !lse.is_finite() {
            return Err(Error::ParticleDegeneracy);
        }
        Ok(lws.iter().map(|lw| (lw - lse).exp()).collect())
    }

    pub fn save_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let tmp = path.as_ref().with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(&tmp, path.as_ref())?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<ParticleSet> {
        let bytes = std::fs::read(path.as_ref())?;
        let ps: ParticleSet = serde_json::from_slice(&bytes)?;
        if ps.particles.is_empty() {
            return Err(Error::EmptyParticleSet);
        }
        for p in &ps.particles {
            if p.eta.len() != ps.absorbed {
                return Err(Error::Data(format!(
                    "checkpoint particle carries {} latents for {} absorbed points",
                    p.eta.len(),
                    ps.absorbed
                )));
            }
        }
        Ok(ps)
    }
}

/// Per-step JSON diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub ess: f64,
    pub resampled: bool,
    pub structure_accept_rate: f64,
    pub hmc_accept_rate: f64,
    pub hmc_divergences: usize,
    pub structures: Vec<String>,
    pub log_weights: Vec<f64>,
}

// Distinct salts keep the per-purpose random streams independent.
const SALT_INIT: u64 = 0x1;
const SALT_EXTEND: u64 = 0x2;
const SALT_RESAMPLE: u64 = 0x3;
const SALT_REJU: u64 = 0x4;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream per (seed, particle, step, purpose); determinism holds
/// regardless of the order particles are processed in.
fn stream_rng(seed: u64, particle: usize, step: usize, salt: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed ^ salt);
    h = splitmix64(h ^ particle as u64);
    h = splitmix64(h ^ step as u64);
    ChaCha8Rng::seed_from_u64(h)
}

/// Incremental sampler state. The harness drives it one batch at a time so
/// online runs can evaluate between arrivals; [`run_smc`] wraps the whole
/// loop for offline use.
pub struct SmcRun {
    pub pcfg: PcfgConfig,
    pub model: ModelConfig,
    pub cfg: SmcConfig,
    ps: ParticleSet,
    x_seen: DMatrix<f64>,
    y_seen: Vec<u8>,
    step: usize,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl SmcRun {
    pub fn new(dim: usize, pcfg: PcfgConfig, model: ModelConfig, cfg: SmcConfig) -> Result<SmcRun> {
        pcfg.validate()?;
        model.validate()?;
        cfg.validate()?;
        let particles = (0..cfg.num_particles)
            .map(|i| {
                let mut rng = stream_rng(cfg.rng_seed, i, 0, SALT_INIT);
                match &cfg.fixed_kernel {
                    Some(k) => sample_prior_with_kernel(k.clone(), &model, 0, &mut rng),
                    None => sample_prior(&pcfg, &model, 0, &mut rng),
                }
            })
            .collect();
        Ok(SmcRun {
            pcfg,
            model,
            cfg,
            ps: ParticleSet {
                particles,
                absorbed: 0,
                log_marginal_estimate: 0.0,
            },
            x_seen: DMatrix::zeros(0, dim),
            y_seen: Vec::new(),
            step: 0,
            diagnostics: Vec::new(),
        })
    }

    pub fn particle_set(&self) -> &ParticleSet {
        &self.ps
    }

    pub fn into_particle_set(self) -> ParticleSet {
        self.ps
    }

    pub fn seen(&self) -> (&DMatrix<f64>, &[u8]) {
        (&self.x_seen, &self.y_seen)
    }

    /// Absorbs one batch: extend + reweight, conditional resample (skipped
    /// when `is_final`), then `n_reju` rejuvenation sweeps per particle.
    pub fn absorb(
        &mut self,
        x_batch: &DMatrix<f64>,
        y_batch: &[u8],
        is_final: bool,
    ) -> Result<&StepDiagnostics> {
        if x_batch.nrows() != y_batch.len() {
            return Err(Error::DimensionMismatch(format!(
                "batch has {} feature rows but {} labels",
                x_batch.nrows(),
                y_batch.len()
            )));
        }
        if x_batch.ncols() != self.x_seen.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "batch has {} features, run expects {}",
                x_batch.ncols(),
                self.x_seen.ncols()
            )));
        }
        self.step += 1;
        let old_n = self.y_seen.len();
        let m = x_batch.nrows();

        let mut x_new = DMatrix::zeros(old_n + m, self.x_seen.ncols());
        x_new.rows_mut(0, old_n).copy_from(&self.x_seen);
        x_new.rows_mut(old_n, m).copy_from(x_batch);
        self.x_seen = x_new;
        self.y_seen.extend_from_slice(y_batch);

        let lse_before = log_sum_exp(
            &self
                .ps
                .particles
                .iter()
                .map(|p| p.log_weight)
                .collect::<Vec<_>>(),
        );

        for i in 0..self.ps.particles.len() {
            let mut rng = stream_rng(self.cfg.rng_seed, i, self.step, SALT_EXTEND);
            let extended = extend_aux(&self.ps.particles[i], m, &mut rng);
            let inc =
                reweight_increment_conditional(&extended, &self.x_seen, &self.y_seen, old_n, &self.model);
            let mut p = extended;
            match inc {
                Ok(v) if v.is_finite() => p.log_weight += v,
                _ => p.log_weight = f64::NEG_INFINITY,
            }
            self.ps.particles[i] = p;
        }
        self.ps.absorbed = self.y_seen.len();

        let log_weights: Vec<f64> = self.ps.particles.iter().map(|p| p.log_weight).collect();
        let lse_after = log_sum_exp(&log_weights);
        if !lse_after.is_finite() {
            return Err(Error::ParticleDegeneracy);
        }
        self.ps.log_marginal_estimate += lse_after - lse_before;

        let ess = ess_from_log(&log_weights);
        let threshold = self.cfg.ess_threshold_frac * self.cfg.num_particles as f64;
        let resampled = !is_final && ess < threshold;
        if resampled {
            let max_lw = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = log_weights
                .iter()
                .map(|&lw| if lw.is_finite() { (lw - max_lw).exp() } else { 0.0 })
                .collect();
            let mut rng = stream_rng(self.cfg.rng_seed, 0, self.step, SALT_RESAMPLE);
            let ancestors = systematic_resample(&weights, self.cfg.num_particles, &mut rng);
            let mean_lw = lse_after - (self.cfg.num_particles as f64).ln();
            self.ps.particles = ancestors
                .iter()
                .map(|&a| {
                    let mut p = self.ps.particles[a].clone();
                    p.log_weight = mean_lw;
                    p
                })
                .collect();
        }

        let mut structure_accepts = 0usize;
        let mut structure_proposals = 0usize;
        let mut hmc_accepts = 0usize;
        let mut hmc_proposals = 0usize;
        let mut divergences = 0usize;
        for i in 0..self.ps.particles.len() {
            let mut rng = stream_rng(self.cfg.rng_seed, i, self.step, SALT_REJU);
            let mut p = self.ps.particles[i].clone();
            for _ in 0..self.cfg.n_reju {
                if self.cfg.fixed_kernel.is_none() {
                    let (q, accepted) = imcmc_structure_step(
                        &p,
                        &self.x_seen,
                        &self.y_seen,
                        &self.pcfg,
                        &self.model,
                        &self.cfg,
                        &mut rng,
                    );
                    p = q;
                    structure_proposals += 1;
                    structure_accepts += usize::from(accepted);
                }
                let out = hmc_step(&p, &self.x_seen, &self.y_seen, &self.model, &self.cfg.hmc, &mut rng);
                p = out.particle;
                hmc_proposals += 1;
                hmc_accepts += usize::from(out.accepted);
                divergences += usize::from(out.diverged);
            }
            self.ps.particles[i] = p;
        }

        let diag = StepDiagnostics {
            step: self.step,
            ess,
            resampled,
            structure_accept_rate: ratio(structure_accepts, structure_proposals),
            hmc_accept_rate: ratio(hmc_accepts, hmc_proposals),
            hmc_divergences: divergences,
            structures: self
                .ps
                .particles
                .iter()
                .map(|p| p.kernel.to_string())
                .collect(),
            log_weights: self.ps.particles.iter().map(|p| p.log_weight).collect(),
        };
        self.diagnostics.push(diag);
        Ok(self.diagnostics.last().expect("just pushed"))
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

/// Runs the whole tempering schedule over `x`/`y` split into consecutive
/// `cfg.batch_size` batches.
pub fn run_smc(
    x: &DMatrix<f64>,
    y: &[u8],
    pcfg: PcfgConfig,
    model: ModelConfig,
    cfg: SmcConfig,
    _mode: SmcMode,
) -> Result<(ParticleSet, Vec<StepDiagnostics>)> {
    let batch_size = cfg.batch_size;
    let mut run = SmcRun::new(x.ncols(), pcfg, model, cfg)?;
    let n = y.len();
    let mut start = 0;
    while start < n {
        let m = batch_size.min(n - start);
        let xb = x.rows(start, m).into_owned();
        run.absorb(&xb, &y[start..start + m], start + m == n)?;
        start += m;
    }
    Ok((run.ps, run.diagnostics))
}

/// Weight increment in conditional form: the log-likelihood of the new
/// batch given the extended latent. Valid because extending the dataset
/// leaves the leading Cholesky block — hence the old latents — unchanged.
pub fn reweight_increment_conditional(
    p: &Particle,
    x_full: &DMatrix<f64>,
    y_full: &[u8],
    new_from: usize,
    model: &ModelConfig,
) -> Result<f64> {
    if new_from == y_full.len() {
        return Ok(0.0);
    }
    let f = latent_f(p, x_full)?;
    Ok((new_from..y_full.len())
        .map(|i| bernoulli_log_lik(model.sigmoid, f[i], y_full[i]))
        .sum())
}

/// The same increment in ratio form: joint at the extended data minus joint
/// at the prefix minus the prior density of the appended latents.
pub fn reweight_increment_ratio(
    p: &Particle,
    x_full: &DMatrix<f64>,
    y_full: &[u8],
    new_from: usize,
    pcfg: &PcfgConfig,
    model: &ModelConfig,
) -> Result<f64> {
    let joint_full = log_joint(p, x_full, y_full, pcfg, model)?;
    let mut prefix = p.clone();
    prefix.eta.truncate(new_from);
    let x_prefix = x_full.rows(0, new_from).into_owned();
    let joint_prefix = log_joint(&prefix, &x_prefix, &y_full[..new_from], pcfg, model)?;
    let eta_prior: f64 = p.eta[new_from..].iter().map(|&z| std_normal_lp(z)).sum();
    Ok(joint_full - joint_prefix - eta_prior)
}

// ---------------------------------------------------------------------------
// Involutive structure moves
// ---------------------------------------------------------------------------

/// Log-probability of entering the Subtree-Replace machinery from structure
/// `k`: Detach-Attach falls back to it on leaf-only trees.
fn subtree_replace_type_lp(k: &KernelExpression, probs: &StructureMoveProbs) -> f64 {
    if k.depth() == 1 {
        0.0 // subtree_replace + detach_attach fallback = 1
    } else {
        probs.subtree_replace.ln()
    }
}

/// One structure MH step; the continuous auxiliaries psi are held fixed and
/// rejection returns the particle untouched.
pub fn imcmc_structure_step<R: Rng + ?Sized>(
    p: &Particle,
    x: &DMatrix<f64>,
    y: &[u8],
    pcfg: &PcfgConfig,
    model: &ModelConfig,
    cfg: &SmcConfig,
    rng: &mut R,
) -> (Particle, bool) {
    let u: f64 = rng.random();
    let want_detach = u >= cfg.structure_move_probs.subtree_replace;
    if want_detach && p.kernel.depth() > 1 {
        detach_attach_step(p, x, y, pcfg, model, rng)
    } else {
        subtree_replace_step(p, x, y, pcfg, model, &cfg.structure_move_probs, rng)
    }
}

fn subtree_replace_step<R: Rng + ?Sized>(
    p: &Particle,
    x: &DMatrix<f64>,
    y: &[u8],
    pcfg: &PcfgConfig,
    model: &ModelConfig,
    probs: &StructureMoveProbs,
    rng: &mut R,
) -> (Particle, bool) {
    let paths = list_subtrees(&p.kernel);
    let path = &paths[rng.random_range(0..paths.len())];
    let budget = pcfg.max_depth - path.len();
    let new_sub = sample_kernel_with_budget(pcfg, budget, rng);
    let old_sub = p.kernel.subtree_at(path).expect("listed path").clone();

    let (new_kernel, remap) = match replace_subtree(&p.kernel, path, &new_sub, pcfg.max_depth) {
        Ok(v) => v,
        Err(_) => return (p.clone(), false),
    };
    let mut fresh_vals = Vec::new();
    let theta_new = remap.apply(&p.theta_u, || {
        let z: f64 = StandardNormal.sample(rng);
        fresh_vals.push(z);
        z
    });

    // old-subtree parameter slots are exactly those not carried by the remap
    let survivors: std::collections::HashSet<usize> =
        remap.map.iter().filter_map(|s| *s).collect();
    let removed_lp: f64 = (0..p.theta_u.len())
        .filter(|i| !survivors.contains(i))
        .map(|i| std_normal_lp(p.theta_u[i]))
        .sum();
    let fresh_lp: f64 = fresh_vals.iter().map(|&z| std_normal_lp(z)).sum();

    let mut proposal = p.clone();
    proposal.kernel = new_kernel;
    proposal.theta_u = theta_new;

    let (lj_old, lj_new) = match (
        log_joint(p, x, y, pcfg, model),
        log_joint(&proposal, x, y, pcfg, model),
    ) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return (p.clone(), false),
    };

    // reverse move re-selects the same location in the proposed tree and
    // regenerates the old subtree with the old parameters
    let n_locs_old = paths.len() as f64;
    let n_locs_new = list_subtrees(&proposal.kernel).len() as f64;
    let gen_old = kernel_log_prior_with_budget(&old_sub, pcfg, budget).expect("depth-valid");
    let gen_new = kernel_log_prior_with_budget(&new_sub, pcfg, budget).expect("depth-valid");

    let log_fwd = subtree_replace_type_lp(&p.kernel, probs) - n_locs_old.ln() + gen_new + fresh_lp;
    let log_rev =
        subtree_replace_type_lp(&proposal.kernel, probs) - n_locs_new.ln() + gen_old + removed_lp;

    let log_alpha = (lj_new - lj_old) + log_rev - log_fwd;
    accept(p, proposal, log_alpha, rng)
}

fn detach_attach_step<R: Rng + ?Sized>(
    p: &Particle,
    x: &DMatrix<f64>,
    y: &[u8],
    pcfg: &PcfgConfig,
    model: &ModelConfig,
    rng: &mut R,
) -> (Particle, bool) {
    let paths = list_subtrees(&p.kernel);
    // any non-root node can be detached
    let detach_path = &paths[rng.random_range(1..paths.len())];
    let detached_size = list_subtrees(p.kernel.subtree_at(detach_path).expect("listed")).len();
    // the reduced tree loses the detached subtree and its parent node
    let reduced_size = paths.len() - detached_size - 1;
    let attach_idx = rng.random_range(0..reduced_size);
    let attach_side = if rng.random::<f64>() < 0.5 {
        ChildSide::Left
    } else {
        ChildSide::Right
    };

    // enumerate the reduced tree's locations through a throwaway surgery
    let reduced = match remove_subtree(&p.kernel, detach_path) {
        Ok(r) => r,
        Err(_) => return (p.clone(), false),
    };
    let attach_path = list_subtrees(&reduced)[attach_idx].clone();

    let (new_kernel, remap) = match detach_reattach(
        &p.kernel,
        detach_path,
        &attach_path,
        attach_side,
        pcfg.max_depth,
    ) {
        Ok(v) => v,
        Err(_) => return (p.clone(), false), // depth violation
    };
    let theta_new = remap.apply(&p.theta_u, || unreachable!("detach-attach adds no leaves"));

    let mut proposal = p.clone();
    proposal.kernel = new_kernel;
    proposal.theta_u = theta_new;

    let (lj_old, lj_new) = match (
        log_joint(p, x, y, pcfg, model),
        log_joint(&proposal, x, y, pcfg, model),
    ) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return (p.clone(), false),
    };

    // node counts and the reduced tree are shared by the forward and reverse
    // triples, so the proposal terms cancel; computed explicitly regardless
    let fwd = -((paths.len() - 1) as f64).ln() - (reduced_size as f64).ln() - 2f64.ln();
    let rev_detach_count = list_subtrees(&proposal.kernel).len() - 1;
    let rev = -(rev_detach_count as f64).ln() - (reduced_size as f64).ln() - 2f64.ln();

    let log_alpha = (lj_new - lj_old) + rev - fwd;
    accept(p, proposal, log_alpha, rng)
}

/// The reduced tree after detaching `path` (sibling promoted); parameters
/// are irrelevant here, only the shape is needed for location counting.
fn remove_subtree(k: &KernelExpression, path: &[ChildSide]) -> Result<KernelExpression> {
    let (parent_path, last) = path.split_at(path.len() - 1);
    let parent = k.subtree_at(parent_path)?;
    let sibling = match (parent, last[0]) {
        (KernelExpression::Composite { right, .. }, ChildSide::Left) => (**right).clone(),
        (KernelExpression::Composite { left, .. }, ChildSide::Right) => (**left).clone(),
        (KernelExpression::Leaf(_), _) => return Err(Error::InvalidPath(path.to_vec())),
    };
    if parent_path.is_empty() {
        return Ok(sibling);
    }
    replace_subtree(k, parent_path, &sibling, usize::MAX).map(|(e, _)| e)
}

fn accept<R: Rng + ?Sized>(
    current: &Particle,
    proposal: Particle,
    log_alpha: f64,
    rng: &mut R,
) -> (Particle, bool) {
    if log_alpha.is_nan() {
        return (current.clone(), false);
    }
    let alpha = log_alpha.min(0.0);
    let u: f64 = rng.random();
    if u.ln() < alpha {
        (proposal, true)
    } else {
        (current.clone(), false)
    }
}

// ---------------------------------------------------------------------------
// HMC over the continuous coordinates
// ---------------------------------------------------------------------------

pub struct HmcOutcome {
    pub particle: Particle,
    pub accepted: bool,
    pub diverged: bool,
    /// `H(proposal) - H(current)`; NaN when a divergence aborted the
    /// trajectory before both endpoints were evaluated.
    pub delta_h: f64,
}

fn diverged_outcome(p: &Particle) -> HmcOutcome {
    HmcOutcome {
        particle: p.clone(),
        accepted: false,
        diverged: true,
        delta_h: f64::NAN,
    }
}

fn pack(p: &Particle) -> Vec<f64> {
    let mut z = p.theta_u.clone();
    z.push(p.eps_u);
    z.push(p.beta);
    z.extend_from_slice(&p.eta);
    z
}

fn unpack(template: &Particle, z: &[f64]) -> Particle {
    let d = template.theta_u.len();
    let mut out = template.clone();
    out.theta_u = z[..d].to_vec();
    out.eps_u = z[d];
    out.beta = z[d + 1];
    out.eta = z[d + 2..].to_vec();
    out
}

fn grad_packed(p: &Particle, x: &DMatrix<f64>, y: &[u8], model: &ModelConfig) -> Option<Vec<f64>> {
    let g = grad_log_joint_continuous(p, x, y, model).ok()?;
    let mut v = g.theta_u;
    v.push(g.eps_u);
    v.push(g.beta);
    v.extend_from_slice(&g.eta);
    Some(v)
}

/// One leapfrog HMC step on `(theta_u, eps_u, beta, eta)`; the structure is
/// untouched. Non-finite energies count as divergences and reject.
pub fn hmc_step<R: Rng + ?Sized>(
    p: &Particle,
    x: &DMatrix<f64>,
    y: &[u8],
    model: &ModelConfig,
    hmc: &HmcConfig,
    rng: &mut R,
) -> HmcOutcome {
    // the structure prior is constant over the trajectory and cancels in
    // Delta-H, so the potential omits it
    let logp = |q: &Particle| -> Option<f64> {
        crate::model::log_prior_terms_continuous(q, model)
            .and_then(|lp| crate::model::log_likelihood_terms(q, x, y, model).map(|ll| lp + ll))
            .ok()
            .filter(|v| v.is_finite())
    };

    let z0 = pack(p);
    let dim = z0.len();
    let r0: Vec<f64> = (0..dim)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g * hmc.mass.sqrt()
        })
        .collect();
    let u: f64 = rng.random();

    let lp0 = match logp(p) {
        Some(v) => v,
        None => return diverged_outcome(p),
    };
    let kin = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>() / (2.0 * hmc.mass);
    let h0 = -lp0 + kin(&r0);

    if hmc.step_size == 0.0 || hmc.leapfrog_steps == 0 {
        return HmcOutcome {
            particle: p.clone(),
            accepted: true,
            diverged: false,
            delta_h: 0.0,
        };
    }

    let mut z = z0;
    let mut r = r0;
    let eps = hmc.step_size;
    let mut grad = match grad_packed(p, x, y, model) {
        Some(g) => g,
        None => return diverged_outcome(p),
    };
    for _ in 0..hmc.leapfrog_steps {
        for i in 0..dim {
            r[i] += 0.5 * eps * grad[i];
        }
        for i in 0..dim {
            z[i] += eps * r[i] / hmc.mass;
        }
        let q = unpack(p, &z);
        grad = match grad_packed(&q, x, y, model) {
            Some(g) => g,
            None => return diverged_outcome(p),
        };
        for i in 0..dim {
            r[i] += 0.5 * eps * grad[i];
        }
    }

    let proposal = unpack(p, &z);
    let lp1 = match logp(&proposal) {
        Some(v) => v,
        None => return diverged_outcome(p),
    };
    let h1 = -lp1 + kin(&r);
    if !h1.is_finite() {
        return diverged_outcome(p);
    }
    let delta_h = h1 - h0;
    if u.ln() < -delta_h {
        HmcOutcome {
            particle: proposal,
            accepted: true,
            diverged: false,
            delta_h,
        }
    } else {
        HmcOutcome {
            particle: p.clone(),
            accepted: false,
            diverged: false,
            delta_h,
        }
    }
}

/// `n_reju` sweeps of structure move then HMC; the weight is untouched
/// because both kernels leave the current target invariant.
pub fn rejuvenate<R: Rng + ?Sized>(
    p: &Particle,
    x: &DMatrix<f64>,
    y: &[u8],
    pcfg: &PcfgConfig,
    model: &ModelConfig,
    cfg: &SmcConfig,
    rng: &mut R,
) -> Particle {
    let mut out = p.clone();
    for _ in 0..cfg.n_reju {
        if cfg.fixed_kernel.is_none() {
            out = imcmc_structure_step(&out, x, y, pcfg, model, cfg, rng).0;
        }
        out = hmc_step(&out, x, y, model, &cfg.hmc, rng).particle;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::parse_kernel;
    use crate::math::ess;
    use approx::assert_relative_eq;

    fn small_cfg(seed: u64) -> SmcConfig {
        SmcConfig {
            num_particles: 4,
            n_reju: 1,
            batch_size: 2,
            rng_seed: seed,
            ..Default::default()
        }
    }

    #[test]
    fn zero_batches_returns_prior_with_equal_weights() {
        let (ps, diags) = run_smc(
            &DMatrix::zeros(0, 2),
            &[],
            PcfgConfig::default(),
            ModelConfig::default(),
            small_cfg(7),
            SmcMode::OfflineBatched,
        )
        .unwrap();
        assert!(diags.is_empty());
        assert_eq!(ps.absorbed, 0);
        assert_eq!(ps.log_marginal_estimate, 0.0);
        for p in &ps.particles {
            assert_eq!(p.log_weight, 0.0);
            assert!(p.eta.is_empty());
        }
    }

    #[test]
    fn single_point_weight_is_the_hand_computed_likelihood() {
        let cfg = SmcConfig {
            num_particles: 1,
            n_reju: 0,
            batch_size: 1,
            rng_seed: 3,
            ..Default::default()
        };
        let x = DMatrix::from_row_slice(1, 2, &[0.3, -0.7]);
        let y = [1u8];
        let model = ModelConfig::default();
        let (ps, _) = run_smc(&x, &y, PcfgConfig::default(), model.clone(), cfg, SmcMode::OfflineBatched)
            .unwrap();
        let p = &ps.particles[0];
        // f = sqrt(k(x,x) + eps) * eta + beta, straight from the 1x1 factor
        let params = crate::kernel::transform_params(&p.kernel, &p.theta_u).unwrap();
        let kxx = crate::kernel::eval_kernel(&p.kernel, &params, &[0.3, -0.7], &[0.3, -0.7]).unwrap();
        let f = (kxx + p.epsilon()).sqrt() * p.eta[0] + p.beta;
        assert_relative_eq!(
            p.log_weight,
            bernoulli_log_lik(model.sigmoid, f, 1),
            max_relative = 1e-12
        );
        assert_relative_eq!(ps.log_marginal_estimate, p.log_weight);
    }

    #[test]
    fn same_seed_runs_are_byte_identical() {
        let x = DMatrix::from_fn(6, 2, |i, j| ((i * 2 + j) as f64).sin());
        let y = [0u8, 1, 1, 0, 1, 0];
        let go = || {
            run_smc(
                &x,
                &y,
                PcfgConfig::default(),
                ModelConfig::default(),
                small_cfg(11),
                SmcMode::OfflineBatched,
            )
            .unwrap()
            .0
        };
        let a = serde_json::to_string(&go()).unwrap();
        let b = serde_json::to_string(&go()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn offline_batch_size_one_equals_streaming() {
        let x = DMatrix::from_fn(5, 2, |i, j| ((i + 3 * j) as f64).cos());
        let y = [1u8, 0, 1, 1, 0];
        let cfg = SmcConfig {
            num_particles: 3,
            n_reju: 2,
            batch_size: 1,
            rng_seed: 5,
            ..Default::default()
        };
        let (offline, _) = run_smc(
            &x,
            &y,
            PcfgConfig::default(),
            ModelConfig::default(),
            cfg.clone(),
            SmcMode::OfflineBatched,
        )
        .unwrap();
        let mut stream =
            SmcRun::new(2, PcfgConfig::default(), ModelConfig::default(), cfg).unwrap();
        for i in 0..5 {
            let xb = x.rows(i, 1).into_owned();
            stream.absorb(&xb, &y[i..=i], i == 4).unwrap();
        }
        assert_eq!(
            serde_json::to_string(&offline).unwrap(),
            serde_json::to_string(stream.particle_set()).unwrap()
        );
    }

    #[test]
    fn reweight_forms_agree() {
        let pcfg = PcfgConfig::default();
        let model = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let p = sample_prior(&pcfg, &model, 5, &mut rng);
            let x = DMatrix::from_fn(5, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let y: Vec<u8> = (0..5).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect();
            let a = reweight_increment_conditional(&p, &x, &y, 2, &model).unwrap();
            let b = reweight_increment_ratio(&p, &x, &y, 2, &pcfg, &model).unwrap();
            assert!((a - b).abs() < 1e-8, "conditional {a} vs ratio {b}");
        }
    }

    #[test]
    fn reweight_empty_batch_is_zero() {
        let pcfg = PcfgConfig::default();
        let model = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = sample_prior(&pcfg, &model, 3, &mut rng);
        let x = DMatrix::from_fn(3, 1, |_, _| rng.random::<f64>());
        let y = [0u8, 1, 0];
        assert_eq!(
            reweight_increment_conditional(&p, &x, &y, 3, &model).unwrap(),
            0.0
        );
    }

    #[test]
    fn resampling_resets_weights_to_mean_and_preserves_sum() {
        // force degeneracy with an extreme batch so the ESS trigger fires
        let cfg = SmcConfig {
            num_particles: 6,
            n_reju: 0,
            batch_size: 3,
            ess_threshold_frac: 1.0, // always resample when not final
            rng_seed: 9,
            ..Default::default()
        };
        let x = DMatrix::from_fn(6, 1, |i, _| i as f64 / 3.0);
        let y = [0u8, 1, 0, 1, 0, 1];
        let (ps, diags) = run_smc(
            &x,
            &y,
            PcfgConfig::default(),
            ModelConfig::default(),
            cfg,
            SmcMode::OfflineBatched,
        )
        .unwrap();
        assert!(diags[0].resampled);
        assert!(!diags[1].resampled, "final step never resamples");
        // after the first (resampled) step all weights were equal
        let lws = &diags[0].log_weights;
        for lw in lws {
            assert_relative_eq!(*lw, lws[0]);
        }
        assert!(ps.log_marginal_estimate.is_finite());
    }

    #[test]
    fn prior_recovery_of_base_kernel_tags() {
        let pcfg = PcfgConfig::default();
        let cfg = SmcConfig {
            num_particles: 2000,
            n_reju: 0,
            rng_seed: 123,
            ..Default::default()
        };
        let run = SmcRun::new(2, pcfg.clone(), ModelConfig::default(), cfg).unwrap();
        let mut counts = [0usize; 3];
        let mut total = 0usize;
        for p in &run.particle_set().particles {
            for kind in p.kernel.leaf_kinds() {
                let idx = crate::kernel::BaseKernelKind::ALL
                    .iter()
                    .position(|k| *k == kind)
                    .unwrap();
                counts[idx] += 1;
                total += 1;
            }
        }
        // uniform base weights: chi-square with 2 dof, critical value at
        // p = 0.01 is 9.21
        let expected = total as f64 / 3.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 9.21, "chi2 = {chi2}, counts {counts:?}");
    }

    fn fixture(seed: u64, n: usize) -> (Particle, DMatrix<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = sample_prior(&PcfgConfig::default(), &ModelConfig::default(), n, &mut rng);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let y = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect();
        (p, x, y)
    }

    #[test]
    fn hmc_zero_step_size_is_identity_and_accepted() {
        let (p, x, y) = fixture(31, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hmc = HmcConfig {
            step_size: 0.0,
            ..Default::default()
        };
        let out = hmc_step(&p, &x, &y, &ModelConfig::default(), &hmc, &mut rng);
        assert!(out.accepted);
        assert!(!out.diverged);
        assert_eq!(out.delta_h, 0.0);
        assert_eq!(out.particle, p);
    }

    #[test]
    fn hmc_conserves_energy_at_tiny_step_size() {
        let (p, x, y) = fixture(32, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hmc = HmcConfig {
            step_size: 1e-4,
            leapfrog_steps: 20,
            mass: 1.0,
        };
        let out = hmc_step(&p, &x, &y, &ModelConfig::default(), &hmc, &mut rng);
        assert!(out.delta_h.abs() < 1e-4, "|dH| = {}", out.delta_h.abs());
        assert!(out.accepted);
    }

    #[test]
    fn hmc_rejection_keeps_particle_bit_identical() {
        let (p, x, y) = fixture(33, 5);
        let model = ModelConfig::default();
        // oversized steps reject often
        let hmc = HmcConfig {
            step_size: 2.5,
            leapfrog_steps: 10,
            mass: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut saw_rejection = false;
        for _ in 0..50 {
            let out = hmc_step(&p, &x, &y, &model, &hmc, &mut rng);
            if !out.accepted {
                saw_rejection = true;
                assert_eq!(out.particle, p);
            }
        }
        assert!(saw_rejection);
    }

    #[test]
    fn structure_step_respects_grammar_and_rejection_identity() {
        let pcfg = PcfgConfig::default();
        let model = ModelConfig::default();
        let cfg = small_cfg(0);
        let (mut p, x, y) = fixture(34, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut accepts = 0;
        for _ in 0..300 {
            let (q, accepted) = imcmc_structure_step(&p, &x, &y, &pcfg, &model, &cfg, &mut rng);
            if accepted {
                accepts += 1;
            } else {
                assert_eq!(q, p);
            }
            assert!(q.kernel.depth() <= pcfg.max_depth);
            assert_eq!(q.theta_u.len(), q.kernel.param_dim());
            assert_eq!(q.log_weight, p.log_weight);
            assert_eq!(q.eta, p.eta);
            assert_eq!(q.beta, p.beta);
            p = q;
        }
        assert!(accepts > 0, "chain never moved");
    }

    #[test]
    fn detach_attach_falls_back_to_replace_on_leaves() {
        let pcfg = PcfgConfig::default();
        let model = ModelConfig::default();
        let mut cfg = small_cfg(0);
        cfg.structure_move_probs = StructureMoveProbs {
            subtree_replace: 0.0,
            detach_attach: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = sample_prior_with_kernel(
            parse_kernel("SE").unwrap(),
            &model,
            3,
            &mut rng,
        );
        let x = DMatrix::from_fn(3, 2, |_, _| rng.random::<f64>());
        let y = vec![0u8, 1, 0];
        let mut changed = false;
        for _ in 0..200 {
            let (q, _) = imcmc_structure_step(&p, &x, &y, &pcfg, &model, &cfg, &mut rng);
            if q.kernel != p.kernel {
                changed = true;
            }
            p = q;
        }
        assert!(changed, "leaf-only fallback never proposed a new structure");
    }

    #[test]
    fn rejuvenate_preserves_weight() {
        let pcfg = PcfgConfig::default();
        let model = ModelConfig::default();
        let cfg = small_cfg(0);
        let (mut p, x, y) = fixture(35, 4);
        p.log_weight = -3.25;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = rejuvenate(&p, &x, &y, &pcfg, &model, &cfg, &mut rng);
        assert_eq!(q.log_weight, -3.25);
    }

    #[test]
    fn fixed_kernel_mode_never_changes_structure() {
        let mut cfg = small_cfg(17);
        cfg.fixed_kernel = Some(parse_kernel("(LIN + SE)").unwrap());
        let x = DMatrix::from_fn(6, 2, |i, j| ((i + j) as f64).sin());
        let y = [0u8, 1, 0, 1, 1, 0];
        let (ps, _) = run_smc(
            &x,
            &y,
            PcfgConfig::default(),
            ModelConfig::default(),
            cfg,
            SmcMode::OfflineBatched,
        )
        .unwrap();
        for p in &ps.particles {
            assert_eq!(p.kernel.to_string(), "(LIN + SE)");
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let x = DMatrix::from_fn(4, 2, |i, j| (i as f64) - (j as f64));
        let y = [0u8, 1, 1, 0];
        let (ps, _) = run_smc(
            &x,
            &y,
            PcfgConfig::default(),
            ModelConfig::default(),
            small_cfg(2),
            SmcMode::OfflineBatched,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        ps.save_json(&path).unwrap();
        let loaded = ParticleSet::load_json(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&ps).unwrap(),
            serde_json::to_string(&loaded).unwrap()
        );
    }

    #[test]
    fn ess_reported_matches_definition() {
        let x = DMatrix::from_fn(4, 1, |i, _| i as f64);
        let y = [0u8, 1, 0, 1];
        let cfg = SmcConfig {
            num_particles: 5,
            n_reju: 0,
            batch_size: 4,
            rng_seed: 13,
            ..Default::default()
        };
        let (ps, diags) = run_smc(
            &x,
            &y,
            PcfgConfig::default(),
            ModelConfig::default(),
            cfg,
            SmcMode::OfflineBatched,
        )
        .unwrap();
        let w: Vec<f64> = ps.particles.iter().map(|p| p.log_weight.exp()).collect();
        assert_relative_eq!(diags[0].ess, ess(&w), max_relative = 1e-9);
    }
}
