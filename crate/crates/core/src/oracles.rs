//! Independent oracle implementations used to verify the closed-form
//! derivations behind the alignment objective. None of the arithmetic here
//! is shared with the production code paths it checks; transition means,
//! Gaussian log-densities and the direct KL are all written out from
//! scratch.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{cfg_combine, kl_embedding, kl_transition, NoiseSchedule};
use crate::error::{Error, Result};
use crate::math;
use crate::model::{Denoiser, DenoiserModel};

/// One oracle-vs-implementation comparison row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub check: String,
    pub oracle_value: f64,
    pub implementation_value: f64,
    pub tolerance: f64,
    /// Tolerance is relative to |oracle| when true, absolute otherwise.
    pub relative: bool,
    pub sample_count: Option<u64>,
    pub passed: bool,
}

impl OracleReport {
    pub fn evaluate(
        check: impl Into<String>,
        oracle_value: f64,
        implementation_value: f64,
        tolerance: f64,
        relative: bool,
        sample_count: Option<u64>,
    ) -> Self {
        let gap = (implementation_value - oracle_value).abs();
        let passed = if relative {
            gap <= tolerance * oracle_value.abs().max(f64::MIN_POSITIVE)
        } else {
            gap <= tolerance
        };
        OracleReport {
            check: check.into(),
            oracle_value,
            implementation_value,
            tolerance,
            relative,
            sample_count,
            passed,
        }
    }
}

/// Textbook KL between same-covariance isotropic Gaussians:
/// ‖mu_a − mu_b‖² / (2·variance).
pub fn gaussian_kl_direct(mu_a: &[f64], mu_b: &[f64], variance: f64) -> Result<f64> {
    if mu_a.len() != mu_b.len() {
        return Err(Error::Shape(format!(
            "gaussian_kl_direct: {} vs {}",
            mu_a.len(),
            mu_b.len()
        )));
    }
    if !(variance > 0.0) {
        return Err(Error::Config(format!("variance must be > 0, got {variance}")));
    }
    let mut acc = 0.0;
    for (a, b) in mu_a.iter().zip(mu_b) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc / (2.0 * variance))
}

/// The exact noise predictor for isotropic Gaussian data x0 ~ N(mean, v·I):
/// E[ε|x_t] = √(1−ᾱ_t)·(x_t − √ᾱ_t·mean) / (ᾱ_t·v + 1 − ᾱ_t).
///
/// Implements [`Denoiser`] with an empty embedding so it can stand in for a
/// trained model wherever conditioning is irrelevant.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianDenoiser {
    pub mean: Vec<f64>,
    pub variance: f64,
    sched: NoiseSchedule,
    empty: Vec<f64>,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mean: Vec<f64>, variance: f64, sched: NoiseSchedule) -> Result<Self> {
        if !(variance >= 0.0) {
            return Err(Error::Config(format!("data variance must be >= 0, got {variance}")));
        }
        Ok(AnalyticGaussianDenoiser {
            mean,
            variance,
            sched,
            empty: Vec::new(),
        })
    }

    pub fn predict_eps(&self, x: &[f64], t: usize) -> Vec<f64> {
        let ab = self.sched.alpha_bar(t);
        let denom = ab * self.variance + 1.0 - ab;
        let c = (1.0 - ab).sqrt() / denom;
        let sa = ab.sqrt();
        x.iter()
            .zip(&self.mean)
            .map(|(xi, m)| c * (xi - sa * m))
            .collect()
    }

    /// Closed-form posterior mean E[x0|x_t]:
    /// (√ᾱ_t·v·x_t + (1−ᾱ_t)·mean) / (ᾱ_t·v + 1 − ᾱ_t).
    pub fn posterior_mean(&self, x: &[f64], t: usize) -> Vec<f64> {
        let ab = self.sched.alpha_bar(t);
        let denom = ab * self.variance + 1.0 - ab;
        let cx = ab.sqrt() * self.variance / denom;
        let cm = (1.0 - ab) / denom;
        x.iter()
            .zip(&self.mean)
            .map(|(xi, m)| cx * xi + cm * m)
            .collect()
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn data_dim(&self) -> usize {
        self.mean.len()
    }

    fn embed_dim(&self) -> usize {
        0
    }

    fn predict(&self, x: &[f64], t: usize, _embedding: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::Shape(format!(
                "x has dim {}, fixture expects {}",
                x.len(),
                self.mean.len()
            )));
        }
        Ok(self.predict_eps(x, t))
    }

    fn class_embedding(&self, _label: usize) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }

    fn null_embedding(&self) -> &[f64] {
        &self.empty
    }
}

/// Result of the Monte-Carlo joint-KL check: the log-density-ratio estimate
/// (oracle route) against the sum of closed-form local KLs (implementation
/// route), both over the same sampled trajectories, plus the closed-form
/// embedding term on each side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointKlCheck {
    /// Oracle: mean Σ_t log p(x_{t−1}|x_t,φ′)/p(x_{t−1}|x_t,φ) plus the
    /// direct embedding KL.
    pub mc_estimate: f64,
    pub mc_std_err: f64,
    /// Implementation: mean Σ_t kl_transition plus kl_embedding.
    pub local_kl_sum: f64,
    pub local_std_err: f64,
    /// Standard error of the per-trajectory difference (paired).
    pub diff_std_err: f64,
    pub trajectories: u64,
}

impl JointKlCheck {
    /// |oracle − implementation| in units of the paired standard error.
    pub fn sigma_distance(&self) -> f64 {
        let gap = (self.mc_estimate - self.local_kl_sum).abs();
        if self.diff_std_err == 0.0 {
            if gap == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            gap / self.diff_std_err
        }
    }
}

/// Oracle transition mean written in the simplified single-pass form
/// μ̃_t = (x_t − β_t/√(1−ᾱ_t)·ε̃) / √α_t, algebraically equal to the
/// two-coefficient form used by the implementation but arithmetically
/// independent of it.
fn oracle_transition_mean(x: &[f64], eps_tilde: &[f64], sched: &NoiseSchedule, t: usize) -> Vec<f64> {
    let beta = sched.beta(t);
    let alpha = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let c = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    x.iter()
        .zip(eps_tilde)
        .map(|(xi, e)| (xi - c * e) * inv)
        .collect()
}

fn gaussian_log_pdf(x: &[f64], mean: &[f64], variance: f64) -> f64 {
    let d = x.len() as f64;
    let mut quad = 0.0;
    for (xi, mi) in x.iter().zip(mean) {
        let diff = xi - mi;
        quad += diff * diff;
    }
    -0.5 * quad / variance - 0.5 * d * (2.0 * std::f64::consts::PI * variance).ln()
}

/// Monte-Carlo estimate of KL(p(x_{0:T}, φ′) ‖ p(x_{0:T}, φ)) where both
/// chains share p(x_T) and transitions use CFG-combined noise under the
/// respective embedding. Trajectories are sampled under φ′; the estimate is
/// the mean log-density ratio plus the embedding KL. The same trajectories
/// also feed the closed-form local-KL route so the two can be compared with
/// a paired standard error.
#[allow(clippy::too_many_arguments)]
pub fn mc_joint_kl(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    class_label: usize,
    phi_prime: &[f64],
    phi: &[f64],
    guidance_scale: f64,
    sigma_phi_sq: f64,
    trajectories: usize,
    seed: u64,
) -> Result<JointKlCheck> {
    if trajectories == 0 {
        return Err(Error::Config("need at least one trajectory".into()));
    }
    let total = sched.total_steps();
    let d_x = model.config.data_dim;
    let c_emb = model.class_embedding(class_label)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let mut log_ratios = Vec::with_capacity(trajectories);
    let mut local_sums = Vec::with_capacity(trajectories);
    for _ in 0..trajectories {
        let mut x: Vec<f64> = (0..d_x).map(|_| rng.sample(StandardNormal)).collect();
        let mut log_ratio = 0.0;
        let mut local = 0.0;
        for t in (1..=total).rev() {
            let eps_c = model.predict_noise(&x, t, &c_emb)?;
            let eps_up = model.predict_noise(&x, t, phi_prime)?;
            let eps_u = model.predict_noise(&x, t, phi)?;

            // oracle route: own CFG, own mean, own log-densities
            let s = guidance_scale;
            let tilde_p: Vec<f64> = eps_up
                .iter()
                .zip(&eps_c)
                .map(|(u, c)| u + s * (c - u))
                .collect();
            let tilde_o: Vec<f64> = eps_u
                .iter()
                .zip(&eps_c)
                .map(|(u, c)| u + s * (c - u))
                .collect();
            let mu_p = oracle_transition_mean(&x, &tilde_p, sched, t);
            let mu_o = oracle_transition_mean(&x, &tilde_o, sched, t);
            let var = sched.beta(t);
            let x_next: Vec<f64> = mu_p
                .iter()
                .map(|m| m + var.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            log_ratio +=
                gaussian_log_pdf(&x_next, &mu_p, var) - gaussian_log_pdf(&x_next, &mu_o, var);

            // implementation route on the same trajectory
            let tilde_p_impl = cfg_combine(&eps_up, &eps_c, s)?;
            let tilde_o_impl = cfg_combine(&eps_u, &eps_c, s)?;
            local += kl_transition(&tilde_p_impl, &tilde_o_impl, sched, t)?;

            x = x_next;
        }
        log_ratios.push(log_ratio);
        local_sums.push(local);
    }

    let emb_oracle = gaussian_kl_direct(phi_prime, phi, sigma_phi_sq)?;
    let emb_impl = kl_embedding(phi_prime, phi, sigma_phi_sq)?;
    let diffs: Vec<f64> = log_ratios
        .iter()
        .zip(&local_sums)
        .map(|(a, b)| a - b)
        .collect();
    Ok(JointKlCheck {
        mc_estimate: math::mean(&log_ratios) + emb_oracle,
        mc_std_err: math::std_err(&log_ratios),
        local_kl_sum: math::mean(&local_sums) + emb_impl,
        local_std_err: math::std_err(&local_sums),
        diff_std_err: math::std_err(&diffs),
        trajectories: trajectories as u64,
    })
}
