//! Closed-form diffusion mathematics: noise schedules, forward diffusion,
//! reverse transitions, posterior-mean (Tweedie) estimation, classifier-free
//! guidance, and the closed-form KL terms used by the alignment objective.
//!
//! Timesteps are indexed t ∈ {1..T}. By convention ᾱ_0 = 1, so the final
//! reverse step (t = 1) is deterministic. The reverse transition variance is
//! σ_t² = β_t, which makes the closed-form transition KL exact (see
//! [`kl_transition`]).

use crate::error::{Error, Result};
use crate::math;

/// β/α/ᾱ sequences and derived coefficients for all diffusion math.
///
/// All vectors have length `total_steps`; index `i` holds the value for
/// timestep `t = i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    total_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    transition_variances: Vec<f64>,
}

impl NoiseSchedule {
    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// β_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        self.check_t(t);
        self.betas[t - 1]
    }

    /// α_t = 1 − β_t for t in 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        self.check_t(t);
        self.alphas[t - 1]
    }

    /// ᾱ_t = Π_{i≤t} α_i for t in 0..=T, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.total_steps, "t={} out of range 0..={}", t, self.total_steps);
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Reverse transition variance σ_t² = β_t.
    pub fn transition_variance(&self, t: usize) -> f64 {
        self.check_t(t);
        self.transition_variances[t - 1]
    }

    pub fn transition_std(&self, t: usize) -> f64 {
        self.transition_variance(t).sqrt()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_t(&self, t: usize) {
        assert!(
            t >= 1 && t <= self.total_steps,
            "t={} out of range 1..={}",
            t,
            self.total_steps
        );
    }
}

/// A latent vector together with its timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Vec<f64>,
    pub t: usize,
}

impl LatentState {
    pub fn new(x: Vec<f64>, t: usize) -> Self {
        LatentState { x, t }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// Classifier-free guidance scale.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
}

impl GuidanceConfig {
    pub fn new(scale: f64) -> Result<Self> {
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::Config(format!(
                "guidance scale must be finite and >= 0, got {scale}"
            )));
        }
        Ok(GuidanceConfig { scale })
    }
}

/// Builds a linear β schedule from `beta_start` to `beta_end` inclusive and
/// derives α, ᾱ and the transition variances.
pub fn build_schedule(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas: Vec<f64> = if total_steps == 1 {
        vec![beta_start]
    } else {
        (0..total_steps)
            .map(|i| {
                beta_start + (beta_end - beta_start) * i as f64 / (total_steps - 1) as f64
            })
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(total_steps);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    let transition_variances = betas.clone();
    Ok(NoiseSchedule {
        total_steps,
        betas,
        alphas,
        alpha_bars,
        transition_variances,
    })
}

fn check_dims(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{what}: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// q(x_t | x_0): returns √ᾱ_t·x0 + √(1−ᾱ_t)·eps at timestep t.
pub fn forward_diffuse(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
) -> Result<LatentState> {
    check_dims(x0, eps, "forward_diffuse x0 vs eps")?;
    if t > sched.total_steps() {
        return Err(Error::Timestep(format!(
            "t={t} > T={}",
            sched.total_steps()
        )));
    }
    let ab = sched.alpha_bar(t);
    let c0 = ab.sqrt();
    let c1 = (1.0 - ab).sqrt();
    let x = x0
        .iter()
        .zip(eps)
        .map(|(x, e)| c0 * x + c1 * e)
        .collect();
    Ok(LatentState::new(x, t))
}

/// Classifier-free guidance: eps_uncond + s·(eps_cond − eps_uncond).
pub fn cfg_combine(eps_uncond: &[f64], eps_cond: &[f64], s: f64) -> Result<Vec<f64>> {
    check_dims(eps_uncond, eps_cond, "cfg_combine")?;
    Ok(eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(u, c)| u + s * (c - u))
        .collect())
}

/// Posterior-mean estimate of the clean sample:
/// (x_t − √(1−ᾱ_t)·eps_tilde) / √ᾱ_t.
pub fn tweedie_x0(state: &LatentState, eps_tilde: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dims(&state.x, eps_tilde, "tweedie_x0")?;
    if state.t < 1 || state.t > sched.total_steps() {
        return Err(Error::Timestep(format!(
            "tweedie_x0 needs 1 <= t <= T, got t={}",
            state.t
        )));
    }
    let ab = sched.alpha_bar(state.t);
    if ab <= 0.0 {
        return Err(Error::DegenerateSchedule(format!(
            "alpha_bar({}) = {ab}",
            state.t
        )));
    }
    let inv = 1.0 / ab.sqrt();
    let c = (1.0 - ab).sqrt();
    Ok(state
        .x
        .iter()
        .zip(eps_tilde)
        .map(|(x, e)| (x - c * e) * inv)
        .collect())
}

/// Mean of the reverse transition p(x_{t−1} | x_t):
/// (√ᾱ_{t−1}·β_t/(1−ᾱ_t))·x0_hat + (√α_t·(1−ᾱ_{t−1})/(1−ᾱ_t))·x_t.
pub fn transition_mean(
    state: &LatentState,
    x0_hat: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_dims(&state.x, x0_hat, "transition_mean")?;
    let t = state.t;
    if t < 1 || t > sched.total_steps() {
        return Err(Error::Timestep(format!(
            "transition_mean needs 1 <= t <= T, got t={t}"
        )));
    }
    let (c0, c1) = transition_coeffs(sched, t);
    Ok(state
        .x
        .iter()
        .zip(x0_hat)
        .map(|(x, x0)| c0 * x0 + c1 * x)
        .collect())
}

/// Coefficients (on x̂0 and on x_t) of the reverse-transition mean.
pub fn transition_coeffs(sched: &NoiseSchedule, t: usize) -> (f64, f64) {
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    let alpha = sched.alpha(t);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let c1 = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    (c0, c1)
}

/// One reverse step: transition_mean(x_t, tweedie_x0(x_t, eps_tilde)) + σ_t·noise,
/// landing at timestep t−1. The caller supplies `noise` (zero at t = 1 by
/// convention, which makes the last step deterministic).
pub fn ddpm_step(
    state: &LatentState,
    eps_tilde: &[f64],
    noise: &[f64],
    sched: &NoiseSchedule,
) -> Result<LatentState> {
    check_dims(&state.x, noise, "ddpm_step noise")?;
    let x0_hat = tweedie_x0(state, eps_tilde, sched)?;
    let mean = transition_mean(state, &x0_hat, sched)?;
    let sigma = sched.transition_std(state.t);
    let x = mean
        .iter()
        .zip(noise)
        .map(|(m, n)| m + sigma * n)
        .collect();
    Ok(LatentState::new(x, state.t - 1))
}

/// Closed-form KL between two same-variance reverse transitions expressed in
/// noise space: ((1−α_t)/(2·α_t·(1−ᾱ_t)))·‖eps_a − eps_b‖².
pub fn kl_transition(
    eps_a: &[f64],
    eps_b: &[f64],
    sched: &NoiseSchedule,
    t: usize,
) -> Result<f64> {
    check_dims(eps_a, eps_b, "kl_transition")?;
    if t < 1 || t > sched.total_steps() {
        return Err(Error::Timestep(format!(
            "kl_transition needs 1 <= t <= T, got t={t}"
        )));
    }
    Ok(kl_transition_coeff(sched, t) * math::sum_sq(&math::sub(eps_a, eps_b)))
}

/// The coefficient (1−α_t)/(2·α_t·(1−ᾱ_t)) of the transition KL.
pub fn kl_transition_coeff(sched: &NoiseSchedule, t: usize) -> f64 {
    let alpha = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    (1.0 - alpha) / (2.0 * alpha * (1.0 - ab))
}

/// KL between isotropic Gaussians centred at the two embeddings:
/// ‖phi_a − phi_b‖² / (2·sigma_phi_sq).
pub fn kl_embedding(phi_a: &[f64], phi_b: &[f64], sigma_phi_sq: f64) -> Result<f64> {
    check_dims(phi_a, phi_b, "kl_embedding")?;
    if !(sigma_phi_sq > 0.0) {
        return Err(Error::Config(format!(
            "sigma_phi_sq must be > 0, got {sigma_phi_sq}"
        )));
    }
    Ok(math::sum_sq(&math::sub(phi_a, phi_b)) / (2.0 * sigma_phi_sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn draw(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha(1), 0.5);
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn two_step_alpha_bar() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_strictly_decreasing_and_consistent() {
        let s = build_schedule(100, 1e-4, 0.02).unwrap();
        for t in 1..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            // ᾱ_t / ᾱ_{t−1} = α_t to machine precision
            let ratio = s.alpha_bar(t) / s.alpha_bar(t - 1);
            assert!((ratio - s.alpha(t)).abs() < 1e-15);
            assert_eq!(s.transition_variance(t), s.beta(t));
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
        }
    }

    #[test]
    fn invalid_schedule_params_rejected() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(10, 0.0, 0.2).is_err());
        assert!(build_schedule(10, 0.3, 0.2).is_err());
        assert!(build_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_matches_hand_values() {
        // ᾱ_2 = 0.72 with β = (0.1, 0.2)
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        let out = forward_diffuse(&[1.0, 0.0], 2, &[0.0, 1.0], &s).unwrap();
        assert!((out.x[0] - 0.84853).abs() < 1e-5);
        assert!((out.x[1] - 0.52915).abs() < 1e-5);
        assert_eq!(out.t, 2);
    }

    #[test]
    fn forward_diffuse_identity_and_zero_noise() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        // t = 0 convention: ᾱ_0 = 1 so output = x0
        let out = forward_diffuse(&[1.5, -2.0], 0, &[3.0, 4.0], &s).unwrap();
        assert_eq!(out.x, vec![1.5, -2.0]);
        // zero noise: output = √ᾱ_t·x0
        let out = forward_diffuse(&[1.0, 2.0], 2, &[0.0, 0.0], &s).unwrap();
        let c = s.alpha_bar(2).sqrt();
        assert_eq!(out.x, vec![c, 2.0 * c]);
    }

    #[test]
    fn forward_diffuse_shape_error() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        assert!(forward_diffuse(&[1.0], 1, &[1.0, 2.0], &s).is_err());
    }

    #[test]
    fn cfg_endpoints_and_hand_value() {
        let u = [0.0, 0.0];
        let c = [1.0, 2.0];
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(cfg_combine(&u, &c, 7.5).unwrap(), vec![7.5, 15.0]);
    }

    #[test]
    fn cfg_affine_in_scale() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let u = draw(&mut rng, 5);
        let c = draw(&mut rng, 5);
        let (s1, s2) = (0.5, 4.0);
        let mid = cfg_combine(&u, &c, (s1 + s2) / 2.0).unwrap();
        let a = cfg_combine(&u, &c, s1).unwrap();
        let b = cfg_combine(&u, &c, s2).unwrap();
        for i in 0..5 {
            assert!((mid[i] - 0.5 * (a[i] + b[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn tweedie_hand_value() {
        // ᾱ_1 = 0.25 via β_1 = 0.75
        let s = build_schedule(1, 0.75, 0.75).unwrap();
        let st = LatentState::new(vec![1.0], 1);
        let out = tweedie_x0(&st, &[0.5], &s).unwrap();
        assert!((out[0] - 1.1339746).abs() < 1e-6);
    }

    #[test]
    fn tweedie_inverts_forward() {
        let s = build_schedule(50, 1e-3, 0.1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for t in [1usize, 7, 25, 50] {
            let x0 = draw(&mut rng, 3);
            let eps = draw(&mut rng, 3);
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            let rec = tweedie_x0(&xt, &eps, &s).unwrap();
            for i in 0..3 {
                assert!(
                    (rec[i] - x0[i]).abs() <= 1e-12 * x0[i].abs().max(1.0),
                    "t={t} i={i}: {} vs {}",
                    rec[i],
                    x0[i]
                );
            }
        }
    }

    #[test]
    fn transition_mean_reductions() {
        // T = 1: ᾱ_0 = 1 so the coefficients reduce to (1, 0) and mean = x̂0.
        let s = build_schedule(1, 0.3, 0.3).unwrap();
        let st = LatentState::new(vec![2.0, -1.0], 1);
        let mean = transition_mean(&st, &[5.0, 7.0], &s).unwrap();
        assert!((mean[0] - 5.0).abs() < 1e-14);
        assert!((mean[1] - 7.0).abs() < 1e-14);

        // β_t → 0 with x̂0 = x_t: the mean collapses to x_t.
        let s = build_schedule(2, 1e-6, 0.5).unwrap();
        let st = LatentState::new(vec![2.0, -1.0], 1);
        let mean = transition_mean(&st, &st.x.clone(), &s).unwrap();
        assert!((mean[0] - 2.0).abs() < 1e-8);
        assert!((mean[1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn transition_mean_matches_independent_evaluation() {
        let s = build_schedule(12, 1e-3, 0.3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for t in 1..=12 {
            let x: f64 = rng.sample(StandardNormal);
            let x0: f64 = rng.sample(StandardNormal);
            let got = transition_mean(&LatentState::new(vec![x], t), &[x0], &s).unwrap()[0];
            // straight second evaluation of the same closed form
            let ab_t = s.alpha_bar(t);
            let ab_p = s.alpha_bar(t - 1);
            let want = ab_p.sqrt() * s.beta(t) / (1.0 - ab_t) * x0
                + s.alpha(t).sqrt() * (1.0 - ab_p) / (1.0 - ab_t) * x;
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn transition_mean_rejects_t0() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        let st = LatentState::new(vec![0.0], 0);
        assert!(transition_mean(&st, &[0.0], &s).is_err());
    }

    #[test]
    fn ddpm_step_single_step_returns_x0_hat() {
        let s = build_schedule(1, 0.4, 0.4).unwrap();
        let st = LatentState::new(vec![0.3, -0.8], 1);
        let eps = [0.1, 0.2];
        let x0_hat = tweedie_x0(&st, &eps, &s).unwrap();
        let out = ddpm_step(&st, &eps, &[0.0, 0.0], &s).unwrap();
        assert_eq!(out.t, 0);
        for i in 0..2 {
            assert!((out.x[i] - x0_hat[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn ddpm_step_deterministic_and_zero_noise_is_mean() {
        let s = build_schedule(10, 1e-3, 0.1).unwrap();
        let st = LatentState::new(vec![0.5, 0.7], 4);
        let eps = [0.3, -0.2];
        let a = ddpm_step(&st, &eps, &[0.0, 0.0], &s).unwrap();
        let b = ddpm_step(&st, &eps, &[0.0, 0.0], &s).unwrap();
        assert_eq!(a.x, b.x);
        let x0_hat = tweedie_x0(&st, &eps, &s).unwrap();
        let mean = transition_mean(&st, &x0_hat, &s).unwrap();
        assert_eq!(a.x, mean);
    }

    #[test]
    fn ddpm_step_noise_variance_monte_carlo() {
        let s = build_schedule(10, 1e-3, 0.1).unwrap();
        let t = 6;
        let st = LatentState::new(vec![0.2], t);
        let eps = [0.4];
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 100_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                ddpm_step(&st, &eps, &[z], &s).unwrap().x[0]
            })
            .collect();
        let m = math::mean(&samples);
        let var = samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        let want = s.transition_variance(t);
        assert!(
            (var - want).abs() / want < 0.02,
            "empirical {var} vs σ² {want}"
        );
    }

    #[test]
    fn kl_transition_properties() {
        let s = build_schedule(8, 1e-3, 0.2).unwrap();
        let a = [0.3, -0.1];
        assert_eq!(kl_transition(&a, &a, &s, 3).unwrap(), 0.0);

        let b = [0.5, 0.2];
        let base = kl_transition(&a, &b, &s, 3).unwrap();
        // scaling the difference by 2 quadruples the output
        let b2: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + 2.0 * (y - x)).collect();
        let quad = kl_transition(&a, &b2, &s, 3).unwrap();
        assert!((quad - 4.0 * base).abs() < 1e-12 * quad.abs().max(1.0));
    }

    #[test]
    fn kl_transition_equals_gaussian_kl_of_transition_means() {
        // KL(N(μ̃_a, β_t) ‖ N(μ̃_b, β_t)) = ‖μ̃_a − μ̃_b‖²/(2β_t) must equal the
        // noise-space closed form, for random states and timesteps.
        let s = build_schedule(40, 1e-4, 0.05).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        for _ in 0..1000 {
            let t = rng.random_range(1..=40);
            let x = draw(&mut rng, 3);
            let st = LatentState::new(x, t);
            let ea = draw(&mut rng, 3);
            let eb = draw(&mut rng, 3);
            let mu_a = transition_mean(&st, &tweedie_x0(&st, &ea, &s).unwrap(), &s).unwrap();
            let mu_b = transition_mean(&st, &tweedie_x0(&st, &eb, &s).unwrap(), &s).unwrap();
            let direct = math::sum_sq(&math::sub(&mu_a, &mu_b)) / (2.0 * s.beta(t));
            let closed = kl_transition(&ea, &eb, &s, t).unwrap();
            let rel = (direct - closed).abs() / direct.abs().max(1e-300);
            assert!(rel <= 1e-9, "t={t} rel={rel}");
        }
    }

    #[test]
    fn kl_embedding_values() {
        let a = [0.1, 0.2];
        assert_eq!(kl_embedding(&a, &a, 0.01).unwrap(), 0.0);
        // ‖Δ‖² = 0.02, σ² = 0.01 → 1.0
        let b = [0.1 + 0.1f64, 0.2 + 0.1];
        let kl = kl_embedding(&a, &b, 0.01).unwrap();
        assert!((kl - 1.0).abs() < 1e-12);
        // halving σ² doubles the output
        let kl2 = kl_embedding(&a, &b, 0.005).unwrap();
        assert!((kl2 - 2.0 * kl).abs() < 1e-12);
        assert!(kl_embedding(&a, &b, 0.0).is_err());
    }
}
