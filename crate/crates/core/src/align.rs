//! Test-time alignment by optimising the null embedding.
//!
//! At every reverse timestep the unconditional embedding φ′ is updated by a
//! few ascent steps on a per-step objective
//!
//!   J(φ′) = λ1·R(x̂0(x_t, φ′))
//!         − λ̃_{2,t}·KL(transition under φ′ ‖ transition under φ)
//!         − λ̃_{2,t}·KL(embedding prior at φ′ ‖ at φ),
//!
//! where both KL terms are the closed forms from [`crate::diffusion`] and
//! the regulariser compares CFG-combined noise predictions against the
//! frozen original embedding φ. The regularisation weight anneals towards
//! zero early in denoising while the inner-step count grows, both driven by
//! one growth rate γ. After the update, K candidate next-latents are drawn
//! from the transition under φ′ and the one whose Tweedie estimate scores
//! highest is kept (greedy particle filtering).
//!
//! φ′ and the optimiser moment buffers persist across timesteps; the frozen
//! φ is never mutated.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    cfg_combine, ddpm_step, kl_embedding, kl_transition, kl_transition_coeff, tweedie_x0,
    LatentState, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::grad::{zo_gradient_with_rng, GradientMode, Tape};
use crate::math;
use crate::model::{Denoiser, DenoiserModel};
use crate::optim::Adam;
use crate::rewards::RewardSpec;

/// All alignment hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    /// Reward weight λ1.
    pub lambda1: f64,
    /// Base regularisation weight λ2 (annealed per timestep).
    pub lambda2: f64,
    /// Embedding-prior variance σ_φ².
    pub sigma_phi_sq: f64,
    /// Annealing growth rate γ.
    pub gamma: f64,
    /// Inner-step bounds.
    pub n_min: usize,
    pub n_max: usize,
    /// Particle count K.
    pub particles: usize,
    /// CFG guidance scale s.
    pub guidance_scale: f64,
    /// Learning rate η of the embedding optimiser.
    pub learning_rate: f64,
    pub grad_mode: GradientMode,
    pub seed: u64,
    /// Debug flag: reinitialise φ′ and the optimiser at every timestep
    /// instead of letting them persist.
    pub reinit_per_timestep: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            lambda1: 2.0,
            lambda2: 0.002,
            sigma_phi_sq: 0.01,
            gamma: 0.008,
            n_min: 5,
            n_max: 25,
            particles: 3,
            guidance_scale: 2.0,
            learning_rate: 0.01,
            grad_mode: GradientMode::Analytic,
            seed: 0,
            reinit_per_timestep: false,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_min > self.n_max {
            return Err(Error::Config(format!(
                "n_min ({}) must be <= n_max ({})",
                self.n_min, self.n_max
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda1 and lambda2 must be >= 0".into()));
        }
        if !(self.sigma_phi_sq > 0.0) {
            return Err(Error::Config(format!(
                "sigma_phi_sq must be > 0, got {}",
                self.sigma_phi_sq
            )));
        }
        if self.particles == 0 {
            return Err(Error::Config("particle count must be >= 1".into()));
        }
        crate::diffusion::GuidanceConfig::new(self.guidance_scale)?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        self.grad_mode.validate()
    }
}

/// λ2 · max(2 − (1+γ)^{T−t}, 0): full weight at t = T, zero once
/// (1+γ)^{T−t} passes 2.
pub fn anneal_lambda2(t: usize, total_steps: usize, gamma: f64, lambda2: f64) -> f64 {
    debug_assert!(t <= total_steps);
    let coeff = (2.0 - (1.0 + gamma).powi((total_steps - t) as i32)).max(0.0);
    lambda2 * coeff
}

/// n_min + floor(min((1+γ)^{T−t} − 1, 1) · (n_max − n_min)); grows from
/// n_min at t = T to n_max once (1+γ)^{T−t} reaches 2.
pub fn inner_steps(t: usize, total_steps: usize, gamma: f64, n_min: usize, n_max: usize) -> usize {
    debug_assert!(t <= total_steps);
    let lam = ((1.0 + gamma).powi((total_steps - t) as i32) - 1.0).min(1.0);
    n_min + (lam * (n_max - n_min) as f64).floor() as usize
}

/// The objective value and its three (weighted) terms:
/// objective = reward_term − transition_kl_term − embedding_kl_term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub objective: f64,
    pub reward_term: f64,
    pub transition_kl_term: f64,
    pub embedding_kl_term: f64,
}

/// Quantities at (x_t, t) that do not depend on φ′: the conditional noise
/// prediction and the frozen-embedding CFG noise. Computing one costs two
/// denoiser forwards.
pub struct StepCache {
    pub eps_cond: Vec<f64>,
    pub eps_orig: Vec<f64>,
    pub tilde_orig: Vec<f64>,
}

impl StepCache {
    pub fn new(
        model: &DenoiserModel,
        latent: &LatentState,
        class_label: usize,
        phi: &[f64],
        guidance_scale: f64,
    ) -> Result<Self> {
        let c_emb = model.class_embedding(class_label)?;
        let eps_cond = model.predict_noise(&latent.x, latent.t, &c_emb)?;
        let eps_orig = model.predict_noise(&latent.x, latent.t, phi)?;
        let tilde_orig = cfg_combine(&eps_orig, &eps_cond, guidance_scale)?;
        Ok(StepCache {
            eps_cond,
            eps_orig,
            tilde_orig,
        })
    }
}

/// State carried across the reverse trajectory of one alignment run.
pub struct AlignmentState {
    pub latent: LatentState,
    pub phi_prime: Vec<f64>,
    phi: Vec<f64>,
    pub lambda2_t: f64,
    optimizer: Adam,
    pub denoiser_evals: u64,
    pub reward_evals: u64,
}

impl AlignmentState {
    pub fn new(latent: LatentState, phi: Vec<f64>, learning_rate: f64) -> Self {
        let dim = phi.len();
        AlignmentState {
            latent,
            phi_prime: phi.clone(),
            phi,
            lambda2_t: 0.0,
            optimizer: Adam::new(learning_rate, dim),
            denoiser_evals: 0,
            reward_evals: 0,
        }
    }

    /// The frozen original embedding.
    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn phi_drift(&self) -> f64 {
        math::norm(&math::sub(&self.phi_prime, &self.phi))
    }

    fn reinit(&mut self) {
        self.phi_prime = self.phi.clone();
        self.optimizer.reset();
    }
}

/// Evaluates the per-step objective at an arbitrary candidate embedding,
/// reusing the cached frozen-embedding quantities. One denoiser forward and
/// one reward evaluation.
#[allow(clippy::too_many_arguments)]
pub fn alignment_objective_cached(
    model: &DenoiserModel,
    latent: &LatentState,
    sched: &NoiseSchedule,
    candidate_phi: &[f64],
    phi: &[f64],
    lambda1: f64,
    lambda2_t: f64,
    sigma_phi_sq: f64,
    guidance_scale: f64,
    reward: &RewardSpec,
    cache: &StepCache,
) -> Result<ObjectiveTerms> {
    let eps_u = model.predict_noise(&latent.x, latent.t, candidate_phi)?;
    let tilde = cfg_combine(&eps_u, &cache.eps_cond, guidance_scale)?;
    let x0_hat = tweedie_x0(latent, &tilde, sched)?;
    let reward_term = lambda1 * reward.evaluate(&x0_hat);
    let transition_kl_term =
        lambda2_t * kl_transition(&tilde, &cache.tilde_orig, sched, latent.t)?;
    let embedding_kl_term = lambda2_t * kl_embedding(candidate_phi, phi, sigma_phi_sq)?;
    Ok(ObjectiveTerms {
        objective: reward_term - transition_kl_term - embedding_kl_term,
        reward_term,
        transition_kl_term,
        embedding_kl_term,
    })
}

/// The per-timestep objective J and its term breakdown, with λ̃_{2,t}
/// supplied by the caller (see [`anneal_lambda2`]).
pub fn alignment_objective(
    model: &DenoiserModel,
    latent: &LatentState,
    sched: &NoiseSchedule,
    class_label: usize,
    phi_prime: &[f64],
    phi: &[f64],
    lambda2_t: f64,
    config: &AlignmentConfig,
    reward: &RewardSpec,
) -> Result<ObjectiveTerms> {
    let cache = StepCache::new(model, latent, class_label, phi, config.guidance_scale)?;
    alignment_objective_cached(
        model,
        latent,
        sched,
        phi_prime,
        phi,
        config.lambda1,
        lambda2_t,
        config.sigma_phi_sq,
        config.guidance_scale,
        reward,
        &cache,
    )
}

/// The objective terms and the exact reverse-mode gradient ∂J/∂φ′ at one
/// timestep, with the frozen-embedding quantities supplied by the caller.
#[allow(clippy::too_many_arguments)]
pub fn alignment_gradient(
    model: &DenoiserModel,
    latent: &LatentState,
    sched: &NoiseSchedule,
    class_label: usize,
    phi_prime: &[f64],
    phi: &[f64],
    lambda2_t: f64,
    config: &AlignmentConfig,
    reward: &RewardSpec,
) -> Result<(ObjectiveTerms, Vec<f64>)> {
    let cache = StepCache::new(model, latent, class_label, phi, config.guidance_scale)?;
    objective_terms_tape(
        model,
        latent,
        sched,
        phi_prime,
        phi,
        config.lambda1,
        lambda2_t,
        config.sigma_phi_sq,
        config.guidance_scale,
        reward,
        &cache,
    )
}

/// Builds the objective on a tape and returns (J, terms). The backward sweep
/// through the single φ′-dependent denoiser pass costs one backward
/// denoiser-equivalent.
#[allow(clippy::too_many_arguments)]
fn objective_terms_tape(
    model: &DenoiserModel,
    latent: &LatentState,
    sched: &NoiseSchedule,
    phi_prime: &[f64],
    phi: &[f64],
    lambda1: f64,
    lambda2_t: f64,
    sigma_phi_sq: f64,
    guidance_scale: f64,
    reward: &RewardSpec,
    cache: &StepCache,
) -> Result<(ObjectiveTerms, Vec<f64>)> {
    let t = latent.t;
    let s = guidance_scale;
    let ab = sched.alpha_bar(t);
    let mut tape = Tape::new();
    let phi_var = tape.leaf(phi_prime.to_vec());
    let x_var = tape.constant(latent.x.clone());
    let eps_u = model.predict_noise_tape(&mut tape, x_var, t, phi_var);
    // ε̃ = ε_u + s·(ε_c − ε_u), in the same evaluation order as cfg_combine
    // so that φ′ = φ gives a difference of exactly zero against the cache
    let eps_c = tape.constant(cache.eps_cond.clone());
    let diff = tape.sub(eps_c, eps_u);
    let sdiff = tape.scale(diff, s);
    let tilde = tape.add(eps_u, sdiff);
    // x̂0 = (x_t − √(1−ᾱ)·ε̃)/√ᾱ
    let x0_hat = tape.scale_shift(
        tilde,
        -(1.0 - ab).sqrt() / ab.sqrt(),
        math::scale(&latent.x, 1.0 / ab.sqrt()),
    );
    let r = reward.tape_eval(&mut tape, x0_hat)?;
    let reward_term = tape.scale(r, lambda1);
    let tilde_orig = tape.constant(cache.tilde_orig.clone());
    let d_eps = tape.sub(tilde, tilde_orig);
    let d_eps_sq = tape.sum_sq(d_eps);
    let trans_term = tape.scale(d_eps_sq, lambda2_t * kl_transition_coeff(sched, t));
    let phi_const = tape.constant(phi.to_vec());
    let d_phi = tape.sub(phi_var, phi_const);
    let d_phi_sq = tape.sum_sq(d_phi);
    let emb_term = tape.scale(d_phi_sq, lambda2_t / (2.0 * sigma_phi_sq));
    let j = tape.sub(reward_term, trans_term);
    let j = tape.sub(j, emb_term);

    let terms = ObjectiveTerms {
        objective: tape.scalar(j),
        reward_term: tape.scalar(reward_term),
        transition_kl_term: tape.scalar(trans_term),
        embedding_kl_term: tape.scalar(emb_term),
    };
    let grad = tape.gradient(j, phi_var);
    Ok((terms, grad))
}

/// Runs `n_steps` ascent updates of φ′ on the current timestep's objective.
/// Returns the objective terms evaluated at the start of every inner step.
///
/// Denoiser-eval cost per inner step: 2 in analytic mode (forward +
/// backward), `num_samples + 1` forwards in zeroth-order mode. Reward-eval
/// cost: 1 and `num_samples + 1` respectively.
pub fn optimize_null(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    state: &mut AlignmentState,
    config: &AlignmentConfig,
    reward: &RewardSpec,
    cache: &StepCache,
    n_steps: usize,
    zo_rng: &mut ChaCha12Rng,
) -> Result<Vec<ObjectiveTerms>> {
    let t = state.latent.t;
    let mut trace = Vec::with_capacity(n_steps);
    for inner in 0..n_steps {
        let grad = match &config.grad_mode {
            GradientMode::Analytic => {
                if !reward.is_differentiable() {
                    return Err(Error::Mode(format!(
                        "reward '{}' is not differentiable; use the zeroth-order mode",
                        reward.name()
                    )));
                }
                let (terms, grad) = objective_terms_tape(
                    model,
                    &state.latent,
                    sched,
                    &state.phi_prime,
                    &state.phi,
                    config.lambda1,
                    state.lambda2_t,
                    config.sigma_phi_sq,
                    config.guidance_scale,
                    reward,
                    cache,
                )?;
                state.denoiser_evals += 2;
                state.reward_evals += 1;
                trace.push(terms);
                grad
            }
            GradientMode::ZerothOrder {
                mu, num_samples, ..
            } => {
                let base = std::cell::RefCell::new(None);
                let phi_prime = state.phi_prime.clone();
                let grad = zo_gradient_with_rng(
                    |candidate: &[f64]| {
                        let terms = alignment_objective_cached(
                            model,
                            &state.latent,
                            sched,
                            candidate,
                            &state.phi,
                            config.lambda1,
                            state.lambda2_t,
                            config.sigma_phi_sq,
                            config.guidance_scale,
                            reward,
                            cache,
                        )?;
                        if base.borrow().is_none() {
                            *base.borrow_mut() = Some(terms);
                        }
                        Ok(terms.objective)
                    },
                    &phi_prime,
                    *mu,
                    *num_samples,
                    zo_rng,
                )?;
                state.denoiser_evals += *num_samples as u64 + 1;
                state.reward_evals += *num_samples as u64 + 1;
                trace.push(base.into_inner().expect("base objective evaluated"));
                grad
            }
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Alignment {
                t,
                inner,
                msg: "non-finite gradient".into(),
            });
        }
        let delta = state.optimizer.update_delta(&grad);
        for (p, d) in state.phi_prime.iter_mut().zip(&delta) {
            *p += d;
        }
    }
    Ok(trace)
}

/// Diagnostics of one particle-filtering step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleDiag {
    pub candidate_rewards: Vec<f64>,
    pub selected_index: usize,
    pub selected_reward: f64,
}

/// Draws K candidates from the transition under φ′, scores each by the
/// reward of its Tweedie estimate at t−1 (under the same φ′ and CFG), and
/// keeps the argmax; ties break to the lowest index. At t = 1 the injected
/// noise is zero so the K candidates coincide and index 0 is selected.
pub fn greedy_particle_step(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    state: &mut AlignmentState,
    class_label: usize,
    config: &AlignmentConfig,
    reward: &RewardSpec,
    cache: &StepCache,
    rng: &mut ChaCha12Rng,
) -> Result<ParticleDiag> {
    let t = state.latent.t;
    let d_x = state.latent.dim();
    let c_emb = model.class_embedding(class_label)?;

    let eps_u = model.predict_noise(&state.latent.x, t, &state.phi_prime)?;
    state.denoiser_evals += 1;
    let tilde = cfg_combine(&eps_u, &cache.eps_cond, config.guidance_scale)?;

    let mut best: Option<(usize, f64, LatentState)> = None;
    let mut candidate_rewards = Vec::with_capacity(config.particles);
    for k in 0..config.particles {
        let noise: Vec<f64> = if t > 1 {
            (0..d_x).map(|_| rng.sample(StandardNormal)).collect()
        } else {
            vec![0.0; d_x]
        };
        let cand = ddpm_step(&state.latent, &tilde, &noise, sched)?;
        let score = if cand.t >= 1 {
            let eps_u_k = model.predict_noise(&cand.x, cand.t, &state.phi_prime)?;
            let eps_c_k = model.predict_noise(&cand.x, cand.t, &c_emb)?;
            state.denoiser_evals += 2;
            let tilde_k = cfg_combine(&eps_u_k, &eps_c_k, config.guidance_scale)?;
            let x0_hat = tweedie_x0(&cand, &tilde_k, sched)?;
            reward.evaluate(&x0_hat)
        } else {
            reward.evaluate(&cand.x)
        };
        state.reward_evals += 1;
        candidate_rewards.push(score);
        let better = match &best {
            None => true,
            Some((_, best_score, _)) => score > *best_score,
        };
        if better {
            best = Some((k, score, cand));
        }
    }
    let (selected_index, selected_reward, next) = best.expect("particles >= 1");
    state.latent = next;
    Ok(ParticleDiag {
        candidate_rewards,
        selected_index,
        selected_reward,
    })
}

/// Per-timestep diagnostics of one alignment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub lambda2_t: f64,
    pub inner_steps: usize,
    /// Objective terms at the start of each inner step.
    pub inner_objectives: Vec<ObjectiveTerms>,
    /// ‖φ′ − φ‖ after this timestep's updates.
    pub phi_drift: f64,
    pub particle: ParticleDiag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    /// One record per timestep, ordered t = T..1.
    pub steps: Vec<StepRecord>,
    pub denoiser_evals: u64,
    pub reward_evals: u64,
    pub final_phi_drift: f64,
}

impl TrajectoryRecord {
    /// Fraction of timesteps whose inner objective trace is strictly
    /// monotone step to step (diagnostic; tiny optimiser oscillations around
    /// a converged optimum count against it).
    pub fn nondecreasing_fraction(&self) -> f64 {
        if self.steps.is_empty() {
            return 1.0;
        }
        let ok = self
            .steps
            .iter()
            .filter(|s| {
                s.inner_objectives
                    .windows(2)
                    .all(|w| w[1].objective >= w[0].objective - 1e-12)
            })
            .count();
        ok as f64 / self.steps.len() as f64
    }

    /// Fraction of timesteps whose inner loop ends at an objective no lower
    /// than where it started.
    pub fn net_improvement_fraction(&self) -> f64 {
        if self.steps.is_empty() {
            return 1.0;
        }
        let ok = self
            .steps
            .iter()
            .filter(|s| match (s.inner_objectives.first(), s.inner_objectives.last()) {
                (Some(first), Some(last)) => last.objective >= first.objective - 1e-12,
                _ => true,
            })
            .count();
        ok as f64 / self.steps.len() as f64
    }

    pub fn summary(&self) -> String {
        let t_total = self.steps.len();
        let selected_last = self.steps.last().map(|s| s.particle.selected_reward);
        let mean_inner = if t_total > 0 {
            self.steps.iter().map(|s| s.inner_steps).sum::<usize>() as f64 / t_total as f64
        } else {
            0.0
        };
        format!(
            "timesteps: {t_total}\nmean inner steps: {mean_inner:.2}\nfinal |phi' - phi|: {:.6}\nfinal selected reward: {}\ndenoiser evals: {}\nreward evals: {}\nnet objective improvement fraction: {:.3}",
            self.final_phi_drift,
            selected_last.map_or("n/a".into(), |r| format!("{r:.6}")),
            self.denoiser_evals,
            self.reward_evals,
            self.net_improvement_fraction(),
        )
    }
}

/// Runs the full alignment loop and returns the final sample and its
/// trajectory record. Deterministic for a given config.
pub fn align_sample(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    class_label: usize,
    config: &AlignmentConfig,
    reward: &RewardSpec,
) -> Result<(Vec<f64>, TrajectoryRecord)> {
    config.validate()?;
    reward.validate()?;
    if sched.total_steps() != model.total_steps() {
        return Err(Error::Config(format!(
            "schedule T={} vs model T={}",
            sched.total_steps(),
            model.total_steps()
        )));
    }
    let total = sched.total_steps();
    let d_x = model.config.data_dim;

    // Trajectory noise and zeroth-order directions come from separate streams
    // of the same seed, so switching gradient modes never perturbs the
    // trajectory draws.
    let mut traj_rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut zo_rng = ChaCha12Rng::seed_from_u64(config.seed);
    zo_rng.set_stream(1);

    let x_init: Vec<f64> = (0..d_x).map(|_| traj_rng.sample(StandardNormal)).collect();
    let mut state = AlignmentState::new(
        LatentState::new(x_init, total),
        model.null_embedding().to_vec(),
        config.learning_rate,
    );

    let mut steps = Vec::with_capacity(total);
    for t in (1..=total).rev() {
        debug_assert_eq!(state.latent.t, t);
        state.lambda2_t = anneal_lambda2(t, total, config.gamma, config.lambda2);
        let n_t = inner_steps(t, total, config.gamma, config.n_min, config.n_max);
        if config.reinit_per_timestep {
            state.reinit();
        }
        let cache = StepCache::new(
            model,
            &state.latent,
            class_label,
            &state.phi,
            config.guidance_scale,
        )?;
        state.denoiser_evals += 2;
        let inner_objectives = optimize_null(
            model, sched, &mut state, config, reward, &cache, n_t, &mut zo_rng,
        )
        .map_err(|e| annotate_timestep(e, t))?;
        let particle = greedy_particle_step(
            model,
            sched,
            &mut state,
            class_label,
            config,
            reward,
            &cache,
            &mut traj_rng,
        )
        .map_err(|e| annotate_timestep(e, t))?;
        steps.push(StepRecord {
            t,
            lambda2_t: state.lambda2_t,
            inner_steps: n_t,
            inner_objectives,
            phi_drift: state.phi_drift(),
            particle,
        });
    }
    debug_assert_eq!(state.latent.t, 0);
    let record = TrajectoryRecord {
        steps,
        denoiser_evals: state.denoiser_evals,
        reward_evals: state.reward_evals,
        final_phi_drift: state.phi_drift(),
    };
    Ok((state.latent.x, record))
}

fn annotate_timestep(e: Error, t: usize) -> Error {
    match e {
        Error::Alignment { inner, msg, .. } => Error::Alignment { t, inner, msg },
        other => other,
    }
}

/// Closed-form denoiser-eval count of [`align_sample`]: per timestep, 2
/// cached forwards, the inner-step cost (2 per analytic step; num_samples+1
/// forwards per zeroth-order step), 1 forward for the transition noise, and
/// 2 per particle for scoring at t−1 ≥ 1.
pub fn expected_denoiser_evals(total_steps: usize, config: &AlignmentConfig) -> u64 {
    let per_inner = match &config.grad_mode {
        GradientMode::Analytic => 2u64,
        GradientMode::ZerothOrder { num_samples, .. } => *num_samples as u64 + 1,
    };
    let mut n = 0u64;
    for t in 1..=total_steps {
        let n_t = inner_steps(t, total_steps, config.gamma, config.n_min, config.n_max) as u64;
        n += 2 + n_t * per_inner + 1;
        if t >= 2 {
            n += 2 * config.particles as u64;
        }
    }
    n
}

/// Closed-form reward-eval count of [`align_sample`]: one (analytic) or
/// num_samples+1 (zeroth-order) per inner step, plus one per particle.
pub fn expected_reward_evals(total_steps: usize, config: &AlignmentConfig) -> u64 {
    let per_inner = match &config.grad_mode {
        GradientMode::Analytic => 1u64,
        GradientMode::ZerothOrder { num_samples, .. } => *num_samples as u64 + 1,
    };
    let mut n = 0u64;
    for t in 1..=total_steps {
        let n_t = inner_steps(t, total_steps, config.gamma, config.n_min, config.n_max) as u64;
        n += n_t * per_inner + config.particles as u64;
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::sample_unaligned;
    use crate::diffusion::build_schedule;
    use crate::model::ModelConfig;

    fn small_setup() -> (DenoiserModel, NoiseSchedule) {
        let total = 12;
        let model = DenoiserModel::new(ModelConfig {
            data_dim: 2,
            embed_dim: 4,
            hidden_width: 16,
            hidden_layers: 3,
            num_classes: 3,
            total_steps: total,
            seed: 17,
        })
        .unwrap();
        let sched = build_schedule(total, 1e-3, 0.05).unwrap();
        (model, sched)
    }

    fn small_config(seed: u64) -> AlignmentConfig {
        AlignmentConfig {
            n_min: 2,
            n_max: 5,
            seed,
            ..AlignmentConfig::default()
        }
    }

    fn reward() -> RewardSpec {
        RewardSpec::TargetMode {
            mu_star: vec![1.0, 0.5],
        }
    }

    #[test]
    fn anneal_endpoints_and_monotonicity() {
        // exponent zero at t = T
        assert_eq!(anneal_lambda2(100, 100, 0.008, 0.002), 0.002);
        // 1.008^100 ≈ 2.2186 > 2, so the weight hits zero at t = 0
        assert_eq!(anneal_lambda2(0, 100, 0.008, 0.002), 0.0);
        let mut prev = f64::INFINITY;
        for t in (0..=100).rev() {
            let l = anneal_lambda2(t, 100, 0.008, 0.002);
            assert!(l <= prev + 1e-18);
            assert!((0.0..=0.002).contains(&l));
            prev = l;
        }
    }

    #[test]
    fn inner_steps_bounds() {
        assert_eq!(inner_steps(100, 100, 0.008, 5, 25), 5);
        for t in 0..=100 {
            let n = inner_steps(t, 100, 0.008, 5, 25);
            assert!((5..=25).contains(&n));
            assert_eq!(inner_steps(t, 100, 0.008, 7, 7), 7);
        }
    }

    #[test]
    fn objective_vanishes_at_phi_with_zero_lambda1() {
        let (model, sched) = small_setup();
        let phi = model.null_embedding().to_vec();
        let latent = LatentState::new(vec![0.4, -0.2], 6);
        let config = AlignmentConfig {
            lambda1: 0.0,
            ..small_config(0)
        };
        let terms = alignment_objective(
            &model, &latent, &sched, 1, &phi, &phi, 0.002, &config, &reward(),
        )
        .unwrap();
        assert_eq!(terms.objective, 0.0);
        assert_eq!(terms.transition_kl_term, 0.0);
        assert_eq!(terms.embedding_kl_term, 0.0);
    }

    #[test]
    fn objective_is_pure_reward_when_lambda2_zero() {
        let (model, sched) = small_setup();
        let phi = model.null_embedding().to_vec();
        let phi_prime: Vec<f64> = phi.iter().map(|p| p + 0.2).collect();
        let latent = LatentState::new(vec![0.4, -0.2], 6);
        let config = small_config(0);
        let terms = alignment_objective(
            &model, &latent, &sched, 1, &phi_prime, &phi, 0.0, &config, &reward(),
        )
        .unwrap();
        assert_eq!(terms.objective, terms.reward_term);
        assert_eq!(terms.transition_kl_term, 0.0);
        assert_eq!(terms.embedding_kl_term, 0.0);
    }

    #[test]
    fn objective_matches_straight_line_reimplementation() {
        // independent single-expression evaluation of the per-step objective
        let (model, sched) = small_setup();
        let phi = model.null_embedding().to_vec();
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for _ in 0..20 {
            let t = rng.random_range(1..=12);
            let latent = LatentState::new(
                (0..2).map(|_| rng.sample(StandardNormal)).collect(),
                t,
            );
            let phi_prime: Vec<f64> = phi
                .iter()
                .map(|p| p + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let config = small_config(0);
            let lambda2_t = anneal_lambda2(t, 12, config.gamma, config.lambda2);
            let got = alignment_objective(
                &model, &latent, &sched, 2, &phi_prime, &phi, lambda2_t, &config, &reward(),
            )
            .unwrap()
            .objective;

            // oracle: raw formulas, no shared helpers
            let s = config.guidance_scale;
            let c_emb = model.class_embedding(2).unwrap();
            let eu: Vec<f64> = model.predict_noise(&latent.x, t, &phi_prime).unwrap();
            let ec: Vec<f64> = model.predict_noise(&latent.x, t, &c_emb).unwrap();
            let eo: Vec<f64> = model.predict_noise(&latent.x, t, &phi).unwrap();
            let d = latent.x.len();
            let tilde: Vec<f64> = (0..d).map(|i| eu[i] + s * (ec[i] - eu[i])).collect();
            let tilde_o: Vec<f64> = (0..d).map(|i| eo[i] + s * (ec[i] - eo[i])).collect();
            let ab = sched.alpha_bar(t);
            let x0: Vec<f64> = (0..d)
                .map(|i| (latent.x[i] - (1.0 - ab).sqrt() * tilde[i]) / ab.sqrt())
                .collect();
            let mu_star = [1.0, 0.5];
            let r: f64 = -(0..d).map(|i| (x0[i] - mu_star[i]).powi(2)).sum::<f64>();
            let alpha = sched.alpha(t);
            let kl1: f64 = (1.0 - alpha) / (2.0 * alpha * (1.0 - ab))
                * (0..d).map(|i| (tilde[i] - tilde_o[i]).powi(2)).sum::<f64>();
            let kl2: f64 = phi_prime
                .iter()
                .zip(&phi)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / (2.0 * config.sigma_phi_sq);
            let want = config.lambda1 * r - lambda2_t * kl1 - lambda2_t * kl2;
            let rel = (got - want).abs() / want.abs().max(1e-300);
            assert!(rel <= 1e-12, "t={t}: {got} vs {want} (rel {rel})");
        }
    }

    #[test]
    fn optimize_null_zero_steps_keeps_phi() {
        let (model, sched) = small_setup();
        let phi = model.null_embedding().to_vec();
        let latent = LatentState::new(vec![0.1, 0.9], 5);
        let config = small_config(0);
        let mut state = AlignmentState::new(latent.clone(), phi.clone(), config.learning_rate);
        state.lambda2_t = 0.001;
        let cache = StepCache::new(&model, &latent, 0, &phi, config.guidance_scale).unwrap();
        let mut zo_rng = ChaCha12Rng::seed_from_u64(0);
        let trace =
            optimize_null(&model, &sched, &mut state, &config, &reward(), &cache, 0, &mut zo_rng)
                .unwrap();
        assert!(trace.is_empty());
        assert_eq!(state.phi_prime, phi);
    }

    #[test]
    fn zero_lambda1_keeps_phi_exactly() {
        let (model, sched) = small_setup();
        let phi = model.null_embedding().to_vec();
        let latent = LatentState::new(vec![0.1, 0.9], 5);
        let config = AlignmentConfig {
            lambda1: 0.0,
            ..small_config(0)
        };
        let mut state = AlignmentState::new(latent.clone(), phi.clone(), config.learning_rate);
        state.lambda2_t = 0.002;
        let cache = StepCache::new(&model, &latent, 0, &phi, config.guidance_scale).unwrap();
        let mut zo_rng = ChaCha12Rng::seed_from_u64(0);
        optimize_null(&model, &sched, &mut state, &config, &reward(), &cache, 10, &mut zo_rng)
            .unwrap();
        assert_eq!(state.phi_prime, phi);
        assert_eq!(state.phi_drift(), 0.0);
    }

    #[test]
    fn analytic_mode_rejects_nondifferentiable_reward() {
        let (model, sched) = small_setup();
        let config = small_config(0);
        let err = align_sample(
            &model,
            &sched,
            0,
            &config,
            &RewardSpec::QuantizedCodeLength { cell: 0.5 },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Mode(_)), "{err}");
    }

    #[test]
    fn zeroth_order_handles_nondifferentiable_reward() {
        let (model, sched) = small_setup();
        let config = AlignmentConfig {
            grad_mode: GradientMode::ZerothOrder {
                mu: 0.02,
                num_samples: 4,
                seed: 0,
            },
            ..small_config(3)
        };
        let (x0, record) = align_sample(
            &model,
            &sched,
            0,
            &config,
            &RewardSpec::QuantizedCodeLength { cell: 0.5 },
        )
        .unwrap();
        assert_eq!(x0.len(), 2);
        assert_eq!(record.denoiser_evals, expected_denoiser_evals(12, &config));
        assert_eq!(record.reward_evals, expected_reward_evals(12, &config));
    }

    #[test]
    fn align_sample_is_deterministic_and_counts_match() {
        let (model, sched) = small_setup();
        let config = small_config(11);
        let (x1, r1) = align_sample(&model, &sched, 1, &config, &reward()).unwrap();
        let (x2, r2) = align_sample(&model, &sched, 1, &config, &reward()).unwrap();
        assert_eq!(x1, x2);
        assert_eq!(r1, r2);
        assert_eq!(r1.steps.len(), 12);
        for step in &r1.steps {
            assert_eq!(step.inner_objectives.len(), step.inner_steps);
            assert_eq!(step.particle.candidate_rewards.len(), config.particles);
        }
        assert_eq!(r1.denoiser_evals, expected_denoiser_evals(12, &config));
        assert_eq!(r1.reward_evals, expected_reward_evals(12, &config));
    }

    #[test]
    fn final_step_particles_degenerate_to_first() {
        let (model, sched) = small_setup();
        let config = small_config(5);
        let (_, record) = align_sample(&model, &sched, 0, &config, &reward()).unwrap();
        let last = record.steps.last().unwrap();
        assert_eq!(last.t, 1);
        assert_eq!(last.particle.selected_index, 0);
        let first = last.particle.candidate_rewards[0];
        for r in &last.particle.candidate_rewards {
            assert_eq!(*r, first);
        }
        // selection is the argmax with lowest-index ties on every step
        for step in &record.steps {
            let max = step
                .particle
                .candidate_rewards
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(step.particle.selected_reward, max);
            assert_eq!(
                step.particle.selected_index,
                step.particle
                    .candidate_rewards
                    .iter()
                    .position(|r| *r == max)
                    .unwrap()
            );
        }
    }

    #[test]
    fn reduction_identity_lambda1_zero_single_particle() {
        let (model, sched) = small_setup();
        for seed in [0u64, 1, 2, 3, 4] {
            let config = AlignmentConfig {
                lambda1: 0.0,
                particles: 1,
                ..small_config(seed)
            };
            let (aligned, record) = align_sample(&model, &sched, 1, &config, &reward()).unwrap();
            let (plain, _) =
                sample_unaligned(&model, &sched, 1, config.guidance_scale, seed).unwrap();
            assert_eq!(record.final_phi_drift, 0.0);
            for (a, b) in aligned.iter().zip(&plain) {
                assert_eq!(a.to_bits(), b.to_bits(), "seed {seed}");
            }
        }
    }

    #[test]
    fn phi_persists_across_timesteps_unless_reinit() {
        let (model, sched) = small_setup();
        let config = small_config(9);
        let (_, record) = align_sample(&model, &sched, 0, &config, &reward()).unwrap();
        // with a positive reward weight the drift accumulates over timesteps
        assert!(record.final_phi_drift > 0.0);
        let drifts: Vec<f64> = record.steps.iter().map(|s| s.phi_drift).collect();
        assert_eq!(record.final_phi_drift, *drifts.last().unwrap());

        let config_reinit = AlignmentConfig {
            reinit_per_timestep: true,
            ..small_config(9)
        };
        let (_, record_r) = align_sample(&model, &sched, 0, &config_reinit, &reward()).unwrap();
        // reinitialisation caps the drift at what one timestep can build
        assert!(record_r.final_phi_drift <= record.final_phi_drift);
    }

    #[test]
    fn non_finite_gradient_reports_timestep_and_inner_step() {
        // a huge learning rate blows the embedding up until the denoiser
        // input mixes infinities into NaN
        let (model, sched) = small_setup();
        let config = AlignmentConfig {
            learning_rate: 1e300,
            lambda1: 1e6,
            ..small_config(2)
        };
        match align_sample(&model, &sched, 0, &config, &reward()) {
            Err(Error::Alignment { t, .. }) => assert!(t >= 1 && t <= 12),
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = AlignmentConfig::default();
        for bad in [
            AlignmentConfig { n_min: 9, n_max: 3, ..base.clone() },
            AlignmentConfig { gamma: 0.0, ..base.clone() },
            AlignmentConfig { lambda1: -1.0, ..base.clone() },
            AlignmentConfig { sigma_phi_sq: 0.0, ..base.clone() },
            AlignmentConfig { particles: 0, ..base.clone() },
            AlignmentConfig { learning_rate: 0.0, ..base.clone() },
            AlignmentConfig { guidance_scale: -0.5, ..base.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(base.validate().is_ok());
    }
}
