//! Comparison samplers sharing the same diffusion primitives: plain CFG
//! sampling, best-of-N selection, per-step reward-gradient guidance, and
//! optimisation of the initial noise through the full trajectory.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{cfg_combine, ddpm_step, LatentState, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grad::Tape;
use crate::math;
use crate::model::{Denoiser, DenoiserModel};
use crate::rewards::RewardSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum BaselineKind {
    Unaligned,
    BestOfN { n: usize },
    StepGuidance { zeta: f64 },
    NoiseOpt { steps: usize, rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    #[serde(flatten)]
    pub kind: BaselineKind,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BaselineKind::BestOfN { n } if n == 0 => {
                return Err(Error::Config("best-of-N needs N >= 1".into()))
            }
            BaselineKind::StepGuidance { zeta } if !zeta.is_finite() => {
                return Err(Error::Config("step-guidance scale must be finite".into()))
            }
            BaselineKind::NoiseOpt { rate, .. } if !rate.is_finite() => {
                return Err(Error::Config("noise-opt rate must be finite".into()))
            }
            _ => {}
        }
        crate::diffusion::GuidanceConfig::new(self.guidance_scale)?;
        Ok(())
    }
}

/// Evaluation counters shared by every sampler in this module.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunStats {
    pub denoiser_evals: u64,
    pub reward_evals: u64,
}

/// Plain CFG DDPM sampling, consuming noise from the caller's stream:
/// one d_x draw for x_T, then one per reverse step except the last.
pub fn sample_unaligned_with_rng(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    class_label: usize,
    guidance_scale: f64,
    rng: &mut ChaCha12Rng,
    stats: &mut RunStats,
) -> Result<Vec<f64>> {
    let total = sched.total_steps();
    let d_x = model.config.data_dim;
    let c_emb = model.class_embedding(class_label)?;
    let phi = model.null_embedding().to_vec();
    let x_init: Vec<f64> = (0..d_x).map(|_| rng.sample(StandardNormal)).collect();
    let mut state = LatentState::new(x_init, total);
    for t in (1..=total).rev() {
        let eps_u = model.predict_noise(&state.x, t, &phi)?;
        let eps_c = model.predict_noise(&state.x, t, &c_emb)?;
        stats.denoiser_evals += 2;
        let tilde = cfg_combine(&eps_u, &eps_c, guidance_scale)?;
        let noise: Vec<f64> = if t > 1 {
            (0..d_x).map(|_| rng.sample(StandardNormal)).collect()
        } else {
            vec![0.0; d_x]
        };
        state = ddpm_step(&state, &tilde, &noise, sched)?;
    }
    Ok(state.x)
}

pub fn sample_unaligned(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    class_label: usize,
    guidance_scale: f64,
    seed: u64,
) -> Result<(Vec<f64>, RunStats)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut stats = RunStats::default();
    let x0 = sample_unaligned_with_rng(model, sched, class_label, guidance_scale, &mut rng, &mut stats)?;
    Ok((x0, stats))
}

/// N independent unaligned samples from one continuing stream; returns the
/// reward argmax (ties to the lowest index).
pub fn best_of_n(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    class_label: usize,
    n: usize,
    reward: &RewardSpec,
    guidance_scale: f64,
    seed: u64,
) -> Result<(Vec<f64>, RunStats)> {
    if n == 0 {
        return Err(Error::Config("best-of-N needs N >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut stats = RunStats::default();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..n {
        let x0 =
            sample_unaligned_with_rng(model, sched, class_label, guidance_scale, &mut rng, &mut stats)?;
        let r = reward.evaluate(&x0);
        stats.reward_evals += 1;
        let better = match &best {
            None => true,
            Some((best_r, _)) => r > *best_r,
        };
        if better {
            best = Some((r, x0));
        }
    }
    Ok((best.expect("n >= 1").1, stats))
}

/// ∇_{x_t} R(x̂0(x_t)) through the Tweedie estimate and both CFG branches of
/// the denoiser.
fn reward_gradient_wrt_latent(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    state: &LatentState,
    c_emb: &[f64],
    phi: &[f64],
    guidance_scale: f64,
    reward: &RewardSpec,
    stats: &mut RunStats,
) -> Result<Vec<f64>> {
    let t = state.t;
    let ab = sched.alpha_bar(t);
    let s = guidance_scale;
    let mut tape = Tape::new();
    let x_var = tape.leaf(state.x.clone());
    let phi_const = tape.constant(phi.to_vec());
    let c_const = tape.constant(c_emb.to_vec());
    let eps_u = model.predict_noise_tape(&mut tape, x_var, t, phi_const);
    let eps_c = model.predict_noise_tape(&mut tape, x_var, t, c_const);
    stats.denoiser_evals += 2;
    // ε̃ = ε_u + s(ε_c − ε_u)
    let diff = tape.sub(eps_c, eps_u);
    let scaled = tape.scale(diff, s);
    let tilde = tape.add(eps_u, scaled);
    // x̂0 = x/√ᾱ − (√(1−ᾱ)/√ᾱ)·ε̃
    let x_scaled = tape.scale(x_var, 1.0 / ab.sqrt());
    let e_scaled = tape.scale(tilde, (1.0 - ab).sqrt() / ab.sqrt());
    let x0_hat = tape.sub(x_scaled, e_scaled);
    let r = reward.tape_eval(&mut tape, x0_hat)?;
    stats.reward_evals += 1;
    let grad = tape.gradient(r, x_var);
    stats.denoiser_evals += 2; // backward through both branches
    Ok(grad)
}

/// Plain CFG sampling where each reverse step adds ζ·∇_{x_t} R(x̂0(x_t)) to
/// the DDPM update. ζ = 0 reduces exactly to [`sample_unaligned`].
pub fn step_guidance_sample(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    class_label: usize,
    zeta: f64,
    reward: &RewardSpec,
    guidance_scale: f64,
    seed: u64,
) -> Result<(Vec<f64>, RunStats)> {
    if !reward.is_differentiable() {
        return Err(Error::Mode(format!(
            "step guidance needs a differentiable reward, got '{}'",
            reward.name()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut stats = RunStats::default();
    if zeta == 0.0 {
        let x0 =
            sample_unaligned_with_rng(model, sched, class_label, guidance_scale, &mut rng, &mut stats)?;
        return Ok((x0, stats));
    }
    let total = sched.total_steps();
    let d_x = model.config.data_dim;
    let c_emb = model.class_embedding(class_label)?;
    let phi = model.null_embedding().to_vec();
    let x_init: Vec<f64> = (0..d_x).map(|_| rng.sample(StandardNormal)).collect();
    let mut state = LatentState::new(x_init, total);
    for t in (1..=total).rev() {
        let eps_u = model.predict_noise(&state.x, t, &phi)?;
        let eps_c = model.predict_noise(&state.x, t, &c_emb)?;
        stats.denoiser_evals += 2;
        let tilde = cfg_combine(&eps_u, &eps_c, guidance_scale)?;
        let grad = reward_gradient_wrt_latent(
            model,
            sched,
            &state,
            &c_emb,
            &phi,
            guidance_scale,
            reward,
            &mut stats,
        )?;
        let noise: Vec<f64> = if t > 1 {
            (0..d_x).map(|_| rng.sample(StandardNormal)).collect()
        } else {
            vec![0.0; d_x]
        };
        let mut next = ddpm_step(&state, &tilde, &noise, sched)?;
        math::axpy(&mut next.x, zeta, &grad);
        state = next;
    }
    Ok((state.x, stats))
}

/// Deterministic rollout with fixed injected noises (index 0 is used at
/// t = T, index T−2 at t = 2; t = 1 injects none).
fn rollout_with_noises(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    c_emb: &[f64],
    phi: &[f64],
    guidance_scale: f64,
    x_init: &[f64],
    noises: &[Vec<f64>],
    stats: &mut RunStats,
) -> Result<Vec<f64>> {
    let total = sched.total_steps();
    let d_x = x_init.len();
    let mut state = LatentState::new(x_init.to_vec(), total);
    for t in (1..=total).rev() {
        let eps_u = model.predict_noise(&state.x, t, phi)?;
        let eps_c = model.predict_noise(&state.x, t, c_emb)?;
        stats.denoiser_evals += 2;
        let tilde = cfg_combine(&eps_u, &eps_c, guidance_scale)?;
        let zero = vec![0.0; d_x];
        let noise = if t > 1 { &noises[total - t] } else { &zero };
        state = ddpm_step(&state, &tilde, noise, sched)?;
    }
    Ok(state.x)
}

/// Gradient ascent on R(x0) with respect to all injected noises (the
/// initial x_T and every per-step transition noise) through the full
/// deterministic trajectory; `steps` plain ascent updates at `rate`, then a
/// final rollout from the optimised noises.
pub fn noise_opt_sample(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    class_label: usize,
    steps: usize,
    rate: f64,
    reward: &RewardSpec,
    guidance_scale: f64,
    seed: u64,
) -> Result<(Vec<f64>, RunStats)> {
    if !reward.is_differentiable() {
        return Err(Error::Mode(format!(
            "noise optimisation needs a differentiable reward, got '{}'",
            reward.name()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut stats = RunStats::default();
    let total = sched.total_steps();
    let d_x = model.config.data_dim;
    let c_emb = model.class_embedding(class_label)?;
    let phi = model.null_embedding().to_vec();

    // Same draw order as plain sampling: x_T first, then the per-step noises.
    let mut x_init: Vec<f64> = (0..d_x).map(|_| rng.sample(StandardNormal)).collect();
    let mut noises = Vec::with_capacity(total.saturating_sub(1));
    for _ in 0..total.saturating_sub(1) {
        noises.push((0..d_x).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>());
    }

    for _ in 0..steps {
        let s = guidance_scale;
        let mut tape = Tape::new();
        let x_var = tape.leaf(x_init.clone());
        let noise_vars: Vec<_> = noises.iter().map(|z| tape.leaf(z.clone())).collect();
        let phi_const = tape.constant(phi.clone());
        let c_const = tape.constant(c_emb.clone());
        let mut x = x_var;
        for t in (1..=total).rev() {
            let ab = sched.alpha_bar(t);
            let eps_u = model.predict_noise_tape(&mut tape, x, t, phi_const);
            let eps_c = model.predict_noise_tape(&mut tape, x, t, c_const);
            stats.denoiser_evals += 2;
            let diff = tape.sub(eps_c, eps_u);
            let scaled = tape.scale(diff, s);
            let tilde = tape.add(eps_u, scaled);
            let x_scaled = tape.scale(x, 1.0 / ab.sqrt());
            let e_scaled = tape.scale(tilde, (1.0 - ab).sqrt() / ab.sqrt());
            let x0_hat = tape.sub(x_scaled, e_scaled);
            let (c0, c1) = crate::diffusion::transition_coeffs(sched, t);
            let m0 = tape.scale(x0_hat, c0);
            let m1 = tape.scale(x, c1);
            let mean = tape.add(m0, m1);
            x = if t > 1 {
                let sigma = sched.transition_std(t);
                let z_scaled = tape.scale(noise_vars[total - t], sigma);
                tape.add(mean, z_scaled)
            } else {
                mean
            };
        }
        let r = reward.tape_eval(&mut tape, x)?;
        stats.reward_evals += 1;
        let mut wrts = vec![x_var];
        wrts.extend_from_slice(&noise_vars);
        let mut grads = tape.gradients(r, &wrts).into_iter();
        math::axpy(&mut x_init, rate, &grads.next().expect("x_T gradient"));
        for (z, g) in noises.iter_mut().zip(grads) {
            math::axpy(z, rate, &g);
        }
        stats.denoiser_evals += 2 * total as u64; // backward through the trajectory
    }

    let x0 = rollout_with_noises(
        model,
        sched,
        &c_emb,
        &phi,
        guidance_scale,
        &x_init,
        &noises,
        &mut stats,
    )?;
    Ok((x0, stats))
}

/// Dispatches on the baseline variant.
pub fn run_baseline(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    class_label: usize,
    config: &BaselineConfig,
    reward: &RewardSpec,
) -> Result<(Vec<f64>, RunStats)> {
    config.validate()?;
    match config.kind {
        BaselineKind::Unaligned => {
            sample_unaligned(model, sched, class_label, config.guidance_scale, config.seed)
        }
        BaselineKind::BestOfN { n } => best_of_n(
            model,
            sched,
            class_label,
            n,
            reward,
            config.guidance_scale,
            config.seed,
        ),
        BaselineKind::StepGuidance { zeta } => step_guidance_sample(
            model,
            sched,
            class_label,
            zeta,
            reward,
            config.guidance_scale,
            config.seed,
        ),
        BaselineKind::NoiseOpt { steps, rate } => noise_opt_sample(
            model,
            sched,
            class_label,
            steps,
            rate,
            reward,
            config.guidance_scale,
            config.seed,
        ),
    }
}
