//! One function per verification criterion. Each returns a report row and
//! never panics; failures inside a criterion become failed rows.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use super::{fixture, pinned, CriterionReport};
use crate::align::{
    align_sample, alignment_gradient, alignment_objective, anneal_lambda2, greedy_particle_step,
    inner_steps, AlignmentConfig, AlignmentState, StepCache,
};
use crate::baselines::{noise_opt_sample, sample_unaligned, step_guidance_sample};
use crate::checkpoint::{load_checkpoint, save_checkpoint, TrainMeta};
use crate::data::nearest_mode;
use crate::diffusion::{
    build_schedule, ddpm_step, forward_diffuse, kl_transition, transition_mean, tweedie_x0,
    LatentState,
};
use crate::error::Result;
use crate::grad::{zo_gradient, GradientMode};
use crate::harness::{
    derive_seed, emit_results, run_experiment_with, MethodSpec, OutputFormat, ResolvedModel,
};
use crate::math;
use crate::model::{Denoiser, DenoiserModel, ModelConfig};
use crate::oracles::{gaussian_kl_direct, mc_joint_kl, AnalyticGaussianDenoiser};
use crate::rewards::RewardSpec;

fn criterion(id: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CriterionReport {
    let start = Instant::now();
    match f() {
        Ok((passed, detail)) => CriterionReport::new(id, passed, detail, start),
        Err(e) => CriterionReport::new(id, false, format!("error: {e}"), start),
    }
}

fn draw(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// One-sided z statistic for H1: rate_a > rate_b over n trials each.
fn proportion_z(count_a: usize, count_b: usize, n: usize) -> f64 {
    let (pa, pb) = (count_a as f64 / n as f64, count_b as f64 / n as f64);
    let var = pa * (1.0 - pa) / n as f64 + pb * (1.0 - pb) / n as f64;
    if var == 0.0 {
        if pa > pb {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        (pa - pb) / var.sqrt()
    }
}

/// z statistic of the paired differences next − prev.
fn paired_z(next: &[f64], prev: &[f64]) -> f64 {
    let diffs: Vec<f64> = next.iter().zip(prev).map(|(a, b)| a - b).collect();
    let se = math::std_err(&diffs);
    if se == 0.0 {
        if math::mean(&diffs) > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        math::mean(&diffs) / se
    }
}

/// Closed-form transition KL against the direct same-covariance Gaussian KL
/// of the transition means, 1000 random cases, rel err <= 1e-9.
pub fn a1_kl_closed_form() -> CriterionReport {
    criterion("A1", || {
        let sched = build_schedule(100, 1e-4, 0.02)?;
        let mut rng = ChaCha12Rng::seed_from_u64(101);
        let mut max_rel: f64 = 0.0;
        for _ in 0..1000 {
            let t = rng.random_range(1..=100);
            let state = LatentState::new(draw(&mut rng, 3), t);
            let ea = draw(&mut rng, 3);
            let eb = draw(&mut rng, 3);
            let mu_a = transition_mean(&state, &tweedie_x0(&state, &ea, &sched)?, &sched)?;
            let mu_b = transition_mean(&state, &tweedie_x0(&state, &eb, &sched)?, &sched)?;
            let direct = gaussian_kl_direct(&mu_a, &mu_b, sched.beta(t))?;
            let closed = kl_transition(&ea, &eb, &sched, t)?;
            let rel = (closed - direct).abs() / direct.abs().max(f64::MIN_POSITIVE);
            max_rel = max_rel.max(rel);
        }
        Ok((
            max_rel <= 1e-9,
            format!("max rel err {max_rel:.3e} over 1000 cases (tol 1e-9)"),
        ))
    })
}

/// Monte-Carlo joint KL over a 1D, T=3 chain agrees with the sum of local
/// closed-form KLs plus the embedding KL within 3 paired standard errors.
pub fn a2_joint_kl_decomposition() -> CriterionReport {
    criterion("A2", || {
        let sched = build_schedule(3, 0.05, 0.2)?;
        let model = DenoiserModel::new(ModelConfig {
            data_dim: 1,
            embed_dim: 4,
            hidden_width: 16,
            hidden_layers: 2,
            num_classes: 2,
            total_steps: 3,
            seed: 31,
        })?;
        let phi = model.null_embedding().to_vec();
        let phi_prime: Vec<f64> = phi.iter().map(|p| p + 0.15).collect();
        let check = mc_joint_kl(&model, &sched, 0, &phi_prime, &phi, 1.5, 0.01, 100_000, 202)?;
        let sigma = check.sigma_distance();
        Ok((
            sigma <= 3.0,
            format!(
                "mc {:.6} ± {:.6} vs local {:.6} ({} trajectories, {:.2} paired SE)",
                check.mc_estimate, check.mc_std_err, check.local_kl_sum, check.trajectories, sigma
            ),
        ))
    })
}

/// Reverse-mode gradient of the per-step objective against central finite
/// differences over 20 random states and every differentiable reward.
pub fn a3_gradient_correctness() -> CriterionReport {
    criterion("A3", || {
        let fx = fixture();
        let modes = fx.config.dataset.class_means();
        let rewards: Vec<RewardSpec> = vec![
            fx.config.reward.clone(),
            RewardSpec::LinearScore { a: vec![1.0, 0.5] },
            RewardSpec::RadialBand {
                r0: 1.5,
                width: 0.3,
            },
            RewardSpec::WeightedCombo {
                w: 0.4,
                a: Box::new(RewardSpec::TargetMode {
                    mu_star: modes[1].clone(),
                }),
                b: Box::new(RewardSpec::RadialBand {
                    r0: 1.5,
                    width: 0.3,
                }),
            },
        ];
        let config = AlignmentConfig::default();
        let total = fx.schedule.total_steps();
        let mut rng = ChaCha12Rng::seed_from_u64(303);
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        let mut checked = 0usize;
        for _ in 0..20 {
            let t = rng.random_range(1..=total);
            let point = fx.dataset.points[rng.random_range(0..fx.dataset.len())].clone();
            let eps = draw(&mut rng, 2);
            let latent = forward_diffuse(&point, t, &eps, &fx.schedule)?;
            let phi = fx.model.null_embedding().to_vec();
            let mut phi_prime = phi.clone();
            for p in phi_prime.iter_mut() {
                *p += 0.05 * rng.sample::<f64, _>(StandardNormal);
            }
            let lambda2_t = anneal_lambda2(t, total, config.gamma, config.lambda2);
            for reward in &rewards {
                let (_, grad) = alignment_gradient(
                    &fx.model, &latent, &fx.schedule, 0, &phi_prime, &phi, lambda2_t, &config,
                    reward,
                )?;
                for i in 0..phi_prime.len() {
                    let mut p = phi_prime.clone();
                    let mut q = phi_prime.clone();
                    p[i] += h;
                    q[i] -= h;
                    let jp = alignment_objective(
                        &fx.model, &latent, &fx.schedule, 0, &p, &phi, lambda2_t, &config, reward,
                    )?
                    .objective;
                    let jq = alignment_objective(
                        &fx.model, &latent, &fx.schedule, 0, &q, &phi, lambda2_t, &config, reward,
                    )?
                    .objective;
                    let fd = (jp - jq) / (2.0 * h);
                    let rel = (grad[i] - fd).abs() / fd.abs().max(1e-6);
                    max_rel = max_rel.max(rel);
                    checked += 1;
                }
            }
        }
        Ok((
            max_rel <= 1e-4,
            format!("max per-coordinate rel err {max_rel:.3e} over {checked} coordinates (tol 1e-4)"),
        ))
    })
}

/// Zeroth-order estimator quality: cosine similarity to the exact gradient
/// at 4096 directions, and shrinking measured bias on a quadratic as the
/// perturbation scale decreases (common directions across scales).
pub fn a4_zeroth_order_estimator() -> CriterionReport {
    criterion("A4", || {
        let fx = fixture();
        let total = fx.schedule.total_steps();
        let t = 60;
        let config = AlignmentConfig::default();
        let reward = fx.config.reward.clone();
        let mut rng = ChaCha12Rng::seed_from_u64(404);
        let point = fx.dataset.points[0].clone();
        let eps = draw(&mut rng, 2);
        let latent = forward_diffuse(&point, t, &eps, &fx.schedule)?;
        let phi = fx.model.null_embedding().to_vec();
        let lambda2_t = anneal_lambda2(t, total, config.gamma, config.lambda2);
        let (_, exact) = alignment_gradient(
            &fx.model, &latent, &fx.schedule, 0, &phi, &phi, lambda2_t, &config, &reward,
        )?;
        let cache = StepCache::new(&fx.model, &latent, 0, &phi, config.guidance_scale)?;
        let mut sims = Vec::new();
        for seed in 0..30u64 {
            let mode = GradientMode::ZerothOrder {
                mu: 1e-3,
                num_samples: 4096,
                seed: 40_000 + seed,
            };
            let est = zo_gradient(
                |cand: &[f64]| {
                    Ok(crate::align::alignment_objective_cached(
                        &fx.model,
                        &latent,
                        &fx.schedule,
                        cand,
                        &phi,
                        config.lambda1,
                        lambda2_t,
                        config.sigma_phi_sq,
                        config.guidance_scale,
                        &reward,
                        &cache,
                    )?
                    .objective)
                },
                &phi,
                &mode,
            )?;
            sims.push(math::cosine_similarity(&est, &exact));
        }
        let mean_cos = math::mean(&sims);

        // Quadratic bias sweep: J(φ) = −‖φ‖². In expectation the estimator
        // is unbiased for a quadratic, so the sweep shares the directions
        // across μ values (same seed); the forward-difference term
        // μ·‖v‖²·v then dominates the measured deviation and shrinks with
        // μ. Averaged over 20 direction sets of 10^4 samples.
        let phi_q: Vec<f64> = vec![0.01; 8];
        let truth: Vec<f64> = phi_q.iter().map(|p| -2.0 * p).collect();
        let mut biases = vec![0.0; 3];
        let outer = 20u64;
        for rep in 0..outer {
            for (i, mu) in [1e-1, 1e-2, 1e-3].into_iter().enumerate() {
                let mode = GradientMode::ZerothOrder {
                    mu,
                    num_samples: 10_000,
                    seed: 4242 + rep,
                };
                let est = zo_gradient(|x: &[f64]| Ok(-math::sum_sq(x)), &phi_q, &mode)?;
                biases[i] += math::norm(&math::sub(&est, &truth)) / outer as f64;
            }
        }
        let monotone = biases[0] > biases[1] && biases[1] > biases[2];
        let passed = mean_cos >= 0.9 && monotone;
        Ok((
            passed,
            format!(
                "mean cosine {mean_cos:.4} (need >= 0.9); quadratic bias {:.4e} > {:.4e} > {:.4e}: {monotone}",
                biases[0], biases[1], biases[2]
            ),
        ))
    })
}

/// Exact annealing and inner-step schedule identities, including the
/// boundary at T − t = 87 for gamma = 0.008.
pub fn a5_schedule_identities() -> CriterionReport {
    criterion("A5", || {
        let (total, gamma, lambda2) = (100usize, 0.008, 0.002);
        let (n_min, n_max) = (5usize, 25usize);
        let mut ok = anneal_lambda2(total, total, gamma, lambda2) == lambda2;
        ok &= inner_steps(total, total, gamma, n_min, n_max) == n_min;
        for t in 0..=total {
            let hot = total - t >= 87;
            let l = anneal_lambda2(t, total, gamma, lambda2);
            let n = inner_steps(t, total, gamma, n_min, n_max);
            if hot {
                ok &= l == 0.0 && n == n_max;
            } else {
                ok &= l > 0.0 && l <= lambda2 && n < n_max;
            }
        }
        // constant when the bounds coincide
        ok &= (0..=total).all(|t| inner_steps(t, total, gamma, 7, 7) == 7);
        Ok((
            ok,
            format!(
                "lambda2_T = lambda2, N_T = n_min, boundary at T-t=87: {} / {} / {}",
                anneal_lambda2(13, total, gamma, lambda2),
                inner_steps(13, total, gamma, n_min, n_max),
                inner_steps(14, total, gamma, n_min, n_max)
            ),
        ))
    })
}

/// With lambda1 = 0 and a single particle, alignment consumes the same noise
/// stream as plain sampling and the outputs are bitwise identical.
pub fn a6_reduction_identity() -> CriterionReport {
    criterion("A6", || {
        let fx = fixture();
        let reward = fx.config.reward.clone();
        let mut all_equal = true;
        for seed in 0..30u64 {
            let config = AlignmentConfig {
                lambda1: 0.0,
                particles: 1,
                seed: 600 + seed,
                ..AlignmentConfig::default()
            };
            let (aligned, record) = align_sample(&fx.model, &fx.schedule, 0, &config, &reward)?;
            let (plain, _) = sample_unaligned(
                &fx.model,
                &fx.schedule,
                0,
                config.guidance_scale,
                600 + seed,
            )?;
            let bitwise = aligned.len() == plain.len()
                && aligned
                    .iter()
                    .zip(&plain)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            all_equal &= bitwise && record.final_phi_drift == 0.0;
        }
        Ok((
            all_equal,
            "30 seeds: aligned output bitwise equals plain CFG sampling, phi' never moved".into(),
        ))
    })
}

struct A7Outcome {
    coverage_ok: bool,
    min_share: f64,
    base_mean: f64,
    aligned_mean: f64,
    improvement_ok: bool,
    contrast_ok: bool,
    sg_mean: f64,
    no_mean: f64,
    z_sg: f64,
    z_no: f64,
    heldout_ok: bool,
    heldout_means: [f64; 3],
    monotone_ok: bool,
    nmax_means: Vec<f64>,
}

fn a7_body() -> Result<A7Outcome> {
    let fx = fixture();
    let modes = fx.config.dataset.class_means();
    let stds = fx.config.dataset.class_stds();
    let reward = fx.config.reward.clone();
    let class = fx.config.class_label;

    // (a) unconditional mode coverage: every mode gets >= 5% of 2000 samples
    let mut counts = vec![0usize; modes.len()];
    for i in 0..2000u64 {
        let (x0, _) = sample_unaligned(&fx.model, &fx.schedule, class, 0.0, derive_seed(70, i as usize))?;
        counts[nearest_mode(&x0, &modes).0] += 1;
    }
    let min_share = counts.iter().copied().min().unwrap_or(0) as f64 / 2000.0;
    let coverage_ok =
        min_share >= pinned::MODE_COVERAGE_MIN && fx.final_loss <= pinned::TRAIN_FINAL_LOSS_MAX;

    // (b) target improvement over the unaligned baseline at the default
    // configuration, measured against the baseline-to-optimum gap
    let n_b = 50usize;
    let mut base = Vec::with_capacity(n_b);
    let mut aligned = Vec::with_capacity(n_b);
    for i in 0..n_b {
        let seed = derive_seed(71, i);
        let (xb, _) = sample_unaligned(&fx.model, &fx.schedule, class, 2.0, seed)?;
        base.push(reward.evaluate(&xb));
        let config = AlignmentConfig {
            seed,
            ..AlignmentConfig::default()
        };
        let (xa, _) = align_sample(&fx.model, &fx.schedule, class, &config, &reward)?;
        aligned.push(reward.evaluate(&xa));
    }
    let base_mean = math::mean(&base);
    let aligned_mean = math::mean(&aligned);
    // TargetMode has optimum 0, so the gap is |base_mean|
    let gap = -base_mean;
    let improvement_ok = aligned_mean - base_mean >= pinned::TARGET_GAP_FRACTION_MIN * gap;

    // (c) over-optimisation contrast at matched target reward
    let n_c = 100usize;
    let heldout = RewardSpec::RadialBand {
        r0: 1.5,
        width: 0.3,
    };
    let mut ntta_r = Vec::with_capacity(n_c);
    let mut sg_r = Vec::with_capacity(n_c);
    let mut no_r = Vec::with_capacity(n_c);
    let mut held = [0.0f64; 3];
    let (mut off_ntta, mut off_sg, mut off_no) = (0usize, 0usize, 0usize);
    for i in 0..n_c {
        let seed = derive_seed(72, i);
        let config = AlignmentConfig {
            seed,
            ..AlignmentConfig::default()
        };
        let (xa, _) = align_sample(&fx.model, &fx.schedule, class, &config, &reward)?;
        ntta_r.push(reward.evaluate(&xa));
        held[0] += heldout.evaluate(&xa) / n_c as f64;
        off_ntta += usize::from(crate::harness::is_off_manifold(&xa, &modes, &stds));
        let (xs, _) = step_guidance_sample(
            &fx.model,
            &fx.schedule,
            class,
            pinned::MATCHED_STEP_GUIDANCE_ZETA,
            &reward,
            2.0,
            seed,
        )?;
        sg_r.push(reward.evaluate(&xs));
        held[1] += heldout.evaluate(&xs) / n_c as f64;
        off_sg += usize::from(crate::harness::is_off_manifold(&xs, &modes, &stds));
        let (xn, _) = noise_opt_sample(
            &fx.model,
            &fx.schedule,
            class,
            pinned::MATCHED_NOISE_OPT_STEPS,
            pinned::MATCHED_NOISE_OPT_RATE,
            &reward,
            2.0,
            seed,
        )?;
        no_r.push(reward.evaluate(&xn));
        held[2] += heldout.evaluate(&xn) / n_c as f64;
        off_no += usize::from(crate::harness::is_off_manifold(&xn, &modes, &stds));
    }
    let (sg_mean, no_mean) = (math::mean(&sg_r), math::mean(&no_r));
    // matched: the tuned baselines must reach at least the alignment's target
    // level (no significant shortfall), then show a significantly higher
    // off-manifold rate
    let matched_sg = paired_z(&sg_r, &ntta_r) >= -1.645;
    let matched_no = paired_z(&no_r, &ntta_r) >= -1.645;
    let z_sg = proportion_z(off_sg, off_ntta, n_c);
    let z_no = proportion_z(off_no, off_ntta, n_c);
    let contrast_ok = matched_sg && matched_no && z_sg > 1.645 && z_no > 1.645;
    // the held-out on-ring reward must degrade less under alignment than
    // under either reward-chasing baseline
    let heldout_ok = held[0] > held[1] && held[0] > held[2];

    // (d) monotone optimisation intensity over n_max
    let n_d = 30usize;
    let mut nmax_means = Vec::new();
    let mut per_nmax: Vec<Vec<f64>> = Vec::new();
    for n_max in [25usize, 55, 85] {
        let mut vals = Vec::with_capacity(n_d);
        for i in 0..n_d {
            let config = AlignmentConfig {
                n_max,
                seed: derive_seed(73, i),
                ..AlignmentConfig::default()
            };
            let (xa, _) = align_sample(&fx.model, &fx.schedule, class, &config, &reward)?;
            vals.push(reward.evaluate(&xa));
        }
        nmax_means.push(math::mean(&vals));
        per_nmax.push(vals);
    }
    let monotone_ok = paired_z(&per_nmax[1], &per_nmax[0]) >= -1.645
        && paired_z(&per_nmax[2], &per_nmax[1]) >= -1.645;

    Ok(A7Outcome {
        coverage_ok,
        min_share,
        base_mean,
        aligned_mean,
        improvement_ok,
        contrast_ok,
        sg_mean,
        no_mean,
        z_sg,
        z_no,
        heldout_ok,
        heldout_means: held,
        monotone_ok,
        nmax_means,
    })
}

/// End-to-end alignment behaviour on the 8-mode ring: mode coverage, target
/// improvement over the unaligned baseline, over-optimisation contrast
/// against tuned guidance/noise-opt baselines, and monotone intensity in
/// n_max.
pub fn a7_end_to_end_alignment() -> CriterionReport {
    criterion("A7", || {
        let o = a7_body()?;
        let passed =
            o.coverage_ok && o.improvement_ok && o.contrast_ok && o.heldout_ok && o.monotone_ok;
        Ok((
            passed,
            format!(
                "coverage(min share {:.3}): {}; target {:.4} vs base {:.4} (gap fraction {:.2}): {}; contrast sg {:.4}/z={:.2} no {:.4}/z={:.2}: {}; heldout ntta/sg/no {:.2}/{:.2}/{:.2}: {}; n_max means {:?}: {}",
                o.min_share,
                o.coverage_ok,
                o.aligned_mean,
                o.base_mean,
                (o.aligned_mean - o.base_mean) / (-o.base_mean),
                o.improvement_ok,
                o.sg_mean,
                o.z_sg,
                o.no_mean,
                o.z_no,
                o.contrast_ok,
                o.heldout_means[0],
                o.heldout_means[1],
                o.heldout_means[2],
                o.heldout_ok,
                o.nmax_means,
                o.monotone_ok
            ),
        ))
    })
}

/// Greedy particle filtering: the selected reward at K=10 dominates K=1
/// (paired, one-sided 99% over 200 seeds), and the K=1 path bitwise matches
/// a plain transition draw.
pub fn a8_particle_ablation() -> CriterionReport {
    criterion("A8", || {
        let fx = fixture();
        let reward = fx.config.reward.clone();
        let t = 60usize;
        let class = fx.config.class_label;
        let phi = fx.model.null_embedding().to_vec();
        let mut rng = ChaCha12Rng::seed_from_u64(808);
        let point = fx.dataset.points[3].clone();
        let eps = draw(&mut rng, 2);
        let latent = forward_diffuse(&point, t, &eps, &fx.schedule)?;

        let run_k = |k: usize, seed: u64| -> Result<(f64, Vec<f64>)> {
            let config = AlignmentConfig {
                particles: k,
                ..AlignmentConfig::default()
            };
            let mut state = AlignmentState::new(latent.clone(), phi.clone(), config.learning_rate);
            let cache = StepCache::new(&fx.model, &latent, class, &phi, config.guidance_scale)?;
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let diag = greedy_particle_step(
                &fx.model,
                &fx.schedule,
                &mut state,
                class,
                &config,
                &reward,
                &cache,
                &mut rng,
            )?;
            Ok((diag.selected_reward, state.latent.x))
        };

        let n = 200usize;
        let mut r10 = Vec::with_capacity(n);
        let mut r1 = Vec::with_capacity(n);
        for i in 0..n {
            let seed = derive_seed(80, i);
            r10.push(run_k(10, seed)?.0);
            r1.push(run_k(1, seed)?.0);
        }
        let z = paired_z(&r10, &r1);

        // K = 1 bitwise equals one plain transition draw
        let seed = derive_seed(80, 7);
        let (_, k1_next) = run_k(1, seed)?;
        let cache = StepCache::new(&fx.model, &latent, class, &phi, 2.0)?;
        let eps_u = fx.model.predict_noise(&latent.x, t, &phi)?;
        let tilde = crate::diffusion::cfg_combine(&eps_u, &cache.eps_cond, 2.0)?;
        let mut plain_rng = ChaCha12Rng::seed_from_u64(seed);
        let noise = draw(&mut plain_rng, 2);
        let plain = ddpm_step(&latent, &tilde, &noise, &fx.schedule)?;
        let bitwise = plain
            .x
            .iter()
            .zip(&k1_next)
            .all(|(a, b)| a.to_bits() == b.to_bits());

        let passed = z >= 2.326 && bitwise;
        Ok((
            passed,
            format!(
                "selected reward K=10 {:.4} vs K=1 {:.4} (paired z {:.2}, need >= 2.326); K=1 bitwise: {bitwise}",
                math::mean(&r10),
                math::mean(&r1),
                z
            ),
        ))
    })
}

/// Tweedie on the analytic Gaussian denoiser equals the closed-form
/// posterior mean for every timestep, rel err <= 1e-9.
pub fn a9_tweedie_exactness() -> CriterionReport {
    criterion("A9", || {
        let sched = build_schedule(100, 1e-4, 0.02)?;
        let den = AnalyticGaussianDenoiser::new(vec![0.8, -0.4], 0.6, sched.clone())?;
        let mut rng = ChaCha12Rng::seed_from_u64(909);
        let mut max_rel: f64 = 0.0;
        for t in 1..=100 {
            let x = vec![
                rng.sample::<f64, _>(StandardNormal) * 1.2 + 0.3,
                rng.sample::<f64, _>(StandardNormal) * 1.2 - 0.2,
            ];
            let state = LatentState::new(x.clone(), t);
            let eps = den.predict(&x, t, &[])?;
            let via = tweedie_x0(&state, &eps, &sched)?;
            let direct = den.posterior_mean(&x, t);
            for i in 0..2 {
                let rel = (via[i] - direct[i]).abs() / direct[i].abs().max(1e-12);
                max_rel = max_rel.max(rel);
            }
        }
        Ok((
            max_rel <= 1e-9,
            format!("max rel err {max_rel:.3e} over t = 1..=100 (tol 1e-9)"),
        ))
    })
}

/// Sweeping the weight of a two-target combo trades the two rewards off
/// monotonically (statistically, paired over 30 seeds per weight).
pub fn a10_multi_objective_sweep() -> CriterionReport {
    criterion("A10", || {
        let fx = fixture();
        let modes = fx.config.dataset.class_means();
        let ra = RewardSpec::TargetMode {
            mu_star: modes[1].clone(),
        };
        let rb = RewardSpec::TargetMode {
            mu_star: modes[7].clone(),
        };
        let weights = [0.0, 0.25, 0.5, 0.75, 1.0];
        let n = 30usize;
        let mut a_vals: Vec<Vec<f64>> = Vec::new();
        let mut b_vals: Vec<Vec<f64>> = Vec::new();
        for w in weights {
            let combo = RewardSpec::WeightedCombo {
                w,
                a: Box::new(ra.clone()),
                b: Box::new(rb.clone()),
            };
            let mut av = Vec::with_capacity(n);
            let mut bv = Vec::with_capacity(n);
            for i in 0..n {
                let config = AlignmentConfig {
                    seed: derive_seed(100, i),
                    ..AlignmentConfig::default()
                };
                let (x0, _) = align_sample(&fx.model, &fx.schedule, 0, &config, &combo)?;
                av.push(ra.evaluate(&x0));
                bv.push(rb.evaluate(&x0));
            }
            a_vals.push(av);
            b_vals.push(bv);
        }
        let mut ok = true;
        for i in 1..weights.len() {
            ok &= paired_z(&a_vals[i], &a_vals[i - 1]) >= -1.645; // R_A nondecreasing in w
            ok &= paired_z(&b_vals[i - 1], &b_vals[i]) >= -1.645; // R_B nonincreasing in w
        }
        let a_means: Vec<f64> = a_vals.iter().map(|v| math::mean(v)).collect();
        let b_means: Vec<f64> = b_vals.iter().map(|v| math::mean(v)).collect();
        Ok((
            ok,
            format!("R_A means {a_means:.3?} up, R_B means {b_means:.3?} down across w = {weights:?}"),
        ))
    })
}

/// Plumbing: bit-exact checkpoint round trip and a result file that re-runs
/// bit-for-bit from its own config echo.
pub fn a11_plumbing() -> CriterionReport {
    criterion("A11", || {
        let fx = fixture();
        let dir = std::env::temp_dir().join(format!("ntta-selftest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| crate::error::Error::io(&dir, e))?;

        // checkpoint round trip on the trained model
        let ck_path = dir.join("fixture.ckpt");
        save_checkpoint(
            &fx.model,
            &fx.schedule,
            fx.config.schedule.beta_start,
            fx.config.schedule.beta_end,
            &TrainMeta {
                steps: fx.config.train.steps as u64,
                seed: fx.config.train.seed,
                final_loss: fx.final_loss,
            },
            &ck_path,
        )?;
        let ck = load_checkpoint(&ck_path)?;
        let round_trip = ck
            .model
            .flat_params()
            .iter()
            .zip(fx.model.flat_params())
            .all(|(a, b)| a.to_bits() == b.to_bits());

        // run a small experiment, emit, reload the echoed config, re-run
        let mut cfg = fx.config.clone();
        cfg.method = MethodSpec::Unaligned;
        cfg.sweep = crate::harness::SweepSpec::None;
        cfg.seeds = vec![1, 2];
        cfg.samples_per_seed = 2;
        cfg.model.checkpoint = Some(ck_path);
        cfg.out_dir = dir.clone();
        let resolved = ResolvedModel {
            model: fx.model.clone(),
            schedule: fx.schedule.clone(),
            meta: TrainMeta::default(),
        };
        let result = run_experiment_with(&cfg, Some(&resolved))?;
        let paths = emit_results(&result, OutputFormat::Json, &dir)?;
        let echoed = crate::harness::ExperimentConfig::load(&paths[0])?;
        let rerun = run_experiment_with(&echoed, None)?;
        let rerunnable = result.cells.len() == rerun.cells.len()
            && result.cells.iter().zip(&rerun.cells).all(|(a, b)| {
                a.target_mean.to_bits() == b.target_mean.to_bits()
                    && a.denoiser_evals == b.denoiser_evals
                    && a.heldout_means
                        .iter()
                        .zip(&b.heldout_means)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            });

        Ok((
            round_trip && rerunnable,
            format!("checkpoint round trip bit-exact: {round_trip}; result re-run from config echo bit-exact: {rerunnable}"),
        ))
    })
}
