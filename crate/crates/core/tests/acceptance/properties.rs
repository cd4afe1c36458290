//! Trained-model property tests that ride along with the acceptance suite
//! so the training fixture is paid for once per binary.

use ntta::align::{align_sample, AlignmentConfig};
use ntta::baselines::{best_of_n, sample_unaligned, step_guidance_sample};
use ntta::data::nearest_mode;
use ntta::harness::{
    derive_seed, expand_sweep, run_experiment_with, MethodSpec, ResolvedModel, SweepSpec,
};
use ntta::math;
use ntta::rewards::RewardSpec;
use ntta::selftest::fixture;

fn target_reward() -> RewardSpec {
    fixture().config.reward.clone()
}

/// Increasing the regularisation weight does not increase the final
/// embedding drift (paired over 50 seeds, one-sided).
#[test]
fn lambda2_monotonically_caps_drift() {
    let fx = fixture();
    let reward = target_reward();
    let lambda2_grid = [0.0005, 0.002, 0.01];
    let n = 50usize;
    let mut drifts: Vec<Vec<f64>> = Vec::new();
    for lambda2 in lambda2_grid {
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            let config = AlignmentConfig {
                lambda2,
                seed: derive_seed(900, i),
                ..AlignmentConfig::default()
            };
            let (_, record) = align_sample(&fx.model, &fx.schedule, 0, &config, &reward).unwrap();
            v.push(record.final_phi_drift);
        }
        drifts.push(v);
    }
    for w in drifts.windows(2) {
        let diffs: Vec<f64> = w[1].iter().zip(&w[0]).map(|(hi, lo)| hi - lo).collect();
        let mean = math::mean(&diffs);
        let se = math::std_err(&diffs).max(1e-12);
        // allow no statistically significant increase
        assert!(
            mean / se <= 1.645,
            "drift grew with lambda2: mean diff {mean} (z {})",
            mean / se
        );
    }
    println!(
        "[prop] lambda2 drift means: {:?}",
        drifts.iter().map(|v| math::mean(v)).collect::<Vec<_>>()
    );
}

/// Stronger guidance concentrates class-conditioned samples on the class
/// mode.
#[test]
fn cfg_scale_sharpens_class_concentration() {
    let fx = fixture();
    let mode0 = &fx.config.dataset.class_means()[0];
    let n = 300usize;
    let mean_dist = |s: f64| {
        let mut acc = 0.0;
        for i in 0..n {
            let (x0, _) =
                sample_unaligned(&fx.model, &fx.schedule, 0, s, derive_seed(901, i)).unwrap();
            acc += math::norm(&math::sub(&x0, mode0));
        }
        acc / n as f64
    };
    let d1 = mean_dist(1.0);
    let d2 = mean_dist(2.0);
    println!("[prop] mean distance to class mode: s=1 {d1:.4}, s=2 {d2:.4}");
    assert!(d2 < d1, "guidance did not sharpen: {d2} vs {d1}");
}

/// Class-conditioned sampling lands near the conditioned mode.
#[test]
fn conditional_samples_concentrate_on_class_mode() {
    let fx = fixture();
    let modes = fx.config.dataset.class_means();
    let n = 200usize;
    let mut acc = 0.0;
    let mut correct = 0usize;
    for i in 0..n {
        let (x0, _) = sample_unaligned(&fx.model, &fx.schedule, 3, 2.0, derive_seed(902, i)).unwrap();
        acc += math::norm(&math::sub(&x0, &modes[3]));
        correct += usize::from(nearest_mode(&x0, &modes).0 == 3);
    }
    let mean_dist = acc / n as f64;
    println!("[prop] class-3 mean distance {mean_dist:.4}, nearest-mode accuracy {correct}/{n}");
    assert!(
        mean_dist <= ntta::selftest::pinned::CLASS_CONCENTRATION_DIST_MAX,
        "mean distance {mean_dist}"
    );
    assert!(correct as f64 / n as f64 >= 0.9);
}

/// The inner loop achieves a net objective improvement in at least 90% of
/// timesteps under the default configuration.
#[test]
fn inner_objective_mostly_nondecreasing() {
    let fx = fixture();
    let reward = target_reward();
    let mut fractions = Vec::new();
    for i in 0..20usize {
        let config = AlignmentConfig {
            seed: derive_seed(903, i),
            ..AlignmentConfig::default()
        };
        let (_, record) = align_sample(&fx.model, &fx.schedule, 0, &config, &reward).unwrap();
        fractions.push(record.net_improvement_fraction());
    }
    let mean = math::mean(&fractions);
    println!("[prop] net objective improvement fraction {mean:.3}");
    assert!(mean >= ntta::selftest::pinned::NONDECREASING_FRACTION_MIN);
}

/// Mild step guidance improves the target reward over unaligned sampling.
#[test]
fn small_step_guidance_improves_target() {
    let fx = fixture();
    let reward = target_reward();
    let n = 60usize;
    let mut base = Vec::with_capacity(n);
    let mut guided = Vec::with_capacity(n);
    for i in 0..n {
        let seed = derive_seed(904, i);
        let (xb, _) = sample_unaligned(&fx.model, &fx.schedule, 0, 2.0, seed).unwrap();
        base.push(reward.evaluate(&xb));
        let (xg, _) =
            step_guidance_sample(&fx.model, &fx.schedule, 0, 0.05, &reward, 2.0, seed).unwrap();
        guided.push(reward.evaluate(&xg));
    }
    println!(
        "[prop] step guidance: base {:.4}, guided {:.4}",
        math::mean(&base),
        math::mean(&guided)
    );
    assert!(math::mean(&guided) > math::mean(&base));
}

/// Best-of-N mean reward is nondecreasing in N (statistically over seeds).
#[test]
fn best_of_n_nondecreasing() {
    let fx = fixture();
    let reward = target_reward();
    let n_seeds = 40usize;
    let mut means = Vec::new();
    for n in [1usize, 4, 16] {
        let mut v = Vec::with_capacity(n_seeds);
        for i in 0..n_seeds {
            let (x0, _) = best_of_n(
                &fx.model,
                &fx.schedule,
                0,
                n,
                &reward,
                2.0,
                derive_seed(905, i),
            )
            .unwrap();
            v.push(reward.evaluate(&x0));
        }
        means.push(math::mean(&v));
    }
    println!("[prop] best-of-N means {means:?}");
    assert!(means[1] >= means[0]);
    assert!(means[2] >= means[1]);
}

/// The harness sweep over n_max reproduces the monotone Pareto ordering and
/// reports exact instrumentation counts.
#[test]
fn sweep_pareto_ordering_and_instrumentation() {
    let fx = fixture();
    let resolved = ResolvedModel {
        model: fx.model.clone(),
        schedule: fx.schedule.clone(),
        meta: Default::default(),
    };
    let mut cfg = fx.config.clone();
    cfg.method = MethodSpec::NullTta;
    cfg.seeds = vec![11, 12, 13, 14, 15, 16, 17, 18];
    cfg.samples_per_seed = 1;
    cfg.sweep = SweepSpec::NMax {
        values: vec![25, 55],
    };
    let result = run_experiment_with(&cfg, Some(&resolved)).unwrap();
    assert!(!result.has_failures());
    assert_eq!(result.groups.len(), 2);
    // sweep cardinality: groups × seeds rows
    assert_eq!(result.cells.len(), 2 * cfg.seeds.len());
    // instrumentation: counters equal the closed-form formulas
    let points = expand_sweep(&cfg).unwrap();
    for (group, point) in result.groups.iter().zip(&points) {
        let expect_d = ntta::align::expected_denoiser_evals(100, &point.align);
        let expect_r = ntta::align::expected_reward_evals(100, &point.align);
        let cells: Vec<_> = result
            .cells
            .iter()
            .filter(|c| c.sweep_label == group.sweep_label)
            .collect();
        for c in &cells {
            assert_eq!(c.denoiser_evals, expect_d);
            assert_eq!(c.reward_evals, expect_r);
        }
    }
    // target mean nondecreasing in n_max, with one-SE slack
    let lo = &result.groups[0];
    let hi = &result.groups[1];
    println!(
        "[prop] sweep target means: n_max=25 {:.4}, n_max=55 {:.4}",
        lo.target_mean, hi.target_mean
    );
    assert!(hi.target_mean >= lo.target_mean - lo.target_std_err.max(hi.target_std_err));
}

/// The zeroth-order gradient mode (4 directions, μ = 0.02) aligns almost as
/// well as exact gradients without touching differentiability.
#[test]
fn zeroth_order_mode_aligns_end_to_end() {
    let fx = fixture();
    let reward = target_reward();
    let n = 30usize;
    let mut zo_vals = Vec::with_capacity(n);
    let mut base_vals = Vec::with_capacity(n);
    for i in 0..n {
        let seed = derive_seed(906, i);
        let config = AlignmentConfig {
            grad_mode: ntta::grad::GradientMode::zeroth_order_default(seed),
            seed,
            ..AlignmentConfig::default()
        };
        let (x0, record) = align_sample(&fx.model, &fx.schedule, 0, &config, &reward).unwrap();
        assert_eq!(
            record.denoiser_evals,
            ntta::align::expected_denoiser_evals(100, &config)
        );
        zo_vals.push(reward.evaluate(&x0));
        let (xb, _) = sample_unaligned(&fx.model, &fx.schedule, 0, 2.0, seed).unwrap();
        base_vals.push(reward.evaluate(&xb));
    }
    let (zo, base) = (math::mean(&zo_vals), math::mean(&base_vals));
    println!("[prop] zeroth-order alignment: target {zo:.4} vs unaligned {base:.4}");
    assert!(zo > base + 0.5 * (0.0 - base), "zo {zo} vs base {base}");
}
