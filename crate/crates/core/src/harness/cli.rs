//! The `ntta` command line: train a model, run a single aligned sample,
//! sweep experiments, compare methods, or run the verification suite.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::align::align_sample;
use crate::error::{Error, Result};
use crate::grad::GradientMode;
use crate::harness::{
    default_experiment, emit_pareto_data, emit_results, resolve_model, run_experiment_with,
    train_to_checkpoint, ExperimentConfig, OutputFormat,
};

#[derive(Parser)]
#[command(
    name = "ntta",
    about = "Test-time alignment of a toy diffusion model via null-embedding optimisation",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default, Clone)]
struct CommonArgs {
    /// Experiment configuration (TOML; a results JSON with a config echo is
    /// also accepted). Defaults to the built-in 8-mode ring experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single-seed override (replaces the config's seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Result file format.
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
}

/// Per-field overrides for the alignment configuration.
#[derive(Args, Debug, Default, Clone)]
struct AlignOverrides {
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    sigma_phi_sq: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    n_min: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    /// Particle count K.
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Gradient mode: "analytic" or "zeroth_order".
    #[arg(long)]
    grad_mode: Option<String>,
    /// Zeroth-order perturbation scale μ.
    #[arg(long)]
    zo_mu: Option<f64>,
    /// Zeroth-order direction count.
    #[arg(long)]
    zo_samples: Option<usize>,
}

impl AlignOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        let a = &mut cfg.align;
        if let Some(v) = self.lambda1 {
            a.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            a.lambda2 = v;
        }
        if let Some(v) = self.sigma_phi_sq {
            a.sigma_phi_sq = v;
        }
        if let Some(v) = self.gamma {
            a.gamma = v;
        }
        if let Some(v) = self.n_min {
            a.n_min = v;
        }
        if let Some(v) = self.n_max {
            a.n_max = v;
        }
        if let Some(v) = self.particles {
            a.particles = v;
        }
        if let Some(v) = self.guidance_scale {
            a.guidance_scale = v;
        }
        if let Some(v) = self.learning_rate {
            a.learning_rate = v;
        }
        if let Some(mode) = &self.grad_mode {
            a.grad_mode = match mode.as_str() {
                "analytic" => GradientMode::Analytic,
                "zeroth_order" | "zo" => GradientMode::zeroth_order_default(a.seed),
                other => {
                    return Err(Error::Config(format!(
                        "unknown gradient mode '{other}' (expected analytic|zeroth_order)"
                    )))
                }
            };
        }
        if self.zo_mu.is_some() || self.zo_samples.is_some() {
            match &mut a.grad_mode {
                GradientMode::ZerothOrder {
                    mu, num_samples, ..
                } => {
                    if let Some(v) = self.zo_mu {
                        *mu = v;
                    }
                    if let Some(v) = self.zo_samples {
                        *num_samples = v;
                    }
                }
                GradientMode::Analytic => {
                    return Err(Error::Config(
                        "--zo-mu/--zo-samples need --grad-mode zeroth_order".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser on the configured dataset and write a checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run one aligned sample and print the trajectory summary.
    Align {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        overrides: AlignOverrides,
        /// Class label to condition on.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Run the configured experiment sweep and emit result files.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        overrides: AlignOverrides,
    },
    /// Run every configured method and emit merged Pareto data.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        overrides: AlignOverrides,
    },
    /// Run the full verification suite; exits nonzero on any failure.
    Selftest {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => default_experiment(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join("model.ckpt");
    let meta = train_to_checkpoint(&cfg, &path)?;
    println!(
        "trained {} steps (final loss {:.6}); checkpoint written to {}",
        meta.steps,
        meta.final_loss,
        path.display()
    );
    Ok(())
}

fn cmd_align(common: &CommonArgs, overrides: &AlignOverrides, class: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    overrides.apply(&mut cfg)?;
    if let Some(c) = class {
        cfg.class_label = c;
    }
    if let Some(seed) = common.seed {
        cfg.align.seed = seed;
    }
    cfg.validate()?;
    let resolved = resolve_model(&cfg)?;
    let (x0, record) = align_sample(
        &resolved.model,
        &resolved.schedule,
        cfg.class_label,
        &cfg.align,
        &cfg.reward,
    )?;
    println!("final sample: {x0:?}");
    println!("target reward: {:.6}", cfg.reward.evaluate(&x0));
    println!("{}", record.summary());
    if let Some(out) = &common.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("trajectory.json");
        let text = serde_json::to_string_pretty(&record)
            .map_err(|e| Error::Config(format!("json serialisation failed: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        println!("trajectory record written to {}", path.display());
    }
    Ok(())
}

fn cmd_sweep(common: &CommonArgs, overrides: &AlignOverrides) -> Result<bool> {
    let mut cfg = load_config(common)?;
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    let result = run_experiment_with(&cfg, None)?;
    let paths = emit_results(&result, common.format, &cfg.out_dir)?;
    for p in &paths {
        println!("wrote {}", p.display());
    }
    for g in &result.groups {
        println!(
            "{} [{}]: target {:.6} ± {:.6}, off-manifold {:.3}",
            result.method, g.sweep_label, g.target_mean, g.target_std_err, g.off_manifold_rate
        );
    }
    Ok(result.has_failures())
}

fn cmd_compare(common: &CommonArgs, overrides: &AlignOverrides) -> Result<bool> {
    let mut cfg = load_config(common)?;
    overrides.apply(&mut cfg)?;
    if cfg.compare.is_empty() {
        return Err(Error::Config(
            "compare needs a nonempty `compare` method list in the config".into(),
        ));
    }
    let resolved = resolve_model(&cfg)?;
    let mut results = Vec::new();
    let mut any_failed = false;
    for method in cfg.compare.clone() {
        let mut mc = cfg.clone();
        mc.method = method;
        if !matches!(method, crate::harness::MethodSpec::NullTta) {
            mc.sweep = crate::harness::SweepSpec::None;
        }
        mc.validate()?;
        let result = run_experiment_with(&mc, Some(&resolved))?;
        any_failed |= result.has_failures();
        let dir = cfg.out_dir.join(method.name());
        emit_results(&result, common.format, &dir)?;
        results.push(result);
    }
    let pareto = emit_pareto_data(&results, &cfg.out_dir.join("pareto.csv"))?;
    println!("wrote {}", pareto.display());
    Ok(any_failed)
}

fn cmd_selftest(common: &CommonArgs) -> Result<bool> {
    let reports = crate::selftest::run_all(common.out.as_deref(), common.format)?;
    let mut all_passed = true;
    for r in &reports {
        println!(
            "[{}] {} ({:.1}s) {}",
            r.id,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        );
        all_passed &= r.passed;
    }
    Ok(!all_passed)
}

/// Parses and dispatches; returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders --help/--version as "errors" with status 0
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Train { common } => cmd_train(common).map(|_| false),
        Command::Align {
            common,
            overrides,
            class,
        } => cmd_align(common, overrides, *class).map(|_| false),
        Command::Sweep { common, overrides } => cmd_sweep(common, overrides),
        Command::Compare { common, overrides } => cmd_compare(common, overrides),
        Command::Selftest { common } => cmd_selftest(common),
    };
    match outcome {
        Ok(false) => 0,
        Ok(true) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_and_flags_exit_nonzero() {
        assert_ne!(run(["ntta"]), 0);
        assert_ne!(run(["ntta", "frobnicate"]), 0);
        assert_ne!(run(["ntta", "align", "--no-such-flag"]), 0);
        assert_ne!(run(["ntta", "sweep", "--format", "xml"]), 0);
    }

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(run(["ntta", "--help"]), 0);
        assert_eq!(run(["ntta", "--version"]), 0);
        assert_eq!(run(["ntta", "align", "--help"]), 0);
    }

    #[test]
    fn missing_config_file_fails() {
        assert_ne!(run(["ntta", "sweep", "--config", "/no/such/file.toml"]), 0);
    }

    #[test]
    fn overrides_apply_to_alignment_config() {
        let cli = Cli::try_parse_from([
            "ntta", "align", "--lambda1", "5.5", "--n-max", "42", "--particles", "9",
            "--grad-mode", "zeroth_order", "--zo-mu", "0.5", "--zo-samples", "16",
        ])
        .unwrap();
        let Command::Align { overrides, .. } = &cli.command else {
            panic!("expected align");
        };
        let mut cfg = default_experiment();
        overrides.apply(&mut cfg).unwrap();
        assert_eq!(cfg.align.lambda1, 5.5);
        assert_eq!(cfg.align.n_max, 42);
        assert_eq!(cfg.align.particles, 9);
        assert_eq!(
            cfg.align.grad_mode,
            GradientMode::ZerothOrder {
                mu: 0.5,
                num_samples: 16,
                seed: 0
            }
        );
    }

    #[test]
    fn zo_flags_require_zo_mode() {
        let cli = Cli::try_parse_from(["ntta", "align", "--zo-mu", "0.5"]).unwrap();
        let Command::Align { overrides, .. } = &cli.command else {
            panic!("expected align");
        };
        let mut cfg = default_experiment();
        assert!(overrides.apply(&mut cfg).is_err());
    }
}
