//! Gradients of scalar objectives with respect to an embedding vector,
//! either exactly (reverse-mode through the recorded computation) or via the
//! zeroth-order estimator
//!
//!   ∇̂J ≈ (1/(K·μ)) Σ_k [J(φ + μ·v_k) − J(φ)]·v_k,   v_k ~ N(0, I),
//!
//! which needs only objective evaluations and therefore works for
//! non-differentiable rewards.

pub mod tape;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
pub use tape::{Tape, Var};

/// How gradients of the alignment objective are produced.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradientMode {
    /// Exact reverse-mode differentiation through the denoiser and objective.
    Analytic,
    /// Forward-difference zeroth-order estimation with Gaussian directions.
    ZerothOrder {
        mu: f64,
        num_samples: usize,
        seed: u64,
    },
}

impl GradientMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            GradientMode::Analytic => Ok(()),
            GradientMode::ZerothOrder { mu, num_samples, .. } => {
                if !(*mu > 0.0) {
                    return Err(Error::Config(format!("zeroth-order mu must be > 0, got {mu}")));
                }
                if *num_samples == 0 {
                    return Err(Error::Config("zeroth-order num_samples must be >= 1".into()));
                }
                Ok(())
            }
        }
    }

    /// Defaults matching the alignment recipe for black-box rewards.
    pub fn zeroth_order_default(seed: u64) -> Self {
        GradientMode::ZerothOrder {
            mu: 0.02,
            num_samples: 4,
            seed,
        }
    }
}

/// Exact ∂J/∂φ by building the computation on a fresh tape and running one
/// reverse sweep. `build` receives the tape and the φ leaf and must return
/// the scalar objective node.
pub fn analytic_gradient<F>(build: F, phi: &[f64]) -> Result<Vec<f64>>
where
    F: for<'t> FnOnce(&mut Tape<'t>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let phi_var = tape.leaf(phi.to_vec());
    let out = build(&mut tape, phi_var)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Shape("objective must be scalar".into()));
    }
    Ok(tape.gradient(out, phi_var))
}

/// Zeroth-order gradient estimate using directions drawn from `rng`.
///
/// Makes exactly `num_samples + 1` objective evaluations: the base point
/// first (index 0), then one per perturbation (indices 1..=num_samples).
pub fn zo_gradient_with_rng<F>(
    mut objective: F,
    phi: &[f64],
    mu: f64,
    num_samples: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(mu > 0.0) {
        return Err(Error::Config(format!("zeroth-order mu must be > 0, got {mu}")));
    }
    if num_samples == 0 {
        return Err(Error::Config("zeroth-order num_samples must be >= 1".into()));
    }
    let d = phi.len();
    let base = objective(phi).map_err(|e| Error::ZoEval {
        index: 0,
        source: Box::new(e),
    })?;
    let mut grad = vec![0.0; d];
    let mut point = vec![0.0; d];
    for k in 1..=num_samples {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..d {
            point[i] = phi[i] + mu * v[i];
        }
        let j = objective(&point).map_err(|e| Error::ZoEval {
            index: k,
            source: Box::new(e),
        })?;
        let w = (j - base) / (num_samples as f64 * mu);
        crate::math::axpy(&mut grad, w, &v);
    }
    Ok(grad)
}

/// [`zo_gradient_with_rng`] with directions drawn from the mode's own seed;
/// same mode and seed give a bitwise-identical estimate.
pub fn zo_gradient<F>(objective: F, phi: &[f64], mode: &GradientMode) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    match mode {
        GradientMode::ZerothOrder {
            mu,
            num_samples,
            seed,
        } => {
            let mut rng = ChaCha12Rng::seed_from_u64(*seed);
            zo_gradient_with_rng(objective, phi, *mu, *num_samples, &mut rng)
        }
        GradientMode::Analytic => Err(Error::Mode(
            "zo_gradient requires GradientMode::ZerothOrder".into(),
        )),
    }
}
