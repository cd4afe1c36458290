//! Reward functions over data-space points: differentiable analytic rewards,
//! a non-differentiable quantised-code-length reward, and convex weighted
//! combinations for multi-objective runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::math;

/// Tagged description of a reward function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    /// R(x) = −‖x − μ*‖²; maximal (0) at the target point.
    TargetMode { mu_star: Vec<f64> },
    /// R(x) = a·x.
    LinearScore { a: Vec<f64> },
    /// R(x) = −((‖x‖ − r0)/width)²; maximal on the circle of radius r0.
    RadialBand { r0: f64, width: f64 },
    /// R(x) = −(number of distinct nonzero quantised coordinate values at
    /// resolution `cell`). Quantisation rounds to the nearest cell with ties
    /// away from zero. Non-differentiable.
    QuantizedCodeLength { cell: f64 },
    /// R = w·R_A + (1−w)·R_B with w in [0, 1].
    WeightedCombo {
        w: f64,
        a: Box<RewardSpec>,
        b: Box<RewardSpec>,
    },
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nesting_depth() > 2 {
            return Err(Error::Config(
                "weighted combos may nest at most two levels".into(),
            ));
        }
        self.validate_inner()
    }

    fn validate_inner(&self) -> Result<()> {
        match self {
            RewardSpec::TargetMode { mu_star } => {
                if mu_star.is_empty() || mu_star.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config(
                        "target_mode needs a nonempty, finite mu_star".into(),
                    ));
                }
            }
            RewardSpec::LinearScore { a } => {
                if a.is_empty() || a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config(
                        "linear_score needs a nonempty, finite direction".into(),
                    ));
                }
            }
            RewardSpec::RadialBand { r0, width } => {
                if !(*width > 0.0) || !(*r0 >= 0.0) || !width.is_finite() || !r0.is_finite() {
                    return Err(Error::Config(format!(
                        "radial_band needs width > 0 and r0 >= 0, got ({r0}, {width})"
                    )));
                }
            }
            RewardSpec::QuantizedCodeLength { cell } => {
                if !(*cell > 0.0) || !cell.is_finite() {
                    return Err(Error::Config(format!(
                        "quantized_code_length needs cell > 0, got {cell}"
                    )));
                }
            }
            RewardSpec::WeightedCombo { w, a, b } => {
                if !(0.0..=1.0).contains(w) {
                    return Err(Error::Config(format!("combo weight must be in [0,1], got {w}")));
                }
                a.validate_inner()?;
                b.validate_inner()?;
            }
        }
        Ok(())
    }

    fn nesting_depth(&self) -> usize {
        match self {
            RewardSpec::WeightedCombo { a, b, .. } => {
                1 + a.nesting_depth().max(b.nesting_depth())
            }
            _ => 0,
        }
    }

    pub fn is_differentiable(&self) -> bool {
        match self {
            RewardSpec::QuantizedCodeLength { .. } => false,
            RewardSpec::WeightedCombo { a, b, .. } => {
                a.is_differentiable() && b.is_differentiable()
            }
            _ => true,
        }
    }

    /// Short name used in result columns.
    pub fn name(&self) -> String {
        match self {
            RewardSpec::TargetMode { .. } => "target_mode".into(),
            RewardSpec::LinearScore { .. } => "linear_score".into(),
            RewardSpec::RadialBand { .. } => "radial_band".into(),
            RewardSpec::QuantizedCodeLength { .. } => "quantized_code_length".into(),
            RewardSpec::WeightedCombo { .. } => "weighted_combo".into(),
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        match self {
            RewardSpec::TargetMode { mu_star } => -math::sum_sq(&math::sub(x, mu_star)),
            RewardSpec::LinearScore { a } => math::dot(a, x),
            RewardSpec::RadialBand { r0, width } => {
                let d = (math::norm(x) - r0) / width;
                -d * d
            }
            RewardSpec::QuantizedCodeLength { cell } => {
                // f64::round ties away from zero, matching the documented rule
                let mut codes: Vec<i64> = x
                    .iter()
                    .map(|v| (v / cell).round() as i64)
                    .filter(|q| *q != 0)
                    .collect();
                codes.sort_unstable();
                codes.dedup();
                -(codes.len() as f64)
            }
            RewardSpec::WeightedCombo { w, a, b } => {
                w * a.evaluate(x) + (1.0 - w) * b.evaluate(x)
            }
        }
    }

    /// Analytic ∇R for differentiable variants.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            RewardSpec::TargetMode { mu_star } => {
                Ok(x.iter().zip(mu_star).map(|(xi, m)| -2.0 * (xi - m)).collect())
            }
            RewardSpec::LinearScore { a } => Ok(a.clone()),
            RewardSpec::RadialBand { r0, width } => {
                let n = math::norm(x);
                if n == 0.0 {
                    // gradient of ‖x‖ undefined at the origin; use 0
                    return Ok(vec![0.0; x.len()]);
                }
                let c = -2.0 * (n - r0) / (width * width) / n;
                Ok(x.iter().map(|xi| c * xi).collect())
            }
            RewardSpec::QuantizedCodeLength { .. } => Err(Error::Mode(
                "quantized_code_length is not differentiable".into(),
            )),
            RewardSpec::WeightedCombo { w, a, b } => {
                let ga = a.gradient(x)?;
                let gb = b.gradient(x)?;
                Ok(ga
                    .iter()
                    .zip(&gb)
                    .map(|(u, v)| w * u + (1.0 - w) * v)
                    .collect())
            }
        }
    }

    /// Records the reward on a tape for reverse-mode differentiation.
    pub fn tape_eval<'t>(&self, tape: &mut Tape<'t>, x: Var) -> Result<Var> {
        match self {
            RewardSpec::TargetMode { mu_star } => {
                let neg: Vec<f64> = mu_star.iter().map(|m| -m).collect();
                let diff = tape.scale_shift(x, 1.0, neg);
                let s = tape.sum_sq(diff);
                Ok(tape.scale(s, -1.0))
            }
            RewardSpec::LinearScore { a } => Ok(tape.dot_const(x, a.clone())),
            RewardSpec::RadialBand { r0, width } => {
                let s = tape.sum_sq(x);
                let n = tape.sqrt(s);
                let d = tape.add_const(n, -r0);
                let d = tape.scale(d, 1.0 / width);
                let d2 = tape.mul(d, d);
                Ok(tape.scale(d2, -1.0))
            }
            RewardSpec::QuantizedCodeLength { .. } => Err(Error::Mode(
                "quantized_code_length is not differentiable".into(),
            )),
            RewardSpec::WeightedCombo { w, a, b } => {
                let ra = a.tape_eval(tape, x)?;
                let rb = b.tape_eval(tape, x)?;
                let ra = tape.scale(ra, *w);
                let rb = tape.scale(rb, 1.0 - *w);
                Ok(tape.add(ra, rb))
            }
        }
    }
}
